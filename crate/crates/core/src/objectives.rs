//! Contrastive, reconstruction and combined training losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cosine similarity of two vectors; zero-norm inputs are rejected.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(AutodiffError::ShapeMismatch {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        }
        .into());
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, a.len()], a.to_vec())?);
    let b = tape.constant(Tensor::new(vec![1, b.len()], b.to_vec())?);
    let rho = tape.cosine_similarity(a, b)?;
    Ok(tape.value(rho).item())
}

/// InfoNCE over a batch of `K` online projections `y` and target projections `z`.
///
/// Sample `i` scores its positive `cos(y_i, z_i)` against the `K−1`
/// negatives `cos(y_i, z_j)`, `j ≠ i`; the result is the mean of the
/// per-sample losses, evaluated through log-sum-exp.
pub fn infonce<T: Scalar>(tape: &mut Tape<T>, y: Var, z: Var, tau: f64) -> Result<Var> {
    let k = tape.shape(y)[0];
    if k < 2 {
        return Err(Error::InvalidConfig(format!("InfoNCE needs at least 2 samples, got {k}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    let rho = tape.cosine_similarity(y, z)?;
    let logits = tape.scale(rho, T::lit(1.0 / tau));
    let log_p = tape.log_softmax(logits, 1)?;
    let flat = tape.reshape(log_p, &[k * k, 1])?;
    let diag: Vec<usize> = (0..k).map(|i| i * k + i).collect();
    let pos = tape.gather_rows(flat, &diag)?;
    let mean = tape.mean(pos);
    Ok(tape.scale(mean, -T::one()))
}

/// Per-element mean squared error over the masked patches.
pub fn recon_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let (sp, st) = (tape.shape(pred), tape.shape(target));
    if sp != st {
        return Err(AutodiffError::ShapeMismatch {
            op: "recon_loss",
            lhs: sp.to_vec(),
            rhs: st.to_vec(),
        }
        .into());
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_c: f64,
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub total: f64,
}

/// `L = λ_r·L_r + λ_c·L_c`; `λ_r = 1` is the standard objective and
/// `λ_r = 0` the contrastive-only ablation.
pub fn weighted_total<T: Scalar>(
    tape: &mut Tape<T>,
    l_r: Var,
    l_c: Var,
    lambda_r: f64,
    lambda_c: f64,
    tau: f64,
) -> Result<(Var, LossReport)> {
    if lambda_c < 0.0 || lambda_r < 0.0 {
        return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
    }
    let r = if lambda_r == 1.0 { l_r } else { tape.scale(l_r, T::lit(lambda_r)) };
    let c = tape.scale(l_c, T::lit(lambda_c));
    let total = tape.add(r, c)?;
    let report = LossReport {
        l_r: tape.value(l_r).item().as_f64(),
        l_c: tape.value(l_c).item().as_f64(),
        lambda_r,
        lambda_c,
        tau,
        total: tape.value(total).item().as_f64(),
    };
    Ok((total, report))
}

/// `L = L_r + λ_c·L_c`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, l_r: Var, l_c: Var, lambda_c: f64, tau: f64) -> Result<(Var, LossReport)> {
    weighted_total(tape, l_r, l_c, 1.0, lambda_c, tau)
}

/// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let [b, c] = *tape.shape(logits) else {
        return Err(Error::InvalidConfig("logits must be [B, C]".into()));
    };
    if labels.len() != b || labels.iter().any(|&l| l >= c) {
        return Err(Error::InvalidConfig(format!("labels {labels:?} do not fit logits [{b}, {c}]")));
    }
    let mut onehot = Tensor::zeros(vec![b, c]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + l] = T::one();
    }
    let log_p = tape.log_softmax(logits, 1)?;
    let onehot = tape.constant(onehot);
    let picked = tape.mul(log_p, onehot)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, T::lit(-1.0 / b as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape<f64>, rows: usize, v: &[f64]) -> Var {
        tape.param(Tensor::from_f64(vec![rows, v.len() / rows], v).unwrap())
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim::<f64>(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn infonce_needs_two_samples() {
        let mut tape = Tape::new();
        let y = mat(&mut tape, 1, &[1.0, 0.0]);
        assert!(infonce(&mut tape, y, y, 0.2).is_err());
        let y = mat(&mut tape, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(infonce(&mut tape, y, y, 0.0).is_err());
    }

    #[test]
    fn recon_cases() {
        let mut tape = Tape::new();
        let p = mat(&mut tape, 1, &[2.0, 0.0]);
        let t = mat(&mut tape, 1, &[0.0, 0.0]);
        let l = recon_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let l = recon_loss(&mut tape, p, p).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let bad = mat(&mut tape, 1, &[0.0, 0.0, 0.0]);
        assert!(recon_loss(&mut tape, p, bad).is_err());
    }

    #[test]
    fn total_arithmetic() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::scalar(0.5));
        let c = tape.constant(Tensor::scalar(0.3));
        let (l, rep) = total_loss(&mut tape, r, c, 1.0, 0.2).unwrap();
        assert_eq!(tape.value(l).item(), 0.5 + 0.3);
        assert_eq!(rep.total, 0.8);
        let (l, _) = total_loss(&mut tape, r, c, 0.0, 0.2).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);
    }

    #[test]
    fn cross_entropy_grad_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let logits = mat(&mut tape, 1, &[0.3, -1.2, 2.0]);
        let l = cross_entropy(&mut tape, logits, &[2]).unwrap();
        let g = tape.backward(l).unwrap().wrt(logits);
        let z: f64 = [0.3f64, -1.2, 2.0].iter().map(|v| v.exp()).sum();
        let expect = [0.3f64.exp() / z, (-1.2f64).exp() / z, 2.0f64.exp() / z - 1.0];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
