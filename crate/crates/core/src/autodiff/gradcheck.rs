//! Central finite-difference gradient checking in 64-bit precision.
//!
//! The checked function may return a tensor of any shape; it is reduced to
//! a scalar by a fixed pseudo-random projection so that every output
//! element contributes to the compared gradient.

use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest relative error over all inputs.
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tolerance
    }
}

/// Deterministic projection weights in roughly `[-1, 1]`.
fn projection(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.754_877_666).sin() + 0.25 * ((i as f64) * 2.113).cos())
        .collect()
}

fn projected_loss<F, E>(tape: &mut Tape<f64>, inputs: &[Var], f: &F) -> Result<Var, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let out = f(tape, inputs)?;
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape.clone(), projection(shape.iter().product())).map_err(E::from)?);
    let prod = tape.mul(out, w).map_err(E::from)?;
    Ok(tape.sum(prod))
}

fn evaluate<F, E>(inputs: &[Tensor<f64>], f: &F) -> Result<f64, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = projected_loss(&mut tape, &vars, f)?;
    Ok(tape.value(loss).item())
}

/// `‖a − b‖ / (‖a‖ + ‖b‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of `f` with central differences of step `h`.
pub fn check_gradients<F, E>(name: &str, inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = projected_loss(&mut tape, &vars, &f)?;
    let grads = tape.backward(loss).map_err(E::from)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        per_input.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exp_matches_central_differences() {
        let x = Tensor::from_f64(vec![3], &[0.1, -0.4, 0.7]).unwrap();
        let report = check_gradients::<_, AutodiffError>("exp", &[x], 1e-5, |t, v| Ok(t.exp(v[0]))).unwrap();
        assert!(report.passes(1e-8), "{report:?}");
    }
}
