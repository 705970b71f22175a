use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ParamId, ParamStore};
use crate::scalar::Scalar;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments for each optimized parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(store: &ParamStore<T>, ids: &[ParamId]) -> Self {
        let zeros = || ids.iter().map(|&id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        Self {
            ids: ids.to_vec(),
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn save_into(&self, store: &ParamStore<T>, ckpt: &mut Checkpoint) {
        ckpt.push_u64("meta.optim.step", &[self.step]);
        for (i, &id) in self.ids.iter().enumerate() {
            ckpt.push_tensor(format!("adam.m.{}", store.name(id)), &self.m[i]);
            ckpt.push_tensor(format!("adam.v.{}", store.name(id)), &self.v[i]);
        }
    }

    pub fn load_from(store: &ParamStore<T>, ids: &[ParamId], ckpt: &Checkpoint) -> Result<Self> {
        let mut state = Self::new(store, ids);
        state.step = ckpt.u64("meta.optim.step")?;
        for (i, &id) in ids.iter().enumerate() {
            let name = store.name(id);
            state.m[i] = ckpt.tensor(&format!("adam.m.{name}"))?;
            state.v[i] = ckpt.tensor(&format!("adam.v.{name}"))?;
            if state.m[i].shape() != store.get(id).shape() || state.v[i].shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!("optimizer moments for {name} have the wrong shape")));
            }
        }
        Ok(state)
    }
}

/// One bias-corrected AdamW step with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != state.ids.len() {
        return Err(Error::InvalidConfig(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.ids.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let c1 = T::lit(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = T::lit(1.0 / (1.0 - cfg.beta2.powi(t)));
    let (lr, eps, wd) = (T::lit(lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
    for (i, &id) in state.ids.iter().enumerate() {
        let theta = store.get_mut(id);
        let g = &grads[i];
        if g.shape() != theta.shape() {
            return Err(Error::InvalidConfig(format!("gradient shape {:?} vs parameter {:?}", g.shape(), theta.shape())));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in theta.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * c1;
            let v_hat = *v * c2;
            *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(theta: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(vec![1], &[theta]).unwrap());
        (store, id)
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn hand_step() {
        let (mut store, id) = one_param(1.0);
        let mut st = OptimState::new(&store, &[id]);
        adamw_step(&mut store, &[Tensor::ones(vec![1])], &mut st, 0.1, &cfg(0.05)).unwrap();
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.1 * 0.05;
        assert!((store.get(id).item() - expect).abs() < 1e-15);
        assert!((store.get(id).item() - 0.895).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_cases() {
        let (mut store, id) = one_param(2.0);
        let mut st = OptimState::new(&store, &[id]);
        adamw_step(&mut store, &[Tensor::zeros(vec![1])], &mut st, 0.1, &cfg(0.0)).unwrap();
        assert_eq!(store.get(id).item(), 2.0);
        adamw_step(&mut store, &[Tensor::zeros(vec![1])], &mut st, 0.1, &cfg(0.05)).unwrap();
        assert!((store.get(id).item() - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn state_roundtrip() {
        let (mut store, id) = one_param(1.0);
        let mut st = OptimState::new(&store, &[id]);
        adamw_step(&mut store, &[Tensor::from_f64(vec![1], &[0.25]).unwrap()], &mut st, 0.1, &cfg(0.0)).unwrap();
        let mut ck = Checkpoint::default();
        st.save_into(&store, &mut ck);
        let back = OptimState::load_from(&store, &[id], &ck).unwrap();
        assert_eq!(back.step, 1);
        assert!((back.m[0].item() - st.m[0].item()).abs() < 1e-7);
    }
}
