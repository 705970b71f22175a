use super::cmae::CmaeModel;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `target ← m·target + (1−m)·online`.
pub fn ema_update<T: Scalar>(target: &mut Tensor<T>, online: &Tensor<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!("EMA momentum {m} outside [0, 1]")));
    }
    if target.shape() != online.shape() {
        return Err(Error::InvalidConfig(format!(
            "EMA shape mismatch: target {:?}, online {:?}",
            target.shape(),
            online.shape()
        )));
    }
    let keep = T::lit(m);
    let take = T::lit(1.0 - m);
    for (t, &o) in target.data_mut().iter_mut().zip(online.data()) {
        *t = keep * *t + take * o;
    }
    Ok(())
}

impl<T: Scalar> CmaeModel<T> {
    /// Moves every target-branch tensor towards its online twin.
    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        for (online, target) in self.ema_pairs() {
            let src = self.params.get(online).clone();
            ema_update(self.params.get_mut(target), &src, m)?;
        }
        Ok(())
    }
}
