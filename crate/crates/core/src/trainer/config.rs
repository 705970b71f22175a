use serde::{Deserialize, Serialize};

use crate::data::ShiftConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

/// Optimization and augmentation settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub mask_ratio: f64,
    /// Weight of the reconstruction term; 0 gives the contrastive-only ablation.
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub ema_m: f64,
    pub shift: ShiftConfig,
    pub color_strength: f64,
    pub repeated_samples: usize,
    pub linear_probe: bool,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Adds wall-clock time to metrics records (breaks byte-identical reruns).
    pub record_wall_time: bool,
}

impl TrainConfig {
    /// Desk-scale pretraining defaults.
    pub fn pretrain() -> Self {
        Self {
            mode: Mode::Pretrain,
            batch_size: 32,
            base_lr: 8e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_epochs: 10,
            total_epochs: 100,
            mask_ratio: 0.9,
            lambda_r: 1.0,
            lambda_c: 1.0,
            tau: 0.07,
            ema_m: 0.996,
            shift: ShiftConfig::default(),
            color_strength: 0.05,
            repeated_samples: 1,
            linear_probe: false,
            seed: 0,
            checkpoint_every: 0,
            record_wall_time: false,
        }
    }

    /// Desk-scale finetuning defaults.
    pub fn finetune() -> Self {
        Self {
            mode: Mode::Finetune,
            base_lr: 1e-3,
            beta2: 0.999,
            warmup_epochs: 5,
            total_epochs: 30,
            repeated_samples: 2,
            ..Self::pretrain()
        }
    }

    /// `base_lr · batch_size / 256`.
    pub fn effective_lr(&self) -> f64 {
        super::schedule::linear_scale_lr(self.base_lr, self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.total_epochs == 0 || self.warmup_epochs > self.total_epochs {
            return bad("need 0 <= warmup_epochs <= total_epochs and total_epochs >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("learning rate and weight decay must be non-negative, eps positive");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1)");
        }
        if self.lambda_c < 0.0 || self.lambda_r < 0.0 || (self.lambda_c == 0.0 && self.lambda_r == 0.0) {
            return bad("loss weights must be non-negative and not both zero");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return bad("ema_m must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.color_strength) {
            return bad("color_strength must lie in [0, 1]");
        }
        if self.repeated_samples == 0 {
            return bad("repeated_samples must be >= 1");
        }
        if self.mode == Mode::Pretrain && self.batch_size < 2 && self.lambda_c > 0.0 {
            return bad("contrastive pretraining needs batch_size >= 2");
        }
        self.shift.validate()?;
        Ok(())
    }
}
