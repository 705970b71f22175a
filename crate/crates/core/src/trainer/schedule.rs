use super::config::TrainConfig;

/// Linear scaling rule: `base_lr · batch_size / 256`.
pub fn linear_scale_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to the effective rate, then cosine decay to 0.
///
/// Steps past the end of training return the final value.
pub fn lr_schedule(step: u64, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.effective_lr();
    let warmup = (cfg.warmup_epochs * steps_per_epoch) as f64;
    let total = (cfg.total_epochs * steps_per_epoch) as f64;
    let s = (step as f64).min(total);
    if s < warmup {
        return peak * s / warmup;
    }
    let decay = total - warmup;
    if decay <= 0.0 {
        return peak;
    }
    let progress = (s - warmup) / decay;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
