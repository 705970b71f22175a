use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use super::config::{Mode, TrainConfig};
use super::metrics::{MetricsRecord, MetricsWriter};
use super::optim::{adamw_step, AdamWConfig, OptimState};
use super::pretrain::{FINAL_CHECKPOINT, METRICS_FILE};
use super::schedule::lr_schedule;
use super::{check_compatible, diagnose, epoch_batches, sample_rng, sample_seed};
use crate::autodiff::Tensor;
use crate::data::{normalize, roll_horizontal, sample_clip, Dataset};
use crate::error::{Error, Result};
use crate::model::{tubify, Checkpoint, CmaeModel, Ctx, ModelConfig};
use crate::objectives::cross_entropy;
use crate::scalar::Scalar;

/// Clip tokens at `t1`, rolled horizontally by `dx` pixels.
pub fn clip_tokens<T: Scalar>(
    model: &ModelConfig,
    data: &Dataset,
    video: usize,
    t1: usize,
    dx: usize,
    cfg: &TrainConfig,
) -> Result<Tensor<T>> {
    let clip = sample_clip(data, video, t1, &cfg.shift)?;
    let clip = if dx == 0 { clip } else { roll_horizontal(&clip, dx) };
    Ok(tubify(&normalize::<T>(&clip, &data.header.stats), model.tube, model.patch)?.tokens)
}

/// One finetuning sample: a random start frame and a random circular
/// horizontal roll, both drawn from the sample's own stream.
pub fn prepare_finetune_sample<T: Scalar>(
    model: &ModelConfig,
    data: &Dataset,
    video: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    let span = cfg.shift.span();
    if span > data.header.t_total {
        return Err(Error::InvalidConfig(format!(
            "videos of {} frames are too short for span {span}",
            data.header.t_total
        )));
    }
    let mut rng = sample_rng(seed);
    let t1 = rng.gen_range(0..=data.header.t_total - span);
    let dx = rng.gen_range(0..data.header.width);
    clip_tokens(model, data, video, t1, dx, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub final_train_accuracy: f64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Trains a classifier on top of the online encoder with cross-entropy.
///
/// The classifier head is re-initialized from `cfg.seed`. With
/// `cfg.linear_probe` only the head is updated.
pub fn finetune<T: Scalar>(
    cfg: &TrainConfig,
    mut model: CmaeModel<T>,
    data: &Dataset,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<(CmaeModel<T>, FinetuneOutcome)> {
    cfg.validate()?;
    if cfg.mode != Mode::Finetune {
        return Err(Error::InvalidConfig("finetuning needs mode = finetune".into()));
    }
    if model.cfg.num_classes != data.header.num_classes {
        return Err(Error::InvalidConfig(format!(
            "model has {} classes, dataset has {}",
            model.cfg.num_classes, data.header.num_classes
        )));
    }
    check_compatible(&model.cfg, cfg, data)?;
    let items = data.len() * cfg.repeated_samples;
    if items < cfg.batch_size {
        return Err(Error::InvalidConfig(format!("{items} samples per epoch cannot fill a batch of {}", cfg.batch_size)));
    }
    let spe = items / cfg.batch_size;
    model.reset_classifier(cfg.seed)?;
    let trainable = model.finetune_trainable(cfg.linear_probe);
    let mut opt = OptimState::new(&model.params, &trainable);
    let adamw = AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let labels = data.labels();
    let started = Instant::now();
    let mut last_acc = 0.0;
    for epoch in 0..cfg.total_epochs {
        let (mut correct, mut seen) = (0usize, 0usize);
        for batch in epoch_batches(data.len(), cfg, epoch) {
            let lr = lr_schedule(opt.step, spe, cfg);
            let mut tokens = Vec::with_capacity(batch.len());
            let mut seeds = Vec::with_capacity(batch.len());
            for &(index, video) in &batch {
                let seed = sample_seed(cfg.seed, epoch, index);
                tokens.push(prepare_finetune_sample(&model.cfg, data, video, cfg, seed)?);
                seeds.push(seed);
            }
            let y: Vec<usize> = batch.iter().map(|&(_, v)| labels[v]).collect();
            let mut ctx = Ctx::new(&model.params, &trainable);
            let logits = model.classify(&mut ctx, &tokens).map_err(|e| diagnose(e, epoch, opt.step, &seeds))?;
            let loss = cross_entropy(&mut ctx.tape, logits, &y).map_err(|e| diagnose(e, epoch, opt.step, &seeds))?;
            let loss_value = ctx.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: opt.step,
                    batch_seed: seeds[0],
                    detail: format!("cross-entropy {loss_value}; sample seeds {seeds:?}"),
                });
            }
            let hits = argmax_rows(ctx.value(logits)).iter().zip(&y).filter(|(p, t)| p == t).count();
            let mut grads = ctx.tape.backward(loss)?;
            let grads = ctx.param_grads(&mut grads, &trainable);
            drop(ctx);
            adamw_step(&mut model.params, &grads, &mut opt, lr, &adamw)?;
            correct += hits;
            seen += y.len();
            sink(&MetricsRecord {
                step: opt.step,
                epoch,
                lr,
                l_r: None,
                l_c: None,
                total: loss_value,
                ema_m: None,
                accuracy: Some(hits as f64 / y.len() as f64),
                wall_time: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
            })?;
        }
        last_acc = correct as f64 / seen.max(1) as f64;
    }
    Ok((
        model,
        FinetuneOutcome {
            final_train_accuracy: last_acc,
            final_checkpoint: None,
        },
    ))
}

/// [`finetune`] writing `metrics.jsonl` and `final.cmvc` into `out`.
pub fn run_finetune<T: Scalar>(
    cfg: &TrainConfig,
    model: CmaeModel<T>,
    data: &Dataset,
    out: &Path,
) -> Result<(CmaeModel<T>, FinetuneOutcome)> {
    let mut writer = MetricsWriter::append(&out.join(METRICS_FILE))?;
    let res = finetune(cfg, model, data, &mut |rec| writer.write(rec));
    writer.flush()?;
    let (model, mut outcome) = res?;
    let path = out.join(FINAL_CHECKPOINT);
    let mut ckpt = Checkpoint::default();
    ckpt.add_model(&model)?;
    ckpt.save(&path)?;
    outcome.final_checkpoint = Some(path);
    Ok((model, outcome))
}

pub(crate) fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| argmax(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
