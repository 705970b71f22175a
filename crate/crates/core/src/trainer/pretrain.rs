use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use super::config::{Mode, TrainConfig};
use super::metrics::{MetricsRecord, MetricsWriter};
use super::optim::{adamw_step, AdamWConfig, OptimState};
use super::schedule::lr_schedule;
use super::{check_compatible, diagnose, epoch_batches, sample_rng, sample_seed};
use crate::autodiff::Tensor;
use crate::data::{color_augment, normalize, temporal_shift, Dataset};
use crate::error::{Error, Result};
use crate::model::{random_tube_mask, tubify, Checkpoint, CmaeModel, Ctx, MaskPlan, ModelConfig, ParamId};
use crate::objectives::{infonce, recon_loss};
use crate::scalar::Scalar;

/// Tokenized views for one pretraining batch.
#[derive(Debug, Clone)]
pub struct PretrainBatch<T> {
    /// Online view `V_s`, unaugmented, `[N, D_in]` per sample.
    pub online: Vec<Tensor<T>>,
    /// Color-augmented target view `V_t`.
    pub target: Vec<Tensor<T>>,
    /// Mask over the online view.
    pub plans: Vec<MaskPlan>,
    pub seeds: Vec<u64>,
}

/// Builds one training sample from its own RNG stream.
///
/// The online view is masked but never color-augmented; the target view is
/// color-augmented but never masked.
pub fn prepare_sample<T: Scalar>(
    model: &ModelConfig,
    data: &Dataset,
    video: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>, MaskPlan)> {
    let mut rng = sample_rng(seed);
    let max_start = cfg.shift.max_start(data.header.t_total).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "videos of {} frames are too short for span {} plus shift {}",
            data.header.t_total,
            cfg.shift.span(),
            cfg.shift.max_shift
        ))
    })?;
    let t1 = rng.gen_range(0..=max_start);
    let pair = temporal_shift(data, video, t1, &cfg.shift, &mut rng)?;
    let plan = random_tube_mask(model.geometry().num_tokens(), cfg.mask_ratio, &mut rng)?;
    let target = color_augment(&pair.target, cfg.color_strength as f32, &mut rng);
    let online = tubify(&normalize::<T>(&pair.online, &data.header.stats), model.tube, model.patch)?.tokens;
    let target = tubify(&normalize::<T>(&target, &data.header.stats), model.tube, model.patch)?.tokens;
    Ok((online, target, plan))
}

pub fn prepare_batch<T: Scalar>(
    model: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    items: &[(usize, usize)],
) -> Result<PretrainBatch<T>> {
    let mut batch = PretrainBatch {
        online: Vec::with_capacity(items.len()),
        target: Vec::with_capacity(items.len()),
        plans: Vec::with_capacity(items.len()),
        seeds: Vec::with_capacity(items.len()),
    };
    for &(index, video) in items {
        let seed = sample_seed(cfg.seed, epoch, index);
        let (o, t, p) = prepare_sample(model, data, video, cfg, seed)?;
        batch.online.push(o);
        batch.target.push(t);
        batch.plans.push(p);
        batch.seeds.push(seed);
    }
    Ok(batch)
}

/// Loss components of one pretraining step; a component whose weight is
/// zero is not computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_r: Option<f64>,
    pub l_c: Option<f64>,
    pub total: f64,
}

/// Records `L = λ_r·L_r + λ_c·L_c` for `batch` on `ctx`.
///
/// The target encoder runs on a separate gradient-free tape and only when
/// `λ_c > 0`.
pub fn pretrain_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    model: &CmaeModel<T>,
    batch: &PretrainBatch<T>,
    cfg: &TrainConfig,
) -> Result<(crate::autodiff::Var, StepLosses)> {
    let z_vis = model.encode_online(ctx, &batch.online, &batch.plans)?;
    let mut terms = Vec::new();
    let mut losses = StepLosses {
        l_r: None,
        l_c: None,
        total: 0.0,
    };
    if cfg.lambda_r > 0.0 {
        let full = model.assemble_full_sequence(ctx, z_vis, &batch.plans)?;
        let pred = model.pixel_decode(ctx, full, &batch.plans)?;
        let mut rows = Vec::new();
        for (tokens, plan) in batch.online.iter().zip(&batch.plans) {
            rows.push(tokens.select_rows(&plan.masked)?);
        }
        let target = Tensor::stack(&rows)?;
        let target = ctx.constant(target.reshaped(vec![pred_rows(&rows), model.token_dim()])?);
        let l_r = recon_loss(&mut ctx.tape, pred, target)?;
        losses.l_r = Some(ctx.value(l_r).item().as_f64());
        terms.push(if cfg.lambda_r == 1.0 { l_r } else { ctx.tape.scale(l_r, T::lit(cfg.lambda_r)) });
    }
    if cfg.lambda_c > 0.0 {
        let y_s = model.contrastive_feature(ctx, z_vis, &batch.plans)?;
        let y = model.project_online(ctx, y_s)?;
        let z = ctx.constant(model.target_projection(&batch.target)?);
        let l_c = infonce(&mut ctx.tape, y, z, cfg.tau)?;
        losses.l_c = Some(ctx.value(l_c).item().as_f64());
        terms.push(ctx.tape.scale(l_c, T::lit(cfg.lambda_c)));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = ctx.tape.add(total, t)?;
    }
    losses.total = ctx.value(total).item().as_f64();
    Ok((total, losses))
}

fn pred_rows<T: Scalar>(rows: &[Tensor<T>]) -> usize {
    rows.iter().map(|r| r.shape()[0]).sum()
}

/// Forward pass only; useful for probing how inputs affect each loss term.
pub fn evaluate_pretrain_loss<T: Scalar>(model: &CmaeModel<T>, batch: &PretrainBatch<T>, cfg: &TrainConfig) -> Result<StepLosses> {
    let mut ctx = Ctx::frozen(&model.params);
    Ok(pretrain_loss(&mut ctx, model, batch, cfg)?.1)
}

/// Pretraining state: model, optimizer and position in the schedule.
pub struct Pretrainer<'d, T> {
    pub cfg: TrainConfig,
    pub model: CmaeModel<T>,
    pub opt: OptimState<T>,
    trainable: Vec<ParamId>,
    data: &'d Dataset,
    /// Completed epochs.
    pub epoch: usize,
    started: Instant,
}

impl<'d, T: Scalar> Pretrainer<'d, T> {
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig, data: &'d Dataset) -> Result<Self> {
        let model = CmaeModel::new(model_cfg)?;
        Self::with_model(cfg, model, data)
    }

    pub fn with_model(cfg: TrainConfig, model: CmaeModel<T>, data: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != Mode::Pretrain {
            return Err(Error::InvalidConfig("pretraining needs mode = pretrain".into()));
        }
        check_compatible(&model.cfg, &cfg, data)?;
        let trainable = model.pretrain_trainable();
        let opt = OptimState::new(&model.params, &trainable);
        let pre = Self {
            cfg,
            model,
            opt,
            trainable,
            data,
            epoch: 0,
            started: Instant::now(),
        };
        pre.steps_per_epoch()?;
        Ok(pre)
    }

    /// Restores model, optimizer moments and schedule position from a
    /// checkpoint written by [`Pretrainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint, data: &'d Dataset) -> Result<Self> {
        let model = ckpt.to_model()?;
        let seed = ckpt.u64("meta.train.seed")?;
        if seed != cfg.seed {
            return Err(Error::InvalidConfig(format!("checkpoint was trained with seed {seed}, config has {}", cfg.seed)));
        }
        let mut pre = Self::with_model(cfg, model, data)?;
        pre.opt = OptimState::load_from(&pre.model.params, &pre.trainable, ckpt)?;
        pre.epoch = ckpt.u64("meta.train.epoch")? as usize;
        Ok(pre)
    }

    pub fn steps_per_epoch(&self) -> Result<usize> {
        let items = self.data.len() * self.cfg.repeated_samples;
        if items < self.cfg.batch_size {
            return Err(Error::InvalidConfig(format!(
                "{items} samples per epoch cannot fill a batch of {}",
                self.cfg.batch_size
            )));
        }
        Ok(items / self.cfg.batch_size)
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    /// One optimizer step on `batch`, followed by the EMA update of the target branch.
    pub fn step(&mut self, batch: &PretrainBatch<T>, lr: f64) -> Result<StepLosses> {
        let mut ctx = Ctx::new(&self.model.params, &self.trainable);
        let (total, losses) = pretrain_loss(&mut ctx, &self.model, batch, &self.cfg)
            .map_err(|e| diagnose(e, self.epoch, self.opt.step, &batch.seeds))?;
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.opt.step,
                batch_seed: batch.seeds.first().copied().unwrap_or(0),
                detail: format!("losses {losses:?}; sample seeds {:?}", batch.seeds),
            });
        }
        let mut grads = ctx.tape.backward(total)?;
        let grads = ctx.param_grads(&mut grads, &self.trainable);
        drop(ctx);
        let adamw = self.adamw();
        adamw_step(&mut self.model.params, &grads, &mut self.opt, lr, &adamw)?;
        self.model.ema_update(self.cfg.ema_m)?;
        Ok(losses)
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.eps,
            weight_decay: self.cfg.weight_decay,
        }
    }

    /// Runs one epoch, passing each step's record to `sink`.
    pub fn run_epoch(&mut self, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        let spe = self.steps_per_epoch()?;
        let batches = epoch_batches(self.data.len(), &self.cfg, self.epoch);
        for items in batches {
            let lr = lr_schedule(self.opt.step, spe, &self.cfg);
            let batch = prepare_batch(&self.model.cfg, self.data, &self.cfg, self.epoch, &items)?;
            let losses = self.step(&batch, lr)?;
            sink(&MetricsRecord {
                step: self.opt.step,
                epoch: self.epoch,
                lr,
                l_r: losses.l_r,
                l_c: losses.l_c,
                total: losses.total,
                ema_m: Some(self.cfg.ema_m),
                accuracy: None,
                wall_time: self.cfg.record_wall_time.then(|| self.started.elapsed().as_secs_f64()),
            })?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Model, optimizer state and schedule position.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::default();
        ckpt.add_model(&self.model)?;
        ckpt.push_u64("meta.train.epoch", &[self.epoch as u64]);
        ckpt.push_u64("meta.train.seed", &[self.cfg.seed]);
        self.opt.save_into(&self.model.params, &mut ckpt);
        Ok(ckpt)
    }
}

/// Summary of a pretraining run written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub final_checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.cmvc";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.cmvc")
}

/// Trains to `cfg.total_epochs`, appending metrics to `out/metrics.jsonl`
/// and writing periodic and final checkpoints into `out`.
pub fn run_pretrain<T: Scalar>(pre: &mut Pretrainer<'_, T>, out: &Path) -> Result<PretrainOutcome> {
    let mut writer = MetricsWriter::append(&out.join(METRICS_FILE))?;
    let mut epoch_means = Vec::new();
    while pre.epoch < pre.cfg.total_epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        let res = pre.run_epoch(&mut |rec| {
            sum += rec.total;
            n += 1;
            writer.write(rec)
        });
        writer.flush()?;
        res?;
        epoch_means.push(sum / n as f64);
        let every = pre.cfg.checkpoint_every;
        if every > 0 && pre.epoch % every == 0 {
            pre.checkpoint()?.save(&out.join(epoch_checkpoint_name(pre.epoch)))?;
        }
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    pre.checkpoint()?.save(&final_checkpoint)?;
    Ok(PretrainOutcome {
        first_epoch_loss: epoch_means.first().copied().unwrap_or(f64::NAN),
        last_epoch_loss: epoch_means.last().copied().unwrap_or(f64::NAN),
        final_checkpoint,
    })
}
