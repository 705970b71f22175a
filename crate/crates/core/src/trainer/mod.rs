//! Optimization, pretraining, finetuning and multi-view evaluation.

pub mod config;
pub mod eval;
pub mod finetune;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod schedule;
pub mod study;

pub use config::{Mode, TrainConfig};
pub use eval::{average_view_probabilities, evaluate_multiview, view_starts, EvalReport};
pub use finetune::{finetune, run_finetune, FinetuneOutcome};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use pretrain::{evaluate_pretrain_loss, run_pretrain, PretrainBatch, PretrainOutcome, Pretrainer, StepLosses};
pub use schedule::{linear_scale_lr, lr_schedule};
pub use study::{transfer_study, Arm, ArmRun, StudyConfig, TransferReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the RNG stream for sample `index` of `epoch`.
///
/// Each sample's augmentation depends only on this triple, so batches can be
/// assembled in any order without changing results.
pub fn sample_seed(run_seed: u64, epoch: usize, index: usize) -> u64 {
    mix(mix(mix(run_seed) ^ epoch as u64) ^ index as u64)
}

pub(crate) fn sample_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shuffled `(sample_index, video)` batches for one epoch.
///
/// Every video appears `repeated_samples` times; the final partial batch is dropped.
pub fn epoch_batches(num_videos: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut videos: Vec<usize> = (0..num_videos).flat_map(|v| std::iter::repeat(v).take(cfg.repeated_samples)).collect();
    let mut rng = sample_rng(mix(sample_seed(cfg.seed, epoch, usize::MAX)));
    videos.shuffle(&mut rng);
    let items: Vec<(usize, usize)> = videos.into_iter().enumerate().collect();
    items
        .chunks(cfg.batch_size)
        .filter(|c| c.len() == cfg.batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Turns a non-finite forward pass into a [`Error::NonFiniteLoss`] naming the batch.
pub(crate) fn diagnose(err: Error, epoch: usize, step: u64, seeds: &[u64]) -> Error {
    match err {
        Error::Autodiff(crate::AutodiffError::NonFinite(op)) => Error::NonFiniteLoss {
            epoch,
            step,
            batch_seed: seeds.first().copied().unwrap_or(0),
            detail: format!("non-finite values entering {op}; sample seeds {seeds:?}"),
        },
        other => other,
    }
}

pub(crate) fn check_compatible(model: &ModelConfig, cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    let h = &data.header;
    if (model.channels, model.height, model.width) != (h.channels, h.height, h.width) {
        return Err(Error::InvalidConfig(format!(
            "model expects {}x{}x{} frames, dataset has {}x{}x{}",
            model.channels, model.height, model.width, h.channels, h.height, h.width
        )));
    }
    if model.frames != cfg.shift.frames {
        return Err(Error::InvalidConfig(format!(
            "model expects {} frames per clip, sampler produces {}",
            model.frames, cfg.shift.frames
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_video_r_times() {
        let cfg = TrainConfig {
            batch_size: 4,
            repeated_samples: 2,
            ..TrainConfig::finetune()
        };
        let batches = epoch_batches(10, &cfg, 3);
        assert_eq!(batches.len(), 5);
        let mut count = vec![0; 10];
        for (i, v) in batches.iter().flatten() {
            assert!(*i < 20);
            count[*v] += 1;
        }
        assert!(count.iter().all(|&c| c == 2));
        assert_eq!(batches, epoch_batches(10, &cfg, 3));
        assert_ne!(batches, epoch_batches(10, &cfg, 4));
    }

    #[test]
    fn partial_batch_dropped() {
        let cfg = TrainConfig {
            batch_size: 4,
            repeated_samples: 1,
            ..TrainConfig::pretrain()
        };
        assert_eq!(epoch_batches(10, &cfg, 0).len(), 2);
    }
}
