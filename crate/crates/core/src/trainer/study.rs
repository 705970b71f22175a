use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::evaluate_multiview;
use super::finetune::finetune;
use super::pretrain::Pretrainer;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{CmaeModel, ModelConfig};
use crate::scalar::Scalar;

/// Pretraining objective of one comparison arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// `λ_c = 0`.
    ReconstructionOnly,
    /// Reconstruction weight 0.
    ContrastiveOnly,
    Full,
    /// No pretraining.
    Scratch,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::ReconstructionOnly, Arm::ContrastiveOnly, Arm::Full, Arm::Scratch];

    fn weights(self) -> Option<(f64, f64)> {
        match self {
            Arm::ReconstructionOnly => Some((1.0, 0.0)),
            Arm::ContrastiveOnly => Some((0.0, 1.0)),
            Arm::Full => Some((1.0, 1.0)),
            Arm::Scratch => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub n_temporal: usize,
    pub n_spatial: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub lambda_r: Option<f64>,
    pub lambda_c: Option<f64>,
    pub pretrain_first_epoch_loss: Option<f64>,
    pub pretrain_last_epoch_loss: Option<f64>,
    pub finetune_train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mean_test_accuracy: f64,
    pub min_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub config: StudyConfig,
    pub runs: Vec<ArmRun>,
    pub summary: Vec<ArmSummary>,
}

impl TransferReport {
    pub fn mean_accuracy(&self, arm: Arm) -> Option<f64> {
        self.summary.iter().find(|s| s.arm == arm).map(|s| s.mean_test_accuracy)
    }
}

/// Pretrains (except for the scratch arm), finetunes on `train` and
/// evaluates on `test` for every arm and seed.
pub fn transfer_study<T: Scalar>(
    cfg: &StudyConfig,
    train: &Dataset,
    test: &Dataset,
    progress: &mut dyn FnMut(&ArmRun),
) -> Result<TransferReport> {
    let mut runs = Vec::new();
    for &arm in &cfg.arms {
        for &seed in &cfg.seeds {
            let model_cfg = ModelConfig {
                init_seed: seed,
                ..cfg.model.clone()
            };
            let (model, first, last) = match arm.weights() {
                Some((lambda_r, lambda_c)) => {
                    let pcfg = TrainConfig {
                        lambda_r,
                        lambda_c,
                        seed,
                        ..cfg.pretrain.clone()
                    };
                    let mut pre = Pretrainer::<T>::new(pcfg, model_cfg, train)?;
                    let mut epoch_means = Vec::new();
                    while pre.epoch < pre.cfg.total_epochs {
                        let (mut sum, mut n) = (0.0, 0usize);
                        pre.run_epoch(&mut |r| {
                            sum += r.total;
                            n += 1;
                            Ok(())
                        })?;
                        epoch_means.push(sum / n as f64);
                    }
                    (pre.model, epoch_means.first().copied(), epoch_means.last().copied())
                }
                None => (CmaeModel::<T>::new(model_cfg)?, None, None),
            };
            let fcfg = TrainConfig {
                seed,
                ..cfg.finetune.clone()
            };
            let (model, outcome) = finetune(&fcfg, model, train, &mut |_| Ok(()))?;
            let eval = evaluate_multiview(&model, test, cfg.n_temporal, cfg.n_spatial, &fcfg)?;
            let run = ArmRun {
                arm,
                seed,
                lambda_r: arm.weights().map(|w| w.0),
                lambda_c: arm.weights().map(|w| w.1),
                pretrain_first_epoch_loss: first,
                pretrain_last_epoch_loss: last,
                finetune_train_accuracy: outcome.final_train_accuracy,
                test_accuracy: eval.accuracy,
            };
            progress(&run);
            runs.push(run);
        }
    }
    let summary = cfg
        .arms
        .iter()
        .map(|&arm| {
            let acc: Vec<f64> = runs.iter().filter(|r| r.arm == arm).map(|r| r.test_accuracy).collect();
            ArmSummary {
                arm,
                mean_test_accuracy: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
                min_test_accuracy: acc.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })
        .collect();
    Ok(TransferReport {
        config: cfg.clone(),
        runs,
        summary,
    })
}
