use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::finetune::{argmax, clip_tokens};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{CmaeModel, Ctx};
use crate::scalar::Scalar;

const VIEW_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_temporal: usize,
    pub n_spatial: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// `n` start frames evenly spaced over `0..=t_total − span`.
///
/// A single view starts at the middle of the valid range.
pub fn view_starts(t_total: usize, span: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one temporal view".into()));
    }
    if span > t_total || t_total - span + 1 < n {
        return Err(Error::InvalidConfig(format!(
            "videos of {t_total} frames cannot hold {n} distinct clips of span {span}"
        )));
    }
    let last = t_total - span;
    if n == 1 {
        return Ok(vec![last / 2]);
    }
    Ok((0..n).map(|k| ((k * last) as f64 / (n - 1) as f64).round() as usize).collect())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Mean of the per-view softmax distributions.
pub fn average_view_probabilities(view_logits: &[Vec<f64>]) -> Vec<f64> {
    let c = view_logits.first().map_or(0, |v| v.len());
    let mut avg = vec![0.0; c];
    for logits in view_logits {
        for (a, p) in avg.iter_mut().zip(softmax(logits)) {
            *a += p;
        }
    }
    let n = view_logits.len() as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    avg
}

/// Top-1 accuracy after averaging softmax outputs over
/// `n_temporal × n_spatial` views per video.
///
/// Temporal views start at evenly spaced frames; spatial views are circular
/// horizontal rolls by multiples of `width / n_spatial`, the first being the
/// identity.
pub fn evaluate_multiview<T: Scalar>(
    model: &CmaeModel<T>,
    data: &Dataset,
    n_temporal: usize,
    n_spatial: usize,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if n_spatial == 0 {
        return Err(Error::InvalidConfig("need at least one spatial view".into()));
    }
    if model.cfg.num_classes != data.header.num_classes {
        return Err(Error::InvalidConfig(format!(
            "model has {} classes, dataset has {}",
            model.cfg.num_classes, data.header.num_classes
        )));
    }
    super::check_compatible(&model.cfg, cfg, data)?;
    let starts = view_starts(data.header.t_total, cfg.shift.span(), n_temporal)?;
    let w = data.header.width;
    let views: Vec<(usize, usize)> = starts
        .iter()
        .flat_map(|&t| (0..n_spatial).map(move |s| (t, s * w / n_spatial)))
        .collect();
    let mut queue = Vec::new();
    for v in 0..data.len() {
        for &(t1, dx) in &views {
            queue.push((v, t1, dx));
        }
    }
    let mut logits = Vec::with_capacity(queue.len());
    for chunk in queue.chunks(VIEW_CHUNK) {
        let tokens = chunk
            .iter()
            .map(|&(v, t1, dx)| clip_tokens::<T>(&model.cfg, data, v, t1, dx, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut ctx = Ctx::frozen(&model.params);
        let out = model.classify(&mut ctx, &tokens)?;
        let c = model.cfg.num_classes;
        logits.extend(ctx.value(out).data().chunks(c).map(|r| r.iter().map(|x| x.as_f64()).collect::<Vec<_>>()));
    }
    let labels = data.labels();
    let predictions: Vec<usize> = logits
        .chunks(views.len())
        .map(|per_video| argmax(&average_view_probabilities(per_video)))
        .collect();
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(EvalReport {
        n_temporal,
        n_spatial,
        correct,
        total: data.len(),
        accuracy: correct as f64 / data.len().max(1) as f64,
        predictions,
    })
}
