//! Clip sampling, temporal-shift view pairs and per-clip color jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::{ChannelStats, Dataset};
use super::DataError;
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Frames per clip, sampling stride and maximum forward disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub frames: usize,
    pub rate: usize,
    pub max_shift: usize,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            rate: 2,
            max_shift: 3,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames == 0 || self.rate == 0 {
            return Err(DataError::InvalidConfig("frames and rate must be >= 1".into()));
        }
        Ok(())
    }

    /// Source frames covered by one clip, `(T−1)·r + 1`.
    pub fn span(&self) -> usize {
        (self.frames - 1) * self.rate + 1
    }

    /// Largest start frame for which a shifted pair fits in `t_total` frames.
    pub fn max_start(&self, t_total: usize) -> Option<usize> {
        (t_total).checked_sub(self.span() + self.max_shift)
    }
}

/// `T×C×H×W` pixels in `[0, 1]` with their source frame indices.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub pixels: Vec<f32>,
    pub timestamps: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoClip {
    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }
}

/// Frames `t1, t1+r, …, t1+(T−1)·r` of video `index`.
pub fn sample_clip(ds: &Dataset, index: usize, t1: usize, cfg: &ShiftConfig) -> Result<VideoClip, DataError> {
    cfg.validate()?;
    let h = &ds.header;
    let last = t1 + (cfg.frames - 1) * cfg.rate;
    if last >= h.t_total {
        return Err(DataError::OutOfRange {
            last,
            t_total: h.t_total,
        });
    }
    let video = ds.videos.get(index).ok_or(DataError::NoSuchVideo(index))?;
    let fl = h.frame_len();
    let timestamps: Vec<usize> = (0..cfg.frames).map(|k| t1 + k * cfg.rate).collect();
    let mut pixels = Vec::with_capacity(cfg.frames * fl);
    for &ts in &timestamps {
        pixels.extend(video.pixels[ts * fl..(ts + 1) * fl].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(VideoClip {
        pixels,
        timestamps,
        channels: h.channels,
        height: h.height,
        width: h.width,
    })
}

/// Online and target views of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub online: VideoClip,
    pub target: VideoClip,
    pub delta: usize,
}

/// Views at timestamps `t1 + k·r` and `t1 + k·r + δ` for a given `δ ≤ p`.
pub fn temporal_shift_with(
    ds: &Dataset,
    index: usize,
    t1: usize,
    cfg: &ShiftConfig,
    delta: usize,
) -> Result<ViewPair, DataError> {
    check_shift_range(ds, t1, cfg)?;
    if delta > cfg.max_shift {
        return Err(DataError::InvalidConfig(format!(
            "delta {delta} exceeds max_shift {}",
            cfg.max_shift
        )));
    }
    Ok(ViewPair {
        online: sample_clip(ds, index, t1, cfg)?,
        target: sample_clip(ds, index, t1 + delta, cfg)?,
        delta,
    })
}

fn check_shift_range(ds: &Dataset, t1: usize, cfg: &ShiftConfig) -> Result<(), DataError> {
    cfg.validate()?;
    let last = t1 + (cfg.frames - 1) * cfg.rate + cfg.max_shift;
    if last >= ds.header.t_total {
        return Err(DataError::OutOfRange {
            last,
            t_total: ds.header.t_total,
        });
    }
    Ok(())
}

/// Draws `δ` uniformly from the integers `0..=p` and builds the view pair.
///
/// The range is validated before `rng` is touched.
pub fn temporal_shift<R: Rng + ?Sized>(
    ds: &Dataset,
    index: usize,
    t1: usize,
    cfg: &ShiftConfig,
    rng: &mut R,
) -> Result<ViewPair, DataError> {
    check_shift_range(ds, t1, cfg)?;
    let delta = rng.gen_range(0..=cfg.max_shift);
    temporal_shift_with(ds, index, t1, cfg, delta)
}

/// Per-channel brightness/contrast jitter shared by every frame of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorJitter {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl ColorJitter {
    pub fn sample<R: Rng + ?Sized>(channels: usize, strength: f32, rng: &mut R) -> Self {
        let s = strength.clamp(0.0, 1.0);
        let scale = (0..channels).map(|_| rng.gen_range(1.0 - s..=1.0 + s)).collect();
        let shift = (0..channels).map(|_| rng.gen_range(-s / 2.0..=s / 2.0)).collect();
        Self { scale, shift }
    }

    pub fn apply(&self, clip: &VideoClip) -> VideoClip {
        let plane = clip.height * clip.width;
        let mut out = clip.clone();
        for frame in out.pixels.chunks_exact_mut(clip.frame_len()) {
            for (c, p) in frame.chunks_exact_mut(plane).enumerate() {
                for v in p {
                    *v = (*v * self.scale[c] + self.shift[c]).clamp(0.0, 1.0);
                }
            }
        }
        out
    }
}

pub fn color_augment<R: Rng + ?Sized>(clip: &VideoClip, strength: f32, rng: &mut R) -> VideoClip {
    ColorJitter::sample(clip.channels, strength, rng).apply(clip)
}

/// Circular horizontal shift by `dx` pixels (evaluation spatial views).
pub fn roll_horizontal(clip: &VideoClip, dx: usize) -> VideoClip {
    let w = clip.width;
    let mut out = clip.clone();
    for (src, dst) in clip.pixels.chunks_exact(w).zip(out.pixels.chunks_exact_mut(w)) {
        for x in 0..w {
            dst[(x + dx) % w] = src[x];
        }
    }
    out
}

/// `(pixel − mean_c) / std_c`, returned as a `[T, C, H, W]` tensor.
pub fn normalize<T: Scalar>(clip: &VideoClip, stats: &ChannelStats) -> Tensor<T> {
    let plane = clip.height * clip.width;
    let mut data = Vec::with_capacity(clip.pixels.len());
    for frame in clip.pixels.chunks_exact(clip.frame_len()) {
        for (c, p) in frame.chunks_exact(plane).enumerate() {
            let (m, s) = (stats.mean[c] as f64, stats.std[c] as f64);
            data.extend(p.iter().map(|&v| T::lit((v as f64 - m) / s)));
        }
    }
    Tensor::new(vec![clip.frames(), clip.channels, clip.height, clip.width], data)
        .expect("clip dimensions are positive")
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(x: &Tensor<T>, stats: &ChannelStats) -> Vec<f32> {
    let s = x.shape();
    let (c_n, plane) = (s[1], s[2] * s[3]);
    x.data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = (i / plane) % c_n;
            (v.as_f64() * stats.std[c] as f64 + stats.mean[c] as f64) as f32
        })
        .collect()
}
