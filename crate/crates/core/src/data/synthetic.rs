//! Moving-sprite videos labelled by motion direction.
//!
//! The sprite position wraps around the frame edges and its start point is
//! uniform, so the position distribution of any single frame is uniform
//! for every class. Per-frame pixel statistics therefore carry no label
//! information; only the frame ordering does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Generation parameters for [`generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub num_videos: usize,
    pub num_classes: usize,
    pub t_total: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Half-width of the uniform per-pixel noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            num_videos: 128,
            num_classes: 4,
            t_total: 64,
            channels: 1,
            height: 32,
            width: 32,
            noise_level: 0.05,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !matches!(self.num_classes, 4 | 8) {
            return Err(DataError::InvalidConfig(format!(
                "num_classes must be 4 or 8, got {}",
                self.num_classes
            )));
        }
        if self.num_videos == 0 || self.t_total == 0 || self.channels == 0 || self.height < 4 || self.width < 4 {
            return Err(DataError::InvalidConfig("dimensions must be positive (H, W >= 4)".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(DataError::InvalidConfig("noise_level must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Per-channel normalization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Dataset-level metadata stored in the file header.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub num_classes: usize,
    pub t_total: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stats: ChannelStats,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn video_len(&self) -> usize {
        self.t_total * self.frame_len()
    }
}

/// One generated video; pixels are quantized to `u8` in `T_total×C×H×W` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub pixels: Vec<u8>,
    pub label: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub videos: Vec<SyntheticVideo>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.videos.iter().map(|v| v.label).collect()
    }

    /// Pixel of `video` at `(t, c, y, x)` in `[0, 1]`.
    pub fn pixel(&self, video: usize, t: usize, c: usize, y: usize, x: usize) -> f32 {
        let h = &self.header;
        let idx = ((t * h.channels + c) * h.height + y) * h.width + x;
        self.videos[video].pixels[idx] as f32 / 255.0
    }
}

/// Per-video seed derived from the dataset seed (splitmix64 finalizer).
pub fn video_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit direction `(dy, dx)` for a class; 4 classes are the axis directions,
/// 8 classes add the diagonals.
pub fn class_direction(label: usize, num_classes: usize) -> (f32, f32) {
    let angle = 2.0 * std::f32::consts::PI * label as f32 / num_classes as f32;
    (angle.sin(), angle.cos())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render(cfg: &GenerateConfig, label: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let sprite = (h.min(w) / 5).max(2);
    let (dy, dx) = class_direction(label, cfg.num_classes);
    let speed: f32 = rng.gen_range(1.0..1.5);
    let y0: f32 = rng.gen_range(0.0..h as f32);
    let x0: f32 = rng.gen_range(0.0..w as f32);
    let background: Vec<f32> = (0..c).map(|_| rng.gen_range(0.05..0.25)).collect();
    let color: Vec<f32> = (0..c).map(|_| rng.gen_range(0.6..1.0)).collect();

    let mut out = Vec::with_capacity(cfg.t_total * cfg.frame_len());
    for t in 0..cfg.t_total {
        let py = (y0 + dy * speed * t as f32).rem_euclid(h as f32).floor() as usize % h;
        let px = (x0 + dx * speed * t as f32).rem_euclid(w as f32).floor() as usize % w;
        for ch in 0..c {
            for y in 0..h {
                let in_y = (y + h - py) % h < sprite;
                for x in 0..w {
                    let in_x = (x + w - px) % w < sprite;
                    let base = if in_y && in_x { color[ch] } else { background[ch] };
                    let noise = if cfg.noise_level > 0.0 {
                        let a = cfg.noise_level as f32;
                        rng.gen_range(-a..=a)
                    } else {
                        0.0
                    };
                    out.push(quantize(base + noise));
                }
            }
        }
    }
    out
}

fn channel_stats(videos: &[SyntheticVideo], channels: usize, frame_len: usize) -> ChannelStats {
    let plane = frame_len / channels;
    let mut sum = vec![0f64; channels];
    let mut sq = vec![0f64; channels];
    let mut count = 0f64;
    for v in videos {
        for frame in v.pixels.chunks_exact(frame_len) {
            for (ch, p) in frame.chunks_exact(plane).enumerate() {
                for &b in p {
                    let x = b as f64 / 255.0;
                    sum[ch] += x;
                    sq[ch] += x * x;
                }
            }
            count += plane as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    ChannelStats {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std,
    }
}

/// Generates a class-balanced dataset fully determined by `cfg.seed`.
pub fn generate(cfg: &GenerateConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let videos: Vec<SyntheticVideo> = (0..cfg.num_videos)
        .map(|i| {
            let label = i % cfg.num_classes;
            let seed = video_seed(cfg.seed, i);
            SyntheticVideo {
                pixels: render(cfg, label, seed),
                label,
                seed,
            }
        })
        .collect();
    let stats = channel_stats(&videos, cfg.channels, cfg.frame_len());
    Ok(Dataset {
        header: DatasetHeader {
            num_classes: cfg.num_classes,
            t_total: cfg.t_total,
            channels: cfg.channels,
            height: cfg.height,
            width: cfg.width,
            stats,
            seed: cfg.seed,
        },
        videos,
    })
}
