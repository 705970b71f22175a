//! Synthetic motion videos, clip sampling and view augmentation.

pub mod clip;
pub mod format;
pub mod synthetic;

pub use clip::{
    color_augment, denormalize, normalize, roll_horizontal, sample_clip, temporal_shift, temporal_shift_with,
    ColorJitter, ShiftConfig, VideoClip, ViewPair,
};
pub use format::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use synthetic::{generate, ChannelStats, Dataset, DatasetHeader, GenerateConfig, SyntheticVideo};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("clip reaches frame {last} but the video has {t_total} frames")]
    OutOfRange { last: usize, t_total: usize },
    #[error("no video with index {0}")]
    NoSuchVideo(usize),
    #[error("invalid data configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
