//! Tube tokens, siamese encoders, decoders and heads.

pub mod checkpoint;
mod cmae;
mod ema;
pub mod layers;
mod params;
pub mod tokens;

pub use checkpoint::Checkpoint;
pub use cmae::{CmaeModel, Encoder, ModelConfig, PixelDecoder};
pub use ema::ema_update;
pub use params::{Ctx, ParamId, ParamStore};
pub use tokens::{detokenize, random_tube_mask, sinusoidal_positions, tubify, MaskPlan, TokenGrid, TokenSequence, TubeGeometry};
