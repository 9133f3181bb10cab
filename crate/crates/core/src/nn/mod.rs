//! Learned sub-networks: feature encoder, depth refiner, view-dependent
//! feature MLP, fusion attention and the refinement decoder.
//!
//! Feature maps are channels-last `[H, W, C]`; per-point and per-pixel
//! vectors are `[P, C]`. Every channel plan scales with a width factor.

mod blocks;
mod depth;
mod encoder;
mod fusion;
mod layers;
mod refine;
mod viewdep;

pub use blocks::{BlockOptions, NoiseGate, ResBlock, Resample};
pub use depth::{fill_depth, inv_softplus, DepthConfig, DepthNet};
pub use encoder::{Encoder, EncoderConfig, ENCODER_PLAN};
pub use fusion::{attention_pool, Fusion, FusionConfig, FusionOutput, DEFAULT_HEADS};
pub use layers::{he_uniform, scale_channels, Conv, Init, Linear, SpectralBuffers, NORM_EPS};
pub use refine::{RefineConfig, Refiner, REFINE_PLAN};
pub use viewdep::{ViewDepConfig, ViewDependence};
