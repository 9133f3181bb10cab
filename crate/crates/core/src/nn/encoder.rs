use fwd_tensor::{ParamStore, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{BlockOptions, ResBlock};
use super::layers::{scale_channels, Conv, Init};
use crate::error::{FwdError, Result};

/// Full-width channel plan; the last entry plus RGB is the feature width.
pub const ENCODER_PLAN: [usize; 8] = [32, 32, 32, 64, 64, 64, 64, 61];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub block_channels: Vec<usize>,
    pub use_spectral_norm: bool,
    pub use_instance_norm: bool,
    /// Zero the last block's output convolution and skip projection, so the
    /// learned channels start at exactly zero.
    pub zero_init_last: bool,
}

impl EncoderConfig {
    /// The default channel plan scaled by `width`; the final block is sized so that
    /// `final + 3 == feature_dim`.
    pub fn scaled(width: Real, feature_dim: usize) -> Self {
        let mut block_channels: Vec<usize> = ENCODER_PLAN.iter().map(|&c| scale_channels(c, width)).collect();
        *block_channels.last_mut().expect("non-empty plan") = feature_dim.saturating_sub(3).max(1);
        Self {
            block_channels,
            use_spectral_norm: true,
            use_instance_norm: true,
            zero_init_last: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.block_channels.last().copied().unwrap_or(0) + 3
    }
}

/// Spatial feature encoder: residual blocks at full resolution, with the
/// input RGB appended to the learned channels.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Self {
        let mut cin = 3;
        let n = config.block_channels.len();
        let blocks = config
            .block_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let opts = BlockOptions {
                    instance_norm: config.use_instance_norm,
                    spectral_norm: config.use_spectral_norm,
                    last_init: if i + 1 == n && config.zero_init_last { Init::Zero } else { Init::He },
                    ..Default::default()
                };
                let b = ResBlock::new(store, &format!("encoder.block{i}"), cin, cout, opts, rng);
                cin = cout;
                b
            })
            .collect();
        Self { config, blocks }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.blocks.iter().flat_map(|b| b.convs())
    }

    /// `[H, W, 3] → [H, W, feature_dim]`; the last three channels are the
    /// input image.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, image: Var<'t>) -> Result<Var<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(FwdError::shape(format!("encoder expects [H, W, 3], got {s:?}")));
        }
        let mut h = image;
        for b in &self.blocks {
            h = b.forward(tape, store, h, None)?;
        }
        Ok(Var::concat(&[h, image], 2)?)
    }
}
