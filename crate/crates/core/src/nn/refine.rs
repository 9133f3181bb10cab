use fwd_tensor::{ParamStore, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{BlockOptions, NoiseGate, ResBlock, Resample};
use super::layers::{scale_channels, Conv, Init};
use crate::error::{FwdError, Result};

pub const REFINE_PLAN: [usize; 8] = [64, 128, 256, 256, 128, 128, 128, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    /// Zero-based block indices that average-pool their input.
    pub downsample_at: Vec<usize>,
    /// Zero-based block indices that upsample their input.
    pub upsample_at: Vec<usize>,
    pub use_instance_norm: bool,
    /// Std of the noise added after each normalization during training.
    pub noise_std: Real,
}

impl RefineConfig {
    pub fn scaled(width: Real, in_channels: usize) -> Self {
        let mut block_channels: Vec<usize> = REFINE_PLAN.iter().map(|&c| scale_channels(c, width)).collect();
        *block_channels.last_mut().expect("non-empty plan") = 3;
        Self {
            in_channels,
            block_channels,
            downsample_at: vec![2],
            upsample_at: vec![5],
            use_instance_norm: true,
            noise_std: 0.0,
        }
    }

    /// Spatial dimensions must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.downsample_at.len()
    }
}

/// Residual decoder from fused features to RGB. The final block emits
/// linear values (no normalization or rectification).
#[derive(Clone, Debug)]
pub struct Refiner {
    pub config: RefineConfig,
    pub blocks: Vec<ResBlock>,
}

impl Refiner {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: RefineConfig, rng: &mut R) -> Result<Self> {
        if config.block_channels.last() != Some(&3) {
            return Err(FwdError::shape(format!("refinement must end in 3 channels, got {:?}", config.block_channels)));
        }
        if config.downsample_at.len() != config.upsample_at.len() {
            return Err(FwdError::shape("refinement must upsample as often as it downsamples".to_string()));
        }
        let n = config.block_channels.len();
        let mut cin = config.in_channels;
        let mut blocks = Vec::with_capacity(n);
        for (i, &cout) in config.block_channels.iter().enumerate() {
            let resample = if config.downsample_at.contains(&i) {
                Resample::Down
            } else if config.upsample_at.contains(&i) {
                Resample::Up
            } else {
                Resample::None
            };
            let last = i + 1 == n;
            let opts = BlockOptions {
                instance_norm: config.use_instance_norm,
                spectral_norm: false,
                resample,
                activate_output: !last,
                // small RGB at init keeps the first losses in range
                last_init: if last { Init::Scaled(0.1) } else { Init::He },
            };
            blocks.push(ResBlock::new(store, &format!("refine.block{i}"), cin, cout, opts, rng));
            cin = cout;
        }
        Ok(Self { config, blocks })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.blocks.iter().flat_map(|b| b.convs())
    }

    /// `[H, W, C] → [H, W, 3]`. Noise is only injected when a gate is given
    /// and `noise_std > 0`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        mut noise: Option<&mut NoiseGate<'_>>,
    ) -> Result<Var<'t>> {
        let s = x.shape();
        let d = self.config.divisor();
        if s.len() != 3 || s[2] != self.config.in_channels || !s[0].is_multiple_of(d) || !s[1].is_multiple_of(d) {
            return Err(FwdError::shape(format!(
                "refinement expects [H, W, {}] with H, W divisible by {d}, got {s:?}",
                self.config.in_channels
            )));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, store, h, noise.as_deref_mut())?;
        }
        Ok(h)
    }
}
