use fwd_tensor::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, Init, NORM_EPS};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    None,
    /// 2×2 average pool before the first convolution.
    Down,
    /// Nearest 2× upsample before the first convolution.
    Up,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockOptions {
    pub instance_norm: bool,
    pub spectral_norm: bool,
    pub resample: Resample,
    /// Normalize and rectify the block output. Off for blocks that emit
    /// final values such as RGB.
    pub activate_output: bool,
    /// Initialization of the second convolution and the skip projection.
    pub last_init: Init,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            instance_norm: true,
            spectral_norm: false,
            resample: Resample::None,
            activate_output: true,
            last_init: Init::He,
        }
    }
}

/// Per-call Gaussian noise added after each normalization.
pub struct NoiseGate<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub std: Real,
}

/// `conv3 → norm → relu → conv3 → norm`, plus a bias-free 1×1 projection
/// skip when the channel count changes, then relu.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Option<Conv>,
    pub opts: BlockOptions,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, opts: BlockOptions, rng: &mut R) -> Self {
        let sn = opts.spectral_norm;
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, Init::He, sn, rng);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, opts.last_init, sn, rng);
        let skip = (cin != cout).then(|| Conv::projection(store, &format!("{name}.skip"), cin, cout, 1, opts.last_init, sn, rng));
        Self { conv1, conv2, skip, opts }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        [&self.conv1, &self.conv2].into_iter().chain(self.skip.as_ref())
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        x: Var<'t>,
        mut noise: Option<&mut NoiseGate<'_>>,
    ) -> Result<Var<'t>> {
        let x = match self.opts.resample {
            Resample::None => x,
            Resample::Down => x.avg_pool2()?,
            Resample::Up => x.upsample2()?,
        };
        let norm = |h: Var<'t>, noise: &mut Option<&mut NoiseGate<'_>>| -> Result<Var<'t>> {
            if !self.opts.instance_norm {
                return Ok(h);
            }
            let mut h = h.instance_norm(NORM_EPS)?;
            if let Some(g) = noise.as_deref_mut() {
                if g.std > 0.0 {
                    let n = Tensor::randn(h.shape(), g.std, g.rng);
                    h = h.add(tape.constant(n))?;
                }
            }
            Ok(h)
        };
        let h = norm(self.conv1.forward(tape, store, x)?, &mut noise)?.relu();
        let mut h = self.conv2.forward(tape, store, h)?;
        if self.opts.activate_output {
            h = norm(h, &mut noise)?;
        }
        let s = match &self.skip {
            Some(p) => p.forward(tape, store, x)?,
            None => x,
        };
        let y = h.add(s)?;
        Ok(if self.opts.activate_output { y.relu() } else { y })
    }
}
