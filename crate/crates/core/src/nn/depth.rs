use fwd_tensor::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{scale_channels, Conv, Init};
use crate::error::{FwdError, Result};
use crate::geometry::Z_NEAR;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthConfig {
    /// Channels at full resolution; doubled at each of the two lower levels.
    pub base_channels: usize,
    /// Zero the output layer so the refined depth equals the filled input.
    pub identity_init: bool,
    /// Used where the input carries no valid depth at all.
    pub prior_depth: Real,
}

impl DepthConfig {
    pub fn scaled(width: Real) -> Self {
        Self {
            base_channels: scale_channels(32, width),
            identity_init: false,
            prior_depth: 2.5,
        }
    }
}

/// `log(eˣ − 1)`, the inverse of softplus for `x > 0`.
pub fn inv_softplus(x: Real) -> Real {
    if x > 30.0 {
        x
    } else {
        x.exp_m1().ln()
    }
}

/// Completes missing pixels with the mean valid depth (or the prior).
pub fn fill_depth(depth: &[Real], valid: &[bool], prior: Real) -> (Vec<Real>, Real) {
    let (sum, n) = depth
        .iter()
        .zip(valid)
        .filter(|(d, v)| **v && **d > 0.0)
        .fold((0.0, 0usize), |(s, n), (d, _)| (s + d, n + 1));
    let mean = if n > 0 { sum / n as Real } else { prior };
    let filled = depth
        .iter()
        .zip(valid)
        .map(|(&d, &v)| if v && d > 0.0 { d } else { mean })
        .collect();
    (filled, mean)
}

/// Two-level U-Net refining a filled depth map in the softplus domain:
/// `D = softplus(u + softplus⁻¹(D₀ − z_near)) + z_near`.
#[derive(Clone, Debug)]
pub struct DepthNet {
    pub config: DepthConfig,
    enc1: Conv,
    enc2: Conv,
    mid: Conv,
    dec2: Conv,
    dec1: Conv,
    out: Conv,
}

impl DepthNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DepthConfig, rng: &mut R) -> Self {
        let b = config.base_channels;
        let mut conv = |name: &str, cin, cout, k, init| Conv::new(store, &format!("depth.{name}"), cin, cout, k, init, false, rng);
        let enc1 = conv("enc1", 5, b, 3, Init::He);
        let enc2 = conv("enc2", b, 2 * b, 3, Init::He);
        let mid = conv("mid", 2 * b, 2 * b, 3, Init::He);
        let dec2 = conv("dec2", 4 * b, b, 3, Init::He);
        let dec1 = conv("dec1", 2 * b, b, 3, Init::He);
        // small but nonzero by default so every layer receives gradient
        let out_init = if config.identity_init { Init::Zero } else { Init::Scaled(0.01) };
        let out = conv("out", b, 1, 1, out_init);
        Self {
            config,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            out,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        [&self.enc1, &self.enc2, &self.mid, &self.dec2, &self.dec1, &self.out].into_iter()
    }

    /// `image`: `[H, W, 3]`; `init_depth`: `[H, W]` with 0 for missing.
    /// Returns the strictly positive refined depth `[H, W]`. H and W must be
    /// divisible by 4.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        image: Var<'t>,
        init_depth: &Tensor,
        valid: &[bool],
    ) -> Result<Var<'t>> {
        let s = image.shape();
        let &[h, w] = init_depth.shape() else {
            return Err(FwdError::shape(format!("depth must be [H, W], got {:?}", init_depth.shape())));
        };
        if s != [h, w, 3] || valid.len() != h * w {
            return Err(FwdError::shape(format!("depth net inputs {s:?}, [{h}, {w}], mask {}", valid.len())));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(FwdError::shape(format!("depth net needs H, W divisible by 4, got {h}×{w}")));
        }
        let (filled, mean) = fill_depth(init_depth.data(), valid, self.config.prior_depth);
        let mut aux = Vec::with_capacity(h * w * 2);
        for (d, v) in filled.iter().zip(valid) {
            aux.push(d / mean);
            aux.push(if *v { 1.0 } else { 0.0 });
        }
        let x = Var::concat(&[image, tape.constant(Tensor::new([h, w, 2], aux)?)], 2)?;
        let e1 = self.enc1.forward(tape, store, x)?.relu();
        let e2 = self.enc2.forward(tape, store, e1.avg_pool2()?)?.relu();
        let m = self.mid.forward(tape, store, e2.avg_pool2()?)?.relu();
        let d2 = self.dec2.forward(tape, store, Var::concat(&[m.upsample2()?, e2], 2)?)?.relu();
        let d1 = self.dec1.forward(tape, store, Var::concat(&[d2.upsample2()?, e1], 2)?)?.relu();
        let u = self.out.forward(tape, store, d1)?.reshape([h, w])?;
        let offset = Tensor::new([h, w], filled.iter().map(|&d| inv_softplus((d - Z_NEAR).max(1e-6))).collect())?;
        Ok(u.add(tape.constant(offset))?.softplus().add_scalar(Z_NEAR))
    }
}
