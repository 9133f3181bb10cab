use fwd_tensor::{ParamStore, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{scale_channels, Init, Linear};
use crate::error::{FwdError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDepConfig {
    pub feature_dim: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
}

impl ViewDepConfig {
    pub fn scaled(width: Real, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            embed_hidden: scale_channels(16, width),
            embed_dim: scale_channels(32, width),
        }
    }
}

/// Direction embedding `δ` and the feature MLP `ψ`:
/// `F′ = ψ([F, δ(Δv)])`, both two linear layers with a ReLU between.
#[derive(Clone, Debug)]
pub struct ViewDependence {
    pub config: ViewDepConfig,
    embed1: Linear,
    embed2: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

impl ViewDependence {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ViewDepConfig, rng: &mut R) -> Self {
        let c = config.feature_dim;
        let embed1 = Linear::new(store, "viewdep.delta1", 4, config.embed_hidden, Init::He, rng);
        let embed2 = Linear::new(store, "viewdep.delta2", config.embed_hidden, config.embed_dim, Init::He, rng);
        let mlp1 = Linear::new(store, "viewdep.psi1", c + config.embed_dim, c, Init::He, rng);
        let mlp2 = Linear::new(store, "viewdep.psi2", c, c, Init::He, rng);
        Self {
            config,
            embed1,
            embed2,
            mlp1,
            mlp2,
        }
    }

    /// `δ(Δv)`: `[P, 4] → [P, embed_dim]`.
    pub fn embed<'t>(&self, tape: &'t Tape, store: &ParamStore, delta: Var<'t>) -> Result<Var<'t>> {
        let h = self.embed1.forward(tape, store, delta)?.relu();
        self.embed2.forward(tape, store, h)
    }

    /// `features: [P, C]`, `delta: [P, 4]` → `[P, C]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, features: Var<'t>, delta: Var<'t>) -> Result<Var<'t>> {
        let (fs, ds) = (features.shape(), delta.shape());
        if fs.len() != 2 || fs[1] != self.config.feature_dim || ds != [fs[0], 4] {
            return Err(FwdError::shape(format!(
                "view dependence expects [P, {}] and [P, 4], got {fs:?} and {ds:?}",
                self.config.feature_dim
            )));
        }
        let e = self.embed(tape, store, delta)?;
        let h = self.mlp1.forward(tape, store, Var::concat(&[features, e], 1)?)?.relu();
        self.mlp2.forward(tape, store, h)
    }
}
