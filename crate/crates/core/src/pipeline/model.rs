use std::fmt;
use std::str::FromStr;

use fwd_tensor::{ParamStore, Real, Tape, Tensor, Var};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FwdError, Result};
use crate::geometry::{camera_center, unproject_var, view_delta_var, Intrinsics, Pose};
use crate::io::{SceneBundle, View};
use crate::nn::{
    Conv, DepthConfig, DepthNet, Encoder, EncoderConfig, Fusion, FusionConfig, NoiseGate, RefineConfig, Refiner,
    ViewDepConfig, ViewDependence,
};
use crate::render::{render_var, DepthMode, SplatConfig, DEFAULT_ALPHA_MIN_CLAMP, DEFAULT_K_BLEND, DEFAULT_RADIUS_PX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Sensor depth refined by the U-Net, depth loss on.
    FwdD,
    /// Constant depth prior, no depth supervision.
    FwdU,
    /// FWD-D with the clouds merged and rendered once instead of fused.
    AblateNoTransformer,
    /// FWD-D with `ψ` bypassed (`F′ = F`).
    AblateNoViewdep,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [Self::FwdD, Self::FwdU, Self::AblateNoTransformer, Self::AblateNoViewdep];

    pub fn name(self) -> &'static str {
        match self {
            Self::FwdD => "fwd-d",
            Self::FwdU => "fwd-u",
            Self::AblateNoTransformer => "ablate-no-transformer",
            Self::AblateNoViewdep => "ablate-no-viewdep",
        }
    }

    pub fn uses_sensor_depth(self) -> bool {
        !matches!(self, Self::FwdU)
    }

    pub fn uses_fusion(self) -> bool {
        !matches!(self, Self::AblateNoTransformer)
    }

    pub fn uses_viewdep(self) -> bool {
        !matches!(self, Self::AblateNoViewdep)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = FwdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| FwdError::Domain(format!("unknown variant {s:?}")))
    }
}

pub const DEFAULT_WIDTH_FACTOR: Real = 0.25;
/// Desk-scale training resolution, `(height, width)`.
pub const DEFAULT_RESOLUTION: (usize, usize) = (96, 128);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub width_factor: Real,
    pub feature_dim: usize,
    pub radius_px: Real,
    pub k_blend: usize,
    pub alpha_min_clamp: Real,
    pub depth_mode: DepthMode,
    pub encoder: EncoderConfig,
    pub depth: DepthConfig,
    pub viewdep: ViewDepConfig,
    pub fusion: FusionConfig,
    pub refine: RefineConfig,
}

impl ModelConfig {
    /// Every channel plan scaled by `width`; the feature width is
    /// `round(64·width)`, rounded up to a multiple of the head count.
    pub fn new(variant: ModelVariant, width: Real) -> Self {
        let heads = crate::nn::DEFAULT_HEADS;
        let c = ((64.0 * width).round() as usize).max(heads).div_ceil(heads) * heads;
        Self {
            variant,
            width_factor: width,
            feature_dim: c,
            radius_px: DEFAULT_RADIUS_PX,
            k_blend: DEFAULT_K_BLEND,
            alpha_min_clamp: DEFAULT_ALPHA_MIN_CLAMP,
            depth_mode: DepthMode::Verbatim,
            encoder: EncoderConfig::scaled(width, c),
            depth: DepthConfig::scaled(width),
            viewdep: ViewDepConfig::scaled(width, c),
            fusion: FusionConfig::scaled(width, c),
            refine: RefineConfig::scaled(width, c),
        }
    }

    pub fn splat(&self, intr: &Intrinsics) -> SplatConfig {
        SplatConfig {
            radius_px: self.radius_px,
            k_blend: self.k_blend,
            alpha_min_clamp: self.alpha_min_clamp,
            out_width: intr.width,
            out_height: intr.height,
            depth_mode: self.depth_mode,
        }
    }

    /// Image sides must be multiples of this.
    pub fn size_divisor(&self) -> usize {
        4usize.max(self.refine.divisor())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(ModelVariant::FwdD, DEFAULT_WIDTH_FACTOR)
    }
}

/// One input view lifted into a point cloud: one point per pixel.
#[derive(Clone, Copy)]
pub struct PreparedView<'t> {
    /// `[H·W, 3]` world positions.
    pub positions: Var<'t>,
    /// `[H·W, C]` features before view dependence.
    pub features: Var<'t>,
    /// `[H, W]` refined depth.
    pub depth: Var<'t>,
    pub center: Vector3<Real>,
}

/// A prepared view held outside any tape, for repeated rendering.
#[derive(Clone, Debug)]
pub struct CachedView {
    pub positions: Tensor,
    pub features: Tensor,
    pub depth: Tensor,
    pub center: Vector3<Real>,
}

impl CachedView {
    pub fn attach<'t>(&self, tape: &'t Tape) -> PreparedView<'t> {
        PreparedView {
            positions: tape.constant(self.positions.clone()),
            features: tape.constant(self.features.clone()),
            depth: tape.constant(self.depth.clone()),
            center: self.center,
        }
    }
}

pub struct Synthesis<'t> {
    /// `[H, W, 3]`.
    pub image: Var<'t>,
    /// `[H, W, C]` input to the refinement decoder.
    pub fused: Var<'t>,
    /// Per rendered cloud, `[H, W]`.
    pub depths: Vec<Var<'t>>,
    /// Per rendered cloud, points per pixel.
    pub coverage: Vec<Vec<u32>>,
    /// `[H·W, heads, N]`, when fusion ran.
    pub attention: Option<Tensor>,
}

impl Synthesis<'_> {
    /// Pixels no rendered cloud reached.
    pub fn uncovered(&self) -> Vec<bool> {
        let n = self.coverage.first().map_or(0, Vec::len);
        (0..n).map(|p| self.coverage.iter().all(|c| c[p] == 0)).collect()
    }
}

/// Inference result detached from the tape.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Tensor,
    pub fused: Tensor,
    pub depths: Vec<Tensor>,
    pub coverage: Vec<Vec<u32>>,
    pub attention: Option<Tensor>,
}

impl Rendered {
    pub fn zero_coverage(&self) -> bool {
        self.coverage.iter().all(|c| c.iter().all(|&v| v == 0))
    }
}

impl From<Synthesis<'_>> for Rendered {
    fn from(s: Synthesis<'_>) -> Self {
        Self {
            image: (*s.image.value()).clone(),
            fused: (*s.fused.value()).clone(),
            depths: s.depths.iter().map(|d| (*d.value()).clone()).collect(),
            coverage: s.coverage,
            attention: s.attention,
        }
    }
}

/// The full model: parameters plus the sub-network layouts.
#[derive(Clone, Debug)]
pub struct FwdModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub depth: DepthNet,
    pub viewdep: ViewDependence,
    pub fusion: Fusion,
    pub refiner: Refiner,
}

impl FwdModel {
    /// Parameters are drawn in a fixed order from a ChaCha8 stream seeded
    /// with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let depth = DepthNet::new(&mut store, config.depth.clone(), &mut rng);
        let encoder = Encoder::new(&mut store, config.encoder.clone(), &mut rng);
        let viewdep = ViewDependence::new(&mut store, config.viewdep.clone(), &mut rng);
        let fusion = Fusion::new(&mut store, config.fusion.clone(), &mut rng)?;
        let refiner = Refiner::new(&mut store, config.refine.clone(), &mut rng)?;
        if config.encoder.feature_dim() != config.feature_dim {
            return Err(FwdError::shape(format!(
                "encoder emits {} channels, model expects {}",
                config.encoder.feature_dim(),
                config.feature_dim
            )));
        }
        Ok(Self {
            config,
            store,
            encoder,
            depth,
            viewdep,
            fusion,
            refiner,
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.depth
            .convs()
            .chain(self.encoder.convs())
            .chain(self.refiner.convs())
    }

    /// One power-iteration step for every spectrally normalized conv.
    pub fn update_spectral(&mut self, iters: usize) {
        let convs: Vec<Conv> = self.convs().filter(|c| c.spectral.is_some()).cloned().collect();
        for c in convs {
            c.power_iterate(&mut self.store, iters);
        }
    }

    fn check_view(&self, view: &View) -> Result<()> {
        let (h, w) = (view.intrinsics.height, view.intrinsics.width);
        let d = self.config.size_divisor();
        if view.image.shape() != [h, w, 3] {
            return Err(FwdError::shape(format!("image {:?} does not match {h}×{w}", view.image.shape())));
        }
        if h % d != 0 || w % d != 0 {
            return Err(FwdError::shape(format!("image sides {h}×{w} must be multiples of {d}")));
        }
        Ok(())
    }

    /// Initial depth and validity handed to the depth refiner.
    pub fn initial_depth(&self, view: &View) -> Result<(Tensor, Vec<bool>)> {
        let (h, w) = (view.intrinsics.height, view.intrinsics.width);
        if !self.config.variant.uses_sensor_depth() {
            return Ok((Tensor::zeros([h, w]), vec![false; h * w]));
        }
        let depth = view.depth.as_ref().ok_or_else(|| {
            FwdError::MissingDepth(format!("variant {} needs sensor depth for every input view", self.config.variant))
        })?;
        let valid = view.valid_mask().expect("depth present");
        Ok((depth.clone(), valid))
    }

    /// Depth refinement, feature encoding and unprojection of one view.
    pub fn prepare<'t>(&self, tape: &'t Tape, view: &View) -> Result<PreparedView<'t>> {
        self.check_view(view)?;
        let intr = &view.intrinsics;
        let image = tape.constant(view.image.clone());
        let (init, valid) = self.initial_depth(view)?;
        let depth = self.depth.forward(tape, &self.store, image, &init, &valid)?;
        let positions = unproject_var(depth, intr, &view.pose, &vec![true; intr.num_pixels()])?;
        let features = self
            .encoder
            .forward(tape, &self.store, image)?
            .reshape([intr.num_pixels(), self.config.feature_dim])?;
        Ok(PreparedView {
            positions,
            features,
            depth,
            center: camera_center(&view.pose),
        })
    }

    pub fn prepare_cached(&self, view: &View) -> Result<CachedView> {
        let tape = Tape::inference();
        let p = self.prepare(&tape, view)?;
        Ok(CachedView {
            positions: (*p.positions.value()).clone(),
            features: (*p.features.value()).clone(),
            depth: (*p.depth.value()).clone(),
            center: p.center,
        })
    }

    /// `F′` for every point of `view` as seen from a camera at `target_center`.
    pub fn view_features<'t>(&self, view: &PreparedView<'t>, target_center: Vector3<Real>) -> Result<Var<'t>> {
        if !self.config.variant.uses_viewdep() {
            return Ok(view.features);
        }
        let tape = view.positions.tape();
        let delta = view_delta_var(view.positions, view.center, target_center)?;
        self.viewdep.forward(tape, &self.store, view.features, delta)
    }

    /// Renders prepared views into the target camera, fuses them and decodes
    /// RGB.
    pub fn render<'t>(
        &self,
        tape: &'t Tape,
        views: &[PreparedView<'t>],
        intr: &Intrinsics,
        target: &Pose,
        noise: Option<&mut NoiseGate<'_>>,
    ) -> Result<Synthesis<'t>> {
        if views.is_empty() {
            return Err(FwdError::EmptyInput("synthesis needs at least one input view".into()));
        }
        let cfg = self.config.splat(intr);
        let tc = camera_center(target);
        let c = self.config.feature_dim;
        let (h, w) = (intr.height, intr.width);
        let feats: Vec<Var<'t>> = views.iter().map(|v| self.view_features(v, tc)).collect::<Result<_>>()?;
        let (fused, depths, coverage, attention) = if self.config.variant.uses_fusion() {
            let mut rendered = Vec::with_capacity(views.len());
            let mut depths = Vec::with_capacity(views.len());
            let mut coverage = Vec::with_capacity(views.len());
            for (v, f) in views.iter().zip(&feats) {
                let out = render_var(v.positions, *f, intr, target, &cfg)?;
                rendered.push(out.features.reshape([h * w, c])?);
                depths.push(out.depth);
                coverage.push(out.coverage);
            }
            let masks: Vec<Vec<bool>> = coverage.iter().map(|cv| cv.iter().map(|&n| n > 0).collect()).collect();
            let fo = self.fusion.forward(tape, &self.store, &rendered, Some(&masks))?;
            (fo.fused.reshape([h, w, c])?, depths, coverage, Some(fo.weights))
        } else {
            let pos: Vec<Var<'t>> = views.iter().map(|v| v.positions).collect();
            let out = render_var(Var::concat(&pos, 0)?, Var::concat(&feats, 0)?, intr, target, &cfg)?;
            (out.features, vec![out.depth], vec![out.coverage], None)
        };
        let image = self.refiner.forward(tape, &self.store, fused, noise)?;
        Ok(Synthesis {
            image,
            fused,
            depths,
            coverage,
            attention,
        })
    }

    /// Full forward pass from the selected input views of `scene`.
    pub fn synthesize_on<'t>(&self, tape: &'t Tape, scene: &SceneBundle, inputs: &[usize], target: &Pose) -> Result<Synthesis<'t>> {
        let intr = scene
            .intrinsics()
            .ok_or_else(|| FwdError::EmptyInput(format!("scene {} has no views", scene.name)))?;
        let views = inputs
            .iter()
            .map(|&i| {
                let v = scene
                    .views
                    .get(i)
                    .ok_or_else(|| FwdError::Domain(format!("input view {i} out of range")))?;
                self.prepare(tape, v)
            })
            .collect::<Result<Vec<_>>>()?;
        self.render(tape, &views, &intr, target, None)
    }

    /// Inference from every view of `scene`.
    pub fn synthesize(&self, scene: &SceneBundle, target: &Pose) -> Result<Rendered> {
        let all: Vec<usize> = (0..scene.len()).collect();
        self.synthesize_from(scene, &all, target)
    }

    pub fn synthesize_from(&self, scene: &SceneBundle, inputs: &[usize], target: &Pose) -> Result<Rendered> {
        let tape = Tape::inference();
        Ok(self.synthesize_on(&tape, scene, inputs, target)?.into())
    }

    /// Inference from cached clouds; only view dependence, rendering,
    /// fusion and refinement run.
    pub fn render_cached(&self, cached: &[CachedView], intr: &Intrinsics, target: &Pose) -> Result<Rendered> {
        let tape = Tape::inference();
        let views: Vec<_> = cached.iter().map(|c| c.attach(&tape)).collect();
        Ok(self.render(&tape, &views, intr, target, None)?.into())
    }
}
