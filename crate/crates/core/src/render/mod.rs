//! Differentiable point splatting with top-K alpha compositing.
//!
//! Every point whose projected center lies strictly within `radius_px` of a
//! pixel center contributes to that pixel. Contributions are ordered by
//! camera-space depth (ties by point index), truncated to the `k_blend`
//! nearest and composited front to back:
//!
//! ```text
//! α    = 1 − clamp(√(s / r²), α_min, 1)      s = squared pixel distance
//! F_l  = Σᵢ αᵢ Tᵢ Fᵢ                          Tᵢ = Πⱼ<ᵢ (1 − αⱼ)
//! D_l  = Σᵢ αᵢ dᵢ                             (or Σᵢ αᵢ Tᵢ dᵢ)
//! ```

mod backward;
mod op;
mod raster;
pub mod reference;

pub use backward::{rasterize_backward, CloudGradients};
pub use op::{render_var, RenderOutput};
pub use raster::rasterize;

use fwd_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{FwdError, Result};
use crate::geometry::{Intrinsics, PointCloud};

pub const DEFAULT_RADIUS_PX: Real = 1.5;
pub const DEFAULT_K_BLEND: usize = 16;
pub const DEFAULT_ALPHA_MIN_CLAMP: Real = 1e-3;

/// How composited depth is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    /// `Σ αᵢ dᵢ`, not normalized.
    #[default]
    Verbatim,
    /// `Σ αᵢ Tᵢ dᵢ`, the same weights as the features.
    Transmittance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatConfig {
    pub radius_px: Real,
    pub k_blend: usize,
    pub alpha_min_clamp: Real,
    pub out_width: usize,
    pub out_height: usize,
    pub depth_mode: DepthMode,
}

impl SplatConfig {
    pub fn new(out_width: usize, out_height: usize) -> Self {
        Self {
            radius_px: DEFAULT_RADIUS_PX,
            k_blend: DEFAULT_K_BLEND,
            alpha_min_clamp: DEFAULT_ALPHA_MIN_CLAMP,
            out_width,
            out_height,
            depth_mode: DepthMode::Verbatim,
        }
    }

    pub fn for_intrinsics(intr: &Intrinsics) -> Self {
        Self::new(intr.width, intr.height)
    }

    pub fn with_radius(mut self, r: Real) -> Self {
        self.radius_px = r;
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k_blend = k;
        self
    }

    pub fn with_depth_mode(mut self, mode: DepthMode) -> Self {
        self.depth_mode = mode;
        self
    }

    pub fn validate(&self, intr: &Intrinsics) -> Result<()> {
        if !(self.radius_px > 0.0) || self.k_blend == 0 || !(0.0..1.0).contains(&self.alpha_min_clamp) {
            return Err(FwdError::Domain(format!("invalid splat config {self:?}")));
        }
        if (self.out_width, self.out_height) != (intr.width, intr.height) {
            return Err(FwdError::shape(format!(
                "splat target {}×{} does not match camera {}×{}",
                self.out_height, self.out_width, intr.height, intr.width
            )));
        }
        Ok(())
    }
}

/// `α = 1 − clamp(√(s/r²), 1e-3, 1)`.
pub fn blend_weight(s: Real, radius_px: Real) -> Result<Real> {
    if !(s >= 0.0) {
        return Err(FwdError::Domain(format!("negative squared distance {s}")));
    }
    Ok(alpha(s, radius_px * radius_px, DEFAULT_ALPHA_MIN_CLAMP).0)
}

/// α and dα/ds; the derivative is zero wherever the clamp is active.
#[inline]
pub(crate) fn alpha(s: Real, r2: Real, min_clamp: Real) -> (Real, Real) {
    let q = (s / r2).sqrt();
    if q <= min_clamp {
        (1.0 - min_clamp, 0.0)
    } else if q >= 1.0 {
        (0.0, 0.0)
    } else {
        // d/ds √(s/r²) = 1 / (2 r² q)
        (1.0 - q, -0.5 / (r2 * q))
    }
}

/// One point's contribution to one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub point: u32,
    pub alpha: Real,
    pub z: Real,
    pub s: Real,
}

/// Output of [`rasterize`]. The splat radius is always taken from the
/// [`SplatConfig`]; [`PointCloud::radius_px`] records the radius a cloud was
/// built for.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    /// `[H, W, C]`.
    pub features: Tensor,
    /// `[H, W]`.
    pub depth: Tensor,
    /// Contributing points per pixel, capped at `k_blend`.
    pub coverage: Vec<u32>,
    hit_offsets: Vec<usize>,
    hits: Vec<Hit>,
}

impl RenderedView {
    pub(crate) fn from_hits(
        height: usize,
        width: usize,
        cloud: &PointCloud,
        cfg: &SplatConfig,
        hit_offsets: Vec<usize>,
        hits: Vec<Hit>,
    ) -> Self {
        let c = cloud.feature_dim();
        let n_pix = height * width;
        let feats = cloud.features.data();
        let mut features = vec![0.0; n_pix * c];
        let mut depth = vec![0.0; n_pix];
        let mut coverage = vec![0u32; n_pix];
        for pix in 0..n_pix {
            let px_hits = &hits[hit_offsets[pix]..hit_offsets[pix + 1]];
            coverage[pix] = px_hits.len() as u32;
            let out = &mut features[pix * c..(pix + 1) * c];
            let mut t = 1.0;
            let mut d = 0.0;
            for h in px_hits {
                let w = h.alpha * t;
                let f = &feats[h.point as usize * c..(h.point as usize + 1) * c];
                for (o, fi) in out.iter_mut().zip(f) {
                    *o += w * fi;
                }
                d += match cfg.depth_mode {
                    DepthMode::Verbatim => h.alpha * h.z,
                    DepthMode::Transmittance => w * h.z,
                };
                t *= 1.0 - h.alpha;
            }
            depth[pix] = d;
        }
        Self {
            features: Tensor::new([height, width, c], features).expect("shape"),
            depth: Tensor::new([height, width], depth).expect("shape"),
            coverage,
            hit_offsets,
            hits,
        }
    }

    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    /// Hits at a row-major pixel index, nearest first.
    pub fn hits(&self, pixel: usize) -> &[Hit] {
        &self.hits[self.hit_offsets[pixel]..self.hit_offsets[pixel + 1]]
    }

    pub fn total_hits(&self) -> usize {
        self.hits.len()
    }

    pub fn covered(&self) -> Vec<bool> {
        self.coverage.iter().map(|&c| c > 0).collect()
    }

    pub fn coverage_fraction(&self) -> Real {
        let n = self.coverage.len().max(1);
        self.coverage.iter().filter(|&&c| c > 0).count() as Real / n as Real
    }
}

/// Sorts candidate hits by `(z, index)` and keeps the `k` nearest.
pub(crate) fn select_nearest(cands: &mut Vec<Hit>, k: usize) {
    cands.sort_unstable_by(|a, b| a.z.total_cmp(&b.z).then(a.point.cmp(&b.point)));
    cands.truncate(k);
}

/// Concatenates clouds. The radius of the first cloud is kept.
pub fn aggregate_clouds(clouds: &[PointCloud]) -> Result<PointCloud> {
    let Some(first) = clouds.first() else {
        return Err(FwdError::EmptyInput("aggregate of zero clouds".into()));
    };
    let c = first.feature_dim();
    let mut pos = Vec::new();
    let mut feat = Vec::new();
    for cl in clouds {
        if cl.feature_dim() != c {
            return Err(FwdError::shape(format!(
                "feature width {} does not match {c}",
                cl.feature_dim()
            )));
        }
        pos.extend_from_slice(cl.positions.data());
        feat.extend_from_slice(cl.features.data());
    }
    let n = pos.len() / 3;
    PointCloud::new(Tensor::new([n, 3], pos)?, Tensor::new([n, c], feat)?, first.radius_px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_weight_anchors() {
        let r: Real = 1.5;
        assert_eq!(blend_weight(0.0, r).unwrap(), 0.999);
        assert_eq!(blend_weight(r * r, r).unwrap(), 0.0);
        assert_eq!(blend_weight(r * r / 4.0, r).unwrap(), 0.5);
        assert_eq!(blend_weight(0.5625, r).unwrap(), 0.5);
        assert!(blend_weight(-1e-3, r).is_err());
    }

    #[test]
    fn alpha_derivative_zero_when_clamped() {
        assert_eq!(alpha(0.0, 2.25, 1e-3).1, 0.0);
        assert_eq!(alpha(3.0, 2.25, 1e-3).1, 0.0);
        assert!(alpha(1.0, 2.25, 1e-3).1 < 0.0);
    }

    #[test]
    fn aggregate_rejects_width_mismatch() {
        let a = PointCloud::empty(3, 1.5);
        let b = PointCloud::empty(4, 1.5);
        assert!(matches!(aggregate_clouds(&[a.clone(), b]), Err(FwdError::Shape(_))));
        assert!(matches!(aggregate_clouds(&[]), Err(FwdError::EmptyInput(_))));
        assert_eq!(aggregate_clouds(std::slice::from_ref(&a)).unwrap(), a);
    }
}
