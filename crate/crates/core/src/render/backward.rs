use fwd_tensor::{Real, Tensor};
use nalgebra::Vector3;

use super::{alpha, DepthMode, RenderedView, SplatConfig};
use crate::error::{FwdError, Result};
use crate::geometry::{project_to_target, Intrinsics, PointCloud, Pose};

#[derive(Clone, Debug, PartialEq)]
pub struct CloudGradients {
    /// `[P, C]`.
    pub features: Tensor,
    /// `[P, 3]`, world frame.
    pub positions: Tensor,
}

/// Gradients of a loss with respect to point features and world positions,
/// given the upstream gradients `d_features` (`[H, W, C]`) and `d_depth`
/// (`[H, W]`).
///
/// Points truncated by `k_blend` receive nothing. Pixels are visited in
/// row-major order, which fixes the summation order.
pub fn rasterize_backward(
    view: &RenderedView,
    d_features: &Tensor,
    d_depth: &Tensor,
    cloud: &PointCloud,
    intr: &Intrinsics,
    pose_t: &Pose,
    cfg: &SplatConfig,
) -> Result<CloudGradients> {
    if d_features.shape() != view.features.shape() || d_depth.shape() != view.depth.shape() {
        return Err(FwdError::shape(format!(
            "upstream gradients {:?}/{:?} for a view of {:?}",
            d_features.shape(),
            d_depth.shape(),
            view.features.shape()
        )));
    }
    if cloud.feature_dim() != view.features.shape()[2] {
        return Err(FwdError::shape("cloud feature width differs from the rendered view"));
    }
    let (gf, gp) = backward_raw(view, d_features.data(), d_depth.data(), cloud, intr, pose_t, cfg, true);
    let n = cloud.len();
    Ok(CloudGradients {
        features: Tensor::new([n, cloud.feature_dim()], gf)?,
        positions: Tensor::new([n, 3], gp.expect("requested"))?,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_raw(
    view: &RenderedView,
    gf_out: &[Real],
    gd_out: &[Real],
    cloud: &PointCloud,
    intr: &Intrinsics,
    pose_t: &Pose,
    cfg: &SplatConfig,
    want_positions: bool,
) -> (Vec<Real>, Option<Vec<Real>>) {
    let n = cloud.len();
    let c = cloud.feature_dim();
    let feats = cloud.features.data();
    let r2 = cfg.radius_px * cfg.radius_px;
    let mut g_feat = vec![0.0; n * c];
    // dL/ds and dL/dz per point, before the projection chain rule
    let mut g_xy = vec![[0.0; 2]; if want_positions { n } else { 0 }];
    let mut g_z = vec![0.0; if want_positions { n } else { 0 }];
    let proj = want_positions.then(|| project_to_target(&cloud.positions, intr, pose_t));

    let mut trans = Vec::new();
    let mut dots = Vec::new();
    for pix in 0..view.coverage.len() {
        let hits = view.hits(pix);
        if hits.is_empty() {
            continue;
        }
        let (x, y) = ((pix % intr.width) as Real, (pix / intr.width) as Real);
        let gout = &gf_out[pix * c..(pix + 1) * c];
        let gd = gd_out[pix];

        // Tᵢ and cᵢ = ⟨Fᵢ, dL/dF_l⟩ (plus depth for transmittance mode)
        trans.clear();
        dots.clear();
        let mut t = 1.0;
        for h in hits {
            trans.push(t);
            let f = &feats[h.point as usize * c..(h.point as usize + 1) * c];
            let mut dot: Real = f.iter().zip(gout).map(|(a, b)| a * b).sum();
            if cfg.depth_mode == DepthMode::Transmittance {
                dot += gd * h.z;
            }
            dots.push(dot);
            t *= 1.0 - h.alpha;
        }

        // Rᵢ = Σⱼ>ᵢ αⱼ (Tⱼ/Tᵢ₊₁) cⱼ, walked back to front
        let mut suffix = 0.0;
        for (i, h) in hits.iter().enumerate().rev() {
            let p = h.point as usize;
            let w = h.alpha * trans[i];
            for (g, go) in g_feat[p * c..(p + 1) * c].iter_mut().zip(gout) {
                *g += w * go;
            }
            if want_positions {
                let mut g_alpha = trans[i] * (dots[i] - suffix);
                match cfg.depth_mode {
                    DepthMode::Verbatim => {
                        g_alpha += gd * h.z;
                        g_z[p] += gd * h.alpha;
                    }
                    DepthMode::Transmittance => g_z[p] += gd * w,
                }
                let (_, da_ds) = alpha(h.s, r2, cfg.alpha_min_clamp);
                let g_s = g_alpha * da_ds;
                if g_s != 0.0 {
                    let [px, py] = proj.as_ref().expect("projected").xy[p];
                    g_xy[p][0] += g_s * 2.0 * (px - x);
                    g_xy[p][1] += g_s * 2.0 * (py - y);
                }
            }
            suffix = h.alpha * dots[i] + (1.0 - h.alpha) * suffix;
        }
    }

    let g_pos = proj.map(|proj| {
        let mut out = vec![0.0; n * 3];
        let rt = pose_t.rotation.transpose();
        for p in 0..n {
            if !proj.in_frustum[p] {
                continue;
            }
            let (cx, cy, cz) = (proj.cam[p].x, proj.cam[p].y, proj.cam[p].z);
            let [gx, gy] = g_xy[p];
            let gc = Vector3::new(
                gx * intr.fx / cz,
                gy * intr.fy / cz,
                -(gx * intr.fx * cx + gy * intr.fy * cy) / (cz * cz) + g_z[p],
            );
            let gw = rt * gc;
            out[p * 3..p * 3 + 3].copy_from_slice(gw.as_slice());
        }
        out
    });
    (g_feat, g_pos)
}
