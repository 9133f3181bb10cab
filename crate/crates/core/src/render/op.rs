use fwd_tensor::{Tensor, Var};

use super::backward::backward_raw;
use super::{rasterize, SplatConfig};
use crate::error::Result;
use crate::geometry::{Intrinsics, PointCloud, Pose};

/// Differentiable rendering result.
pub struct RenderOutput<'t> {
    /// `[H, W, C]`.
    pub features: Var<'t>,
    /// `[H, W]`.
    pub depth: Var<'t>,
    pub coverage: Vec<u32>,
}

impl RenderOutput<'_> {
    pub fn covered(&self) -> Vec<bool> {
        self.coverage.iter().map(|&c| c > 0).collect()
    }
}

/// Records rasterization on the tape. `positions` is `[P, 3]` in the world
/// frame, `features` is `[P, C]`. The splat radius comes from `cfg`.
pub fn render_var<'t>(
    positions: Var<'t>,
    features: Var<'t>,
    intr: &Intrinsics,
    pose_t: &Pose,
    cfg: &SplatConfig,
) -> Result<RenderOutput<'t>> {
    let radius_px = cfg.radius_px;
    let cloud = PointCloud::new((*positions.value()).clone(), (*features.value()).clone(), radius_px)?;
    let cfg = *cfg;
    let view = rasterize(&cloud, intr, pose_t, &cfg)?;
    let (h, w, c) = (intr.height, intr.width, cloud.feature_dim());
    let mut packed = Vec::with_capacity(h * w * (c + 1));
    let (f, d) = (view.features.data(), view.depth.data());
    for pix in 0..h * w {
        packed.extend_from_slice(&f[pix * c..(pix + 1) * c]);
        packed.push(d[pix]);
    }
    let coverage = view.coverage.clone();
    let (intr, pose_t) = (*intr, *pose_t);
    let out = positions.tape().op(
        &[positions, features],
        Tensor::new([h, w, c + 1], packed)?,
        move |args| {
            let g = args.grad.data();
            let mut gf = Vec::with_capacity(h * w * c);
            let mut gd = Vec::with_capacity(h * w);
            for pix in 0..h * w {
                gf.extend_from_slice(&g[pix * (c + 1)..pix * (c + 1) + c]);
                gd.push(g[pix * (c + 1) + c]);
            }
            let cloud = PointCloud {
                positions: (*args.inputs[0]).clone(),
                features: (*args.inputs[1]).clone(),
                radius_px,
            };
            let (g_feat, g_pos) = backward_raw(&view, &gf, &gd, &cloud, &intr, &pose_t, &cfg, args.needs[0]);
            let n = cloud.len();
            vec![
                g_pos.map(|g| Tensor::new([n, 3], g).expect("shape")),
                args.needs[1].then(|| Tensor::new([n, c], g_feat).expect("shape")),
            ]
        },
    );
    let features = out.narrow(2, 0, c)?;
    let depth = out.narrow(2, c, 1)?.reshape([h, w])?;
    Ok(RenderOutput {
        features,
        depth,
        coverage,
    })
}
