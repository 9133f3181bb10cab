//! All-pairs rasterizer used as a correctness oracle for the tiled path.

use super::raster::{candidate, flatten};
use super::{select_nearest, RenderedView, SplatConfig};
use crate::error::Result;
use crate::geometry::{project_to_target, Intrinsics, PointCloud, Pose};

/// Tests every (pixel, point) pair, sorts and composites.
pub fn rasterize_brute_force(
    cloud: &PointCloud,
    intr: &Intrinsics,
    pose_t: &Pose,
    cfg: &SplatConfig,
) -> Result<RenderedView> {
    cfg.validate(intr)?;
    let proj = project_to_target(&cloud.positions, intr, pose_t);
    let r2 = cfg.radius_px * cfg.radius_px;
    let mut per_pixel = Vec::with_capacity(intr.num_pixels());
    for y in 0..intr.height {
        for x in 0..intr.width {
            let mut cands: Vec<_> = (0..cloud.len())
                .filter(|&i| proj.in_frustum[i])
                .filter_map(|i| candidate(&proj, i, x, y, r2, cfg.alpha_min_clamp))
                .collect();
            select_nearest(&mut cands, cfg.k_blend);
            per_pixel.push(cands);
        }
    }
    let (offsets, hits) = flatten(per_pixel);
    Ok(RenderedView::from_hits(intr.height, intr.width, cloud, cfg, offsets, hits))
}
