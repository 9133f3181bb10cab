use fwd_tensor::Real;
use rayon::prelude::*;

use super::{alpha, select_nearest, Hit, RenderedView, SplatConfig};
use crate::error::Result;
use crate::geometry::{project_to_target, Intrinsics, PointCloud, Pose, Projection};

pub(crate) const TILE: usize = 16;

/// Splats `cloud` into the target camera using tiled binning.
pub fn rasterize(cloud: &PointCloud, intr: &Intrinsics, pose_t: &Pose, cfg: &SplatConfig) -> Result<RenderedView> {
    cfg.validate(intr)?;
    let proj = project_to_target(&cloud.positions, intr, pose_t);
    let (hit_offsets, hits) = tiled_hits(&proj, intr.width, intr.height, cfg);
    Ok(RenderedView::from_hits(intr.height, intr.width, cloud, cfg, hit_offsets, hits))
}

/// Inclusive pixel range that can lie within `r` of `c`, clipped to
/// `[0, n)`. Empty ranges come back with `lo > hi`.
fn pixel_span(c: Real, r: Real, n: usize) -> (i64, i64) {
    let lo = (c - r).floor().max(-1.0).min(n as Real);
    let hi = (c + r).ceil().max(-1.0).min(n as Real);
    (lo.max(0.0) as i64, (hi as i64).min(n as i64 - 1))
}

fn tiled_hits(proj: &Projection, width: usize, height: usize, cfg: &SplatConfig) -> (Vec<usize>, Vec<Hit>) {
    let r = cfg.radius_px;
    let r2 = r * r;
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (i, ok) in proj.in_frustum.iter().enumerate() {
        if !ok {
            continue;
        }
        let [px, py] = proj.xy[i];
        let (x0, x1) = pixel_span(px, r, width);
        let (y0, y1) = pixel_span(py, r, height);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in y0 as usize / TILE..=y1 as usize / TILE {
            for tx in x0 as usize / TILE..=x1 as usize / TILE {
                bins[ty * tiles_x + tx].push(i as u32);
            }
        }
    }

    // Each tile emits its pixels' hits in row-major order within the tile;
    // they are stitched into image order afterwards.
    let per_tile: Vec<Vec<(usize, Vec<Hit>)>> = bins
        .par_iter()
        .enumerate()
        .map(|(t, bin)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut out = Vec::new();
            if bin.is_empty() {
                return out;
            }
            let mut cands = Vec::new();
            for y in ty * TILE..((ty + 1) * TILE).min(height) {
                for x in tx * TILE..((tx + 1) * TILE).min(width) {
                    cands.clear();
                    for &i in bin {
                        if let Some(h) = candidate(proj, i as usize, x, y, r2, cfg.alpha_min_clamp) {
                            cands.push(h);
                        }
                    }
                    if !cands.is_empty() {
                        select_nearest(&mut cands, cfg.k_blend);
                        out.push((y * width + x, cands.clone()));
                    }
                }
            }
            out
        })
        .collect();

    let mut per_pixel: Vec<Vec<Hit>> = vec![Vec::new(); width * height];
    for tile in per_tile {
        for (pix, hs) in tile {
            per_pixel[pix] = hs;
        }
    }
    flatten(per_pixel)
}

pub(crate) fn flatten(per_pixel: Vec<Vec<Hit>>) -> (Vec<usize>, Vec<Hit>) {
    let mut offsets = Vec::with_capacity(per_pixel.len() + 1);
    let mut hits = Vec::new();
    offsets.push(0);
    for hs in per_pixel {
        hits.extend(hs);
        offsets.push(hits.len());
    }
    (offsets, hits)
}

/// The single inclusion predicate shared by the tiled and brute-force paths.
#[inline]
pub(crate) fn candidate(proj: &Projection, i: usize, x: usize, y: usize, r2: Real, min_clamp: Real) -> Option<Hit> {
    let [px, py] = proj.xy[i];
    let (dx, dy) = (x as Real - px, y as Real - py);
    let s = dx * dx + dy * dy;
    if s < r2 {
        Some(Hit {
            point: i as u32,
            alpha: alpha(s, r2, min_clamp).0,
            z: proj.z[i],
            s,
        })
    } else {
        None
    }
}
