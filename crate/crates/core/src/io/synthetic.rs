//! Analytically ray-cast scenes with exact per-pixel depth.
//!
//! Cameras sit on a horizontal arc around the scene center, all looking at
//! it. With an odd number of views the middle camera is the identity pose.
//! World `+y` points down so that image rows follow world `y`.

use fwd_tensor::{Real, Tensor};
use nalgebra::{Matrix3, Rotation3, Vector3};
use noise::{NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scene::{SceneBundle, View};
use crate::error::{FwdError, Result};
use crate::geometry::{camera_center, Intrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticGeometry {
    /// Infinite plane at `z = 2`.
    Plane,
    /// Tilted cube (side 0.9) centered at `z = 2.5`, empty background.
    Cube,
    /// Rectangle at `z = 2` in front of an infinite plane at `z = 3`.
    TwoPlanes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Checker,
    Perlin,
}

/// Sensor-like corruption of the depth maps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthDegradation {
    /// Probability of dropping each valid pixel.
    pub drop_fraction: Real,
    /// Gaussian noise standard deviation as a fraction of depth.
    pub noise_rel: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub geometry: SyntheticGeometry,
    pub texture: Texture,
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub hfov_deg: Real,
    /// Total horizontal arc spanned by the cameras.
    pub arc_deg: Real,
    pub degrade: Option<DepthDegradation>,
}

impl SyntheticSpec {
    pub fn new(geometry: SyntheticGeometry, texture: Texture, n_views: usize, width: usize, height: usize) -> Self {
        Self {
            geometry,
            texture,
            n_views,
            width,
            height,
            seed: 0,
            hfov_deg: 60.0,
            arc_deg: 24.0,
            degrade: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_degradation(mut self, d: DepthDegradation) -> Self {
        self.degrade = Some(d);
        self
    }

    pub fn with_arc(mut self, arc_deg: Real) -> Self {
        self.arc_deg = arc_deg;
        self
    }
}

const CUBE_HALF: Real = 0.45;

struct Surface {
    center: Vector3<Real>,
    cube_rot: Matrix3<Real>,
    perlin: Perlin,
}

struct Hit {
    t: Real,
    point: Vector3<Real>,
    /// Per-surface brightness so faces and planes stay distinguishable.
    shade: Real,
}

impl Surface {
    fn new(spec: &SyntheticSpec) -> Self {
        let center = match spec.geometry {
            SyntheticGeometry::Plane => Vector3::new(0.0, 0.0, 2.0),
            SyntheticGeometry::Cube | SyntheticGeometry::TwoPlanes => Vector3::new(0.0, 0.0, 2.5),
        };
        let cube_rot = (Rotation3::from_axis_angle(&Vector3::y_axis(), 0.6)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), -0.35))
        .into_inner();
        Self {
            center,
            cube_rot,
            perlin: Perlin::new(spec.seed as u32),
        }
    }

    fn intersect(&self, geometry: SyntheticGeometry, o: &Vector3<Real>, d: &Vector3<Real>) -> Option<Hit> {
        let plane = |z: Real, shade: Real| -> Option<Hit> {
            (d.z.abs() > 1e-12).then(|| (z - o.z) / d.z).filter(|&t| t > 0.0).map(|t| Hit {
                t,
                point: o + d * t,
                shade,
            })
        };
        match geometry {
            SyntheticGeometry::Plane => plane(2.0, 1.0),
            SyntheticGeometry::TwoPlanes => {
                let front = plane(2.0, 1.0).filter(|h| (-0.7..=0.2).contains(&h.point.x) && (-0.45..=0.5).contains(&h.point.y));
                front.or_else(|| plane(3.0, 0.75))
            }
            SyntheticGeometry::Cube => {
                // slab test in the cube frame
                let lo = self.cube_rot.transpose() * (o - self.center);
                let ld = self.cube_rot.transpose() * d;
                let (mut t0, mut t1, mut axis) = (Real::NEG_INFINITY, Real::INFINITY, 0);
                for k in 0..3 {
                    if ld[k].abs() < 1e-15 {
                        if lo[k].abs() > CUBE_HALF {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((-CUBE_HALF - lo[k]) / ld[k], (CUBE_HALF - lo[k]) / ld[k]);
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > t0 {
                        t0 = near;
                        axis = k;
                    }
                    t1 = t1.min(far);
                }
                (t0 <= t1 && t0 > 0.0).then(|| Hit {
                    t: t0,
                    point: lo + ld * t0,
                    shade: [1.0, 0.8, 0.62][axis],
                })
            }
        }
    }

    fn color(&self, texture: Texture, p: &Vector3<Real>, shade: Real) -> [Real; 3] {
        let base = match texture {
            Texture::Checker => {
                let s = 4.0;
                let parity = ((p.x * s).floor() + (p.y * s).floor() + (p.z * s).floor()) as i64 & 1;
                if parity == 0 {
                    [0.85, 0.78, 0.35]
                } else {
                    [0.15, 0.3, 0.6]
                }
            }
            Texture::Perlin => {
                let f = 2.5;
                let mut c = [0.0; 3];
                for (k, ck) in c.iter_mut().enumerate() {
                    let off = 17.3 * k as f64;
                    let n = self.perlin.get([p.x as f64 * f + off, p.y as f64 * f - off, p.z as f64 * f]);
                    *ck = (0.5 + 0.9 * n as Real).clamp(0.02, 0.98);
                }
                c
            }
        };
        base.map(|v| v * shade)
    }
}

/// Camera poses on the arc, left to right.
pub fn arc_poses(spec: &SyntheticSpec) -> Result<Vec<Pose>> {
    let center = Surface::new(spec).center;
    let dist = center.z;
    let n = spec.n_views;
    (0..n)
        .map(|i| {
            let frac = if n == 1 { 0.0 } else { i as Real / (n - 1) as Real - 0.5 };
            let theta = (frac * spec.arc_deg).to_radians();
            let eye = center + Rotation3::from_axis_angle(&Vector3::y_axis(), theta) * Vector3::new(0.0, 0.0, -dist);
            Pose::look_at(eye, center, Vector3::new(0.0, 1.0, 0.0))
        })
        .collect()
}

pub fn synthetic_intrinsics(spec: &SyntheticSpec) -> Intrinsics {
    Intrinsics::from_fov(spec.width, spec.height, spec.hfov_deg)
}

/// Renders the scene from an arbitrary pose: `([H, W, 3] image, [H, W]
/// exact depth)`, depth 0 where the ray misses.
pub fn render_exact(spec: &SyntheticSpec, pose: &Pose) -> (Tensor, Tensor) {
    let surf = Surface::new(spec);
    let k = synthetic_intrinsics(spec);
    let origin = camera_center(pose);
    let rt = pose.rotation.transpose();
    let (w, h) = (spec.width, spec.height);
    let mut img = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            // unit camera-z ray, so the hit parameter is the camera depth
            let dir = rt * k.ray(x as Real, y as Real);
            if let Some(hit) = surf.intersect(spec.geometry, &origin, &dir) {
                let pix = y * w + x;
                depth[pix] = hit.t;
                img[pix * 3..pix * 3 + 3].copy_from_slice(&surf.color(spec.texture, &hit.point, hit.shade));
            }
        }
    }
    (Tensor::new([h, w, 3], img).expect("shape"), Tensor::new([h, w], depth).expect("shape"))
}

/// Generates posed views with exact (or degraded) depth. Bit-identical for
/// identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SceneBundle> {
    if spec.n_views == 0 {
        return Err(FwdError::EmptyInput("synthetic scene with zero views".into()));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(FwdError::shape("synthetic resolution must be positive"));
    }
    let intr = synthetic_intrinsics(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let views = arc_poses(spec)?
        .into_iter()
        .map(|pose| {
            let (image, mut depth) = render_exact(spec, &pose);
            if let Some(deg) = spec.degrade {
                for d in depth.data_mut().iter_mut().filter(|d| **d > 0.0) {
                    if rng.random::<Real>() < deg.drop_fraction {
                        *d = 0.0;
                    } else if deg.noise_rel > 0.0 {
                        let n: Real = StandardNormal.sample(&mut rng);
                        *d = (*d * (1.0 + deg.noise_rel * n)).max(1e-3);
                    }
                }
            }
            let mask = depth.data().iter().map(|&d| d > 0.0).collect();
            View {
                image,
                depth: Some(depth),
                mask: Some(mask),
                intrinsics: intr,
                pose,
            }
        })
        .collect();
    let geometry = serde_json::to_value(spec.geometry).expect("enum serializes");
    let texture = serde_json::to_value(spec.texture).expect("enum serializes");
    Ok(SceneBundle {
        name: format!(
            "{}-{}-{}",
            geometry.as_str().unwrap_or("scene"),
            texture.as_str().unwrap_or(""),
            spec.seed
        ),
        views,
    })
}
