//! Pinhole cameras, rigid poses, depth unprojection and target-view
//! projection.
//!
//! Poses are stored camera-from-world: `X_cam = R · X_world + T`. Camera
//! axes follow the usual computer-vision layout (x right, y down, z
//! forward) and pixel `(u, v)` has its center at integer coordinates, so
//! the principal ray passes through `(cx, cy)`.

use fwd_tensor::{Real, Tensor, Var};
use nalgebra::{Matrix3, Vector3};

use crate::error::{FwdError, Result};

/// Points with camera-space depth at or below this are culled.
pub const Z_NEAR: Real = 1e-4;

/// Tolerance used when validating rotation matrices.
pub const ORTHONORMAL_TOL: Real = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: Real, fy: Real, cx: Real, cy: Real, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square-pixel camera with the given horizontal field of view and the
    /// principal point at the image center.
    pub fn from_fov(width: usize, height: usize, hfov_deg: Real) -> Self {
        let fx = 0.5 * width as Real / (0.5 * hfov_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * (width as Real - 1.0),
            cy: 0.5 * (height as Real - 1.0),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as Real
            && self.cy >= 0.0
            && self.cy < self.height as Real;
        if ok {
            Ok(())
        } else {
            Err(FwdError::Domain(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Camera-space point to pixel coordinates. Caller guarantees `z > 0`.
    pub fn project(&self, p: &Vector3<Real>) -> (Real, Real) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-space direction `(x/z, y/z, 1)` through pixel `(u, v)`.
    pub fn ray(&self, u: Real, v: Real) -> Vector3<Real> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid camera-from-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<Real>,
    pub translation: Vector3<Real>,
}

impl Pose {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<Real>, translation: Vector3<Real>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(err <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(FwdError::Domain(format!(
                "rotation not orthonormal (|RᵀR − I| = {err:.3e}, det = {det:.6})"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(FwdError::Domain("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_row_major(r: &[Real; 9], t: &[Real; 3]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(r), Vector3::from_column_slice(t))
    }

    pub fn rotation_row_major(&self) -> [Real; 9] {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = self.rotation[(i, j)];
            }
        }
        out
    }

    pub fn translation_array(&self) -> [Real; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    /// Camera at `eye` looking at `target`; `down` is the world direction
    /// that should map to image-down.
    pub fn look_at(eye: Vector3<Real>, target: Vector3<Real>, down: Vector3<Real>) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| FwdError::Domain("look_at: eye equals target".into()))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| FwdError::Domain("look_at: view direction parallel to down".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            rotation,
            translation: -(rotation * eye),
        })
    }

    pub fn to_camera(&self, world: &Vector3<Real>) -> Vector3<Real> {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<Real>) -> Vector3<Real> {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Pose of the same camera after the world is moved by `g`
    /// (`X' = g.R · X + g.T`).
    pub fn after_world_transform(&self, g: &Pose) -> Pose {
        let r = self.rotation * g.rotation.transpose();
        Pose {
            rotation: r,
            translation: self.translation - r * g.translation,
        }
    }
}

/// Camera center in world coordinates, `−Rᵀ·T`.
pub fn camera_center(pose: &Pose) -> Vector3<Real> {
    -(pose.rotation.transpose() * pose.translation)
}

/// Points with features and a splat radius in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `[P, 3]` world-frame positions.
    pub positions: Tensor,
    /// `[P, C]` per-point features.
    pub features: Tensor,
    pub radius_px: Real,
}

impl PointCloud {
    pub fn new(positions: Tensor, features: Tensor, radius_px: Real) -> Result<Self> {
        let (ps, fs) = (positions.shape(), features.shape());
        if ps.len() != 2 || ps[1] != 3 || fs.len() != 2 || fs[0] != ps[0] {
            return Err(FwdError::shape(format!(
                "point cloud positions {ps:?} with features {fs:?}"
            )));
        }
        if !positions.is_finite() {
            return Err(FwdError::Domain("non-finite point position".into()));
        }
        Ok(Self {
            positions,
            features,
            radius_px,
        })
    }

    pub fn empty(feature_dim: usize, radius_px: Real) -> Self {
        Self {
            positions: Tensor::zeros([0, 3]),
            features: Tensor::zeros([0, feature_dim]),
            radius_px,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn position(&self, i: usize) -> Vector3<Real> {
        Vector3::from_column_slice(&self.positions.data()[i * 3..i * 3 + 3])
    }
}

fn check_map(len: usize, intr: &Intrinsics, what: &str) -> Result<()> {
    if len != intr.num_pixels() {
        return Err(FwdError::shape(format!(
            "{what} has {len} entries for a {}×{} camera",
            intr.height, intr.width
        )));
    }
    Ok(())
}

/// Indices (row-major) of pixels flagged valid.
pub fn valid_indices(valid: &[bool]) -> Vec<usize> {
    valid.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect()
}

/// One world point per valid pixel, in row-major pixel order.
pub fn unproject(depth: &[Real], intr: &Intrinsics, pose: &Pose, valid: &[bool]) -> Result<Tensor> {
    check_map(depth.len(), intr, "depth map")?;
    check_map(valid.len(), intr, "validity mask")?;
    let mut out = Vec::new();
    for idx in valid_indices(valid) {
        let d = depth[idx];
        if !(d > 0.0) {
            let (u, v) = (idx % intr.width, idx / intr.width);
            return Err(FwdError::Domain(format!("depth {d} at valid pixel ({u}, {v})")));
        }
        let (u, v) = ((idx % intr.width) as Real, (idx / intr.width) as Real);
        let w = pose.to_world(&(intr.ray(u, v) * d));
        out.extend_from_slice(&[w.x, w.y, w.z]);
    }
    let n = out.len() / 3;
    Ok(Tensor::new([n, 3], out)?)
}

/// Differentiable unprojection of a `[H, W]` (or `[H, W, 1]`) depth map.
pub fn unproject_var<'t>(depth: Var<'t>, intr: &Intrinsics, pose: &Pose, valid: &[bool]) -> Result<Var<'t>> {
    let d = depth.value();
    let positions = unproject(d.data(), intr, pose, valid)?;
    let idx = valid_indices(valid);
    let (intr, r) = (*intr, pose.rotation);
    let n_pix = d.numel();
    let shape = d.shape().to_vec();
    Ok(depth.tape().op(&[depth], positions, move |args| {
        let g = args.grad.data();
        let mut gd = vec![0.0; n_pix];
        for (p, &pix) in idx.iter().enumerate() {
            let gw = Vector3::new(g[p * 3], g[p * 3 + 1], g[p * 3 + 2]);
            let gc = r * gw;
            let ray = intr.ray((pix % intr.width) as Real, (pix / intr.width) as Real);
            gd[pix] = gc.dot(&ray);
        }
        vec![Some(Tensor::new(shape.clone(), gd).expect("shape"))]
    }))
}

/// Target-view projection of world points.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub xy: Vec<[Real; 2]>,
    /// Camera-space depth, kept for z-ordering.
    pub z: Vec<Real>,
    pub in_frustum: Vec<bool>,
    /// Camera-space coordinates.
    pub cam: Vec<Vector3<Real>>,
}

pub fn project_to_target(positions: &Tensor, intr: &Intrinsics, pose: &Pose) -> Projection {
    let n = positions.shape().first().copied().unwrap_or(0);
    let data = positions.data();
    let mut proj = Projection {
        xy: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        in_frustum: Vec::with_capacity(n),
        cam: Vec::with_capacity(n),
    };
    for i in 0..n {
        let w = Vector3::new(data[i * 3], data[i * 3 + 1], data[i * 3 + 2]);
        let c = pose.to_camera(&w);
        let ok = c.z > Z_NEAR && c.iter().all(|v| v.is_finite());
        let xy = if ok {
            let (x, y) = intr.project(&c);
            [x, y]
        } else {
            [Real::NAN, Real::NAN]
        };
        proj.xy.push(xy);
        proj.z.push(c.z);
        proj.in_frustum.push(ok);
        proj.cam.push(c);
    }
    proj
}

/// Relative view change of a point between an input and a target camera:
/// `[(v_i − v_t)/‖v_i − v_t‖, v_i · v_t]`, where `v_i`, `v_t` are unit
/// vectors from the point toward each camera center.
///
/// When the two directions coincide (‖v_i − v_t‖ < 1e-8) the direction part
/// is zero and the dot product is 1.
pub fn view_delta(point: &Vector3<Real>, center_i: &Vector3<Real>, center_t: &Vector3<Real>) -> Result<[Real; 4]> {
    Ok(view_delta_parts(point, center_i, center_t)?.0)
}

const DEGENERATE: Real = 1e-8;

struct DeltaParts {
    vi: Vector3<Real>,
    vt: Vector3<Real>,
    ri: Real,
    rt: Real,
    e: Vector3<Real>,
    n: Real,
}

fn view_delta_parts(
    point: &Vector3<Real>,
    center_i: &Vector3<Real>,
    center_t: &Vector3<Real>,
) -> Result<([Real; 4], DeltaParts)> {
    let (di, dt) = (center_i - point, center_t - point);
    let (ri, rt) = (di.norm(), dt.norm());
    if !(ri > 0.0) || !(rt > 0.0) {
        return Err(FwdError::Domain("point coincides with a camera center".into()));
    }
    let (vi, vt) = (di / ri, dt / rt);
    let d = vi - vt;
    let n = d.norm();
    let dot = vi.dot(&vt);
    let parts = |e: Vector3<Real>| DeltaParts { vi, vt, ri, rt, e, n };
    if n < DEGENERATE {
        return Ok(([0.0, 0.0, 0.0, 1.0], parts(Vector3::zeros())));
    }
    let e = d / n;
    Ok(([e.x, e.y, e.z, dot], parts(e)))
}

/// Differentiable [`view_delta`] over `[P, 3]` positions, giving `[P, 4]`.
pub fn view_delta_var<'t>(positions: Var<'t>, center_i: Vector3<Real>, center_t: Vector3<Real>) -> Result<Var<'t>> {
    let pos = positions.value();
    let &[n, 3] = pos.shape() else {
        return Err(FwdError::shape(format!("positions must be [P, 3], got {:?}", pos.shape())));
    };
    let mut out = Vec::with_capacity(n * 4);
    for i in 0..n {
        let p = Vector3::from_column_slice(&pos.data()[i * 3..i * 3 + 3]);
        out.extend_from_slice(&view_delta(&p, &center_i, &center_t)?);
    }
    let value = Tensor::new([n, 4], out)?;
    Ok(positions.tape().op(&[positions], value, move |args| {
        let (pos, g) = (args.inputs[0].data(), args.grad.data());
        let mut gp = vec![0.0; n * 3];
        for i in 0..n {
            let p = Vector3::from_column_slice(&pos[i * 3..i * 3 + 3]);
            let (_, k) = view_delta_parts(&p, &center_i, &center_t).expect("checked in forward");
            if k.n < DEGENERATE {
                continue;
            }
            let ge = Vector3::new(g[i * 4], g[i * 4 + 1], g[i * 4 + 2]);
            let gdot = g[i * 4 + 3];
            let gd = (ge - k.e * k.e.dot(&ge)) / k.n;
            let gvi = gd + k.vt * gdot;
            let gvt = -gd + k.vi * gdot;
            // v = (c − p)/‖c − p‖  ⇒  ∂v/∂p = −(I − v vᵀ)/‖c − p‖
            let gpi = -(gvi - k.vi * k.vi.dot(&gvi)) / k.ri;
            let gpt = -(gvt - k.vt * k.vt.dot(&gvt)) / k.rt;
            let total = gpi + gpt;
            gp[i * 3..i * 3 + 3].copy_from_slice(total.as_slice());
        }
        vec![Some(Tensor::new([n, 3], gp).expect("shape"))]
    }))
}
