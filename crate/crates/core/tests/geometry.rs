use fwd_core::geometry::{
    camera_center, project_to_target, unproject, unproject_var, view_delta, view_delta_var, Intrinsics, Pose,
};
use fwd_tensor::{Real, Tape, Tensor};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let rot = Rotation3::from_scaled_axis(axis * rng.random_range(0.0..3.0));
    let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    Pose::new(*rot.matrix(), t).unwrap()
}

fn cam() -> Intrinsics {
    Intrinsics::new(80.0, 75.0, 31.5, 23.5, 64, 48).unwrap()
}

#[test]
fn unproject_project_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = cam();
    for _ in 0..5 {
        let pose = random_pose(&mut rng);
        let depth: Vec<Real> = (0..k.num_pixels()).map(|_| rng.random_range(0.5..4.0)).collect();
        let valid: Vec<bool> = (0..k.num_pixels()).map(|_| rng.random_bool(0.7)).collect();
        let pts = unproject(&depth, &k, &pose, &valid).unwrap();
        let proj = project_to_target(&pts, &k, &pose);
        let idx: Vec<usize> = (0..k.num_pixels()).filter(|&i| valid[i]).collect();
        assert_eq!(idx.len(), pts.shape()[0]);
        for (p, &pix) in idx.iter().enumerate() {
            let [x, y] = proj.xy[p];
            assert!((x - (pix % 64) as Real).abs() < 1e-9);
            assert!((y - (pix / 64) as Real).abs() < 1e-9);
            assert!((proj.z[p] - depth[pix]).abs() < 1e-9);
        }
    }
}

#[test]
fn rigid_transform_leaves_projections_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = cam();
    for _ in 0..20 {
        let pose = random_pose(&mut rng);
        let g = random_pose(&mut rng);
        let pts = Tensor::from_fn([50, 3], |_| rng.random_range(-3.0..3.0));
        let moved: Vec<Real> = (0..50)
            .flat_map(|i| {
                let p = Vector3::from_column_slice(&pts.data()[i * 3..i * 3 + 3]);
                let q = g.rotation * p + g.translation;
                [q.x, q.y, q.z]
            })
            .collect();
        let a = project_to_target(&pts, &k, &pose);
        let b = project_to_target(&Tensor::new([50, 3], moved).unwrap(), &k, &pose.after_world_transform(&g));
        for i in 0..50 {
            assert_eq!(a.in_frustum[i], b.in_frustum[i]);
            if a.in_frustum[i] {
                assert!((a.xy[i][0] - b.xy[i][0]).abs() < 1e-9 * (1.0 + a.xy[i][0].abs()));
                assert!((a.xy[i][1] - b.xy[i][1]).abs() < 1e-9 * (1.0 + a.xy[i][1].abs()));
            }
        }
    }
}

#[test]
fn camera_center_is_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let pose = random_pose(&mut rng);
        let c = camera_center(&pose);
        assert!((pose.rotation * c + pose.translation).norm() < 1e-12);
    }
}

#[test]
fn view_delta_dot_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let ci = p + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
        let ct = p + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..-0.1));
        let d = view_delta(&p, &ci, &ct).unwrap();
        assert!((-1.0..=1.0).contains(&d[3]));
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

fn fd_check(f: impl Fn(&Tape, fwd_tensor::Var<'_>) -> Real, grad: &[Real], x: &Tensor) {
    let h = 1e-5;
    for i in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let t = Tape::inference();
        let num = (f(&t, t.constant(p)) - f(&t, t.constant(m))) / (2.0 * h);
        let err = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6);
        assert!(err < 1e-6, "element {i}: numeric {num} analytic {}", grad[i]);
    }
}

#[test]
fn view_delta_var_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn([6, 3], |_| rng.random_range(-0.5..0.5));
    let w = Tensor::from_fn([6, 4], |_| rng.random_range(-1.0..1.0));
    let (ci, ct) = (Vector3::new(0.3, -0.2, -2.0), Vector3::new(-1.0, 0.4, -1.5));
    let f = |t: &Tape, v: fwd_tensor::Var<'_>| -> Real {
        let d = view_delta_var(v, ci, ct).unwrap();
        d.mul(t.constant(w.clone())).unwrap().sum().value().item()
    };
    let tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let d = view_delta_var(v, ci, ct).unwrap();
    let g = tape.backward(d.mul(tape.constant(w.clone())).unwrap().sum()).unwrap();
    fd_check(f, g.get(v).unwrap().data(), &x);
}

#[test]
fn unproject_var_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let k = Intrinsics::new(10.0, 12.0, 2.0, 1.5, 5, 4).unwrap();
    let pose = random_pose(&mut rng);
    let depth = Tensor::from_fn([4, 5], |_| rng.random_range(1.0..3.0));
    let valid: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
    let n = valid.iter().filter(|v| **v).count();
    let w = Tensor::from_fn([n, 3], |_| rng.random_range(-1.0..1.0));
    let f = |t: &Tape, v: fwd_tensor::Var<'_>| -> Real {
        let p = unproject_var(v, &k, &pose, &valid).unwrap();
        p.mul(t.constant(w.clone())).unwrap().sum().value().item()
    };
    let tape = Tape::new();
    let v = tape.leaf(depth.clone(), true);
    let p = unproject_var(v, &k, &pose, &valid).unwrap();
    let g = tape.backward(p.mul(tape.constant(w.clone())).unwrap().sum()).unwrap();
    let grad = g.get(v).unwrap().data().to_vec();
    for i in (0..20).filter(|i| !valid[*i]) {
        assert_eq!(grad[i], 0.0);
    }
    fd_check(f, &grad, &depth);
}

proptest! {
    #[test]
    fn look_at_is_orthonormal(ex in -5.0f64..5.0, ey in -5.0f64..5.0, ez in -5.0f64..-0.5) {
        let pose = Pose::look_at(Vector3::new(ex, ey, ez), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        let err = (pose.rotation.transpose() * pose.rotation - nalgebra::Matrix3::identity()).abs().max();
        prop_assert!(err < 1e-12);
        prop_assert!((pose.rotation.determinant() - 1.0).abs() < 1e-12);
        // the target lands on the principal point
        let c = pose.to_camera(&Vector3::zeros());
        prop_assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9 && c.z > 0.0);
    }
}
