//! Splat renderer against an independent all-pairs oracle and finite
//! differences.

use fwd_core::geometry::{Intrinsics, PointCloud, Pose};
use fwd_core::render::{
    aggregate_clouds, rasterize, rasterize_backward, reference::rasterize_brute_force, render_var, DepthMode,
    SplatConfig,
};
use fwd_tensor::{Real, Tape, Tensor};
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Scene {
    cloud: PointCloud,
    intr: Intrinsics,
    pose: Pose,
}

fn random_scene(rng: &mut ChaCha8Rng, w: usize, h: usize, n: usize, c: usize) -> Scene {
    let intr = Intrinsics::new(0.9 * w as Real, 0.9 * w as Real, w as Real / 2.0, h as Real / 2.0, w, h).unwrap();
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
    let rot = Rotation3::from_scaled_axis(axis.normalize() * rng.random_range(0.0..0.2));
    let pose = Pose::new(*rot.matrix(), Vector3::new(0.0, 0.0, 0.5)).unwrap();
    let mut pos = Vec::with_capacity(n * 3);
    for _ in 0..n {
        pos.extend_from_slice(&[
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.7..2.5),
        ]);
    }
    let feats: Vec<Real> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cloud = PointCloud::new(Tensor::new([n, 3], pos).unwrap(), Tensor::new([n, c], feats).unwrap(), 1.5).unwrap();
    Scene { cloud, intr, pose }
}

/// Independent per-pixel compositing: project, test every point, sort,
/// blend.
fn oracle(scene: &Scene, cfg: &SplatConfig) -> (Vec<Real>, Vec<Real>, Vec<u32>) {
    let Scene { cloud, intr, pose } = scene;
    let c = cloud.feature_dim();
    let r = cfg.radius_px;
    let projected: Vec<Option<(Real, Real, Real)>> = (0..cloud.len())
        .map(|i| {
            let p = pose.rotation * cloud.position(i) + pose.translation;
            (p.z > 1e-4).then(|| (intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy, p.z))
        })
        .collect();
    let mut feat = vec![0.0; intr.num_pixels() * c];
    let mut depth = vec![0.0; intr.num_pixels()];
    let mut cov = vec![0; intr.num_pixels()];
    for y in 0..intr.height {
        for x in 0..intr.width {
            let mut list: Vec<(Real, usize, Real)> = Vec::new();
            for (i, p) in projected.iter().enumerate() {
                let Some((u, v, z)) = *p else { continue };
                let s = (x as Real - u).powi(2) + (y as Real - v).powi(2);
                if s < r * r {
                    let a = 1.0 - (s / (r * r)).sqrt().clamp(cfg.alpha_min_clamp, 1.0);
                    list.push((z, i, a));
                }
            }
            list.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            list.truncate(cfg.k_blend);
            let pix = y * intr.width + x;
            cov[pix] = list.len() as u32;
            let mut t = 1.0;
            for &(z, i, a) in &list {
                for k in 0..c {
                    feat[pix * c + k] += a * t * cloud.features.data()[i * c + k];
                }
                depth[pix] += match cfg.depth_mode {
                    DepthMode::Verbatim => a * z,
                    DepthMode::Transmittance => a * t * z,
                };
                t *= 1.0 - a;
            }
        }
    }
    (feat, depth, cov)
}

fn max_diff(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

#[test]
fn tiled_matches_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..40 {
        let (w, h) = (rng.random_range(4..=64), rng.random_range(4..=64));
        let n = rng.random_range(0..=500);
        let k = [1, 4, 16][trial % 3];
        let scene = random_scene(&mut rng, w, h, n, 3);
        let mode = if trial % 2 == 0 { DepthMode::Verbatim } else { DepthMode::Transmittance };
        let cfg = SplatConfig::for_intrinsics(&scene.intr).with_k(k).with_depth_mode(mode);
        let view = rasterize(&scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
        let (f, d, cov) = oracle(&scene, &cfg);
        assert!(max_diff(view.features.data(), &f) <= 1e-12, "trial {trial}");
        assert!(max_diff(view.depth.data(), &d) <= 1e-12, "trial {trial}");
        assert_eq!(view.coverage, cov);
        let brute = rasterize_brute_force(&scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
        assert_eq!(view, brute);
    }
}

#[test]
fn hits_sorted_and_alpha_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = random_scene(&mut rng, 32, 24, 300, 2);
    let cfg = SplatConfig::for_intrinsics(&scene.intr).with_k(4);
    let view = rasterize(&scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
    for pix in 0..32 * 24 {
        let hits = view.hits(pix);
        assert_eq!(hits.len() as u32, view.coverage[pix]);
        assert!(hits.len() <= 4);
        assert!(hits.windows(2).all(|p| (p[0].z, p[0].point) < (p[1].z, p[1].point)));
        assert!(hits.iter().all(|h| (0.0..=0.999).contains(&h.alpha)));
    }
}

fn loss_weights(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn([n], |_| rng.random_range(-1.0..1.0))
}

fn scalar_loss(scene: &Scene, cfg: &SplatConfig, wf: &Tensor, wd: &Tensor) -> Real {
    let v = rasterize(&scene.cloud, &scene.intr, &scene.pose, cfg).unwrap();
    let f: Real = v.features.data().iter().zip(wf.data()).map(|(a, b)| a * b).sum();
    let d: Real = v.depth.data().iter().zip(wd.data()).map(|(a, b)| a * b).sum();
    f + d
}

/// Pixel hit lists as (point, pixel) pairs; a finite-difference step that
/// changes this set crosses a radius, clamp or top-K boundary.
fn hit_signature(scene: &Scene, cfg: &SplatConfig) -> Vec<(usize, u32, bool)> {
    let v = rasterize(&scene.cloud, &scene.intr, &scene.pose, cfg).unwrap();
    let r2 = cfg.radius_px * cfg.radius_px;
    let mut sig = Vec::new();
    for pix in 0..scene.intr.num_pixels() {
        for h in v.hits(pix) {
            sig.push((pix, h.point, (h.s / r2).sqrt() <= cfg.alpha_min_clamp));
        }
    }
    sig
}

fn gradient_check(seed: u64, mode: DepthMode) -> (Real, usize, usize) {
    const H: Real = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = random_scene(&mut rng, 16, 16, 20, 3);
    let cfg = SplatConfig::for_intrinsics(&scene.intr).with_k(4).with_depth_mode(mode);
    let wf = loss_weights(&mut rng, 16 * 16 * 3).reshape([16, 16, 3]).unwrap();
    let wd = loss_weights(&mut rng, 256).reshape([16, 16]).unwrap();
    let view = rasterize(&scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
    let g = rasterize_backward(&view, &wf, &wd, &scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
    let base_sig = hit_signature(&scene, &cfg);
    let saturated: Vec<bool> = (0..scene.cloud.len())
        .map(|p| base_sig.iter().any(|&(_, q, sat)| q as usize == p && sat))
        .collect();

    let mut worst: Real = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for p in 0..scene.cloud.len() {
        for k in 0..3 {
            let idx = p * 3 + k;
            let orig = scene.cloud.positions.data()[idx];
            scene.cloud.positions.data_mut()[idx] = orig + H;
            let (lp, sp) = (scalar_loss(&scene, &cfg, &wf, &wd), hit_signature(&scene, &cfg));
            scene.cloud.positions.data_mut()[idx] = orig - H;
            let (lm, sm) = (scalar_loss(&scene, &cfg, &wf, &wd), hit_signature(&scene, &cfg));
            scene.cloud.positions.data_mut()[idx] = orig;
            if saturated[p] || sp != base_sig || sm != base_sig {
                skipped += 1;
                continue;
            }
            let num = (lp - lm) / (2.0 * H);
            let ana = g.positions.data()[idx];
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            checked += 1;
        }
        for k in 0..3 {
            let idx = p * 3 + k;
            let orig = scene.cloud.features.data()[idx];
            scene.cloud.features.data_mut()[idx] = orig + H;
            let lp = scalar_loss(&scene, &cfg, &wf, &wd);
            scene.cloud.features.data_mut()[idx] = orig - H;
            let lm = scalar_loss(&scene, &cfg, &wf, &wd);
            scene.cloud.features.data_mut()[idx] = orig;
            let num = (lp - lm) / (2.0 * H);
            let ana = g.features.data()[idx];
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            checked += 1;
        }
    }
    (worst, checked, skipped)
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..6 {
        for mode in [DepthMode::Verbatim, DepthMode::Transmittance] {
            let (err, checked, skipped) = gradient_check(seed, mode);
            assert!(err < 1e-4, "seed {seed} {mode:?}: rel err {err:e}");
            assert!(checked > skipped, "seed {seed}: only {checked} checked");
        }
    }
}

#[test]
fn single_point_feature_gradient_is_alpha() {
    let intr = Intrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
    let cloud = PointCloud::new(Tensor::from_slice(&[0.0, 0.0, 2.0]).reshape([1, 3]).unwrap(), Tensor::ones([1, 1]), 1.5)
        .unwrap();
    // a radius below one pixel leaves a single covered pixel
    let cfg = SplatConfig::for_intrinsics(&intr).with_radius(0.9);
    let view = rasterize(&cloud, &intr, &Pose::identity(), &cfg).unwrap();
    assert_eq!(view.coverage.iter().sum::<u32>(), 1);
    let g = rasterize_backward(&view, &Tensor::ones([8, 8, 1]), &Tensor::zeros([8, 8]), &cloud, &intr, &Pose::identity(), &cfg)
        .unwrap();
    assert_eq!(g.features.data(), &[0.999]);
    // α is clamp-saturated at the pixel center
    assert_eq!(g.positions.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn tape_op_matches_direct_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scene = random_scene(&mut rng, 16, 12, 40, 2);
    let cfg = SplatConfig::for_intrinsics(&scene.intr);
    let wf = Tensor::from_fn([12, 16, 2], |i| (i % 7) as Real - 3.0);
    let wd = Tensor::from_fn([12, 16], |i| (i % 5) as Real * 0.1);
    let tape = Tape::new();
    let pos = tape.leaf(scene.cloud.positions.clone(), true);
    let feat = tape.leaf(scene.cloud.features.clone(), true);
    let out = render_var(pos, feat, &scene.intr, &scene.pose, &cfg).unwrap();
    let loss = out
        .features
        .mul(tape.constant(wf.clone()))
        .unwrap()
        .sum()
        .add(out.depth.mul(tape.constant(wd.clone())).unwrap().sum())
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    let view = rasterize(&scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
    let direct = rasterize_backward(&view, &wf, &wd, &scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
    assert_eq!(grads.get(pos).unwrap(), &direct.positions);
    assert_eq!(grads.get(feat).unwrap(), &direct.features);
    assert_eq!(out.features.value().data(), view.features.data());
}

#[test]
fn aggregate_renders_like_union() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_scene(&mut rng, 20, 20, 50, 2);
    let b = random_scene(&mut rng, 20, 20, 30, 2);
    let agg = aggregate_clouds(&[a.cloud.clone(), b.cloud.clone(), PointCloud::empty(2, 1.5)]).unwrap();
    assert_eq!(agg.len(), 80);
    let union = Scene { cloud: agg, intr: a.intr, pose: a.pose };
    let cfg = SplatConfig::for_intrinsics(&a.intr);
    let view = rasterize(&union.cloud, &union.intr, &union.pose, &cfg).unwrap();
    let (f, _, _) = oracle(&union, &cfg);
    assert!(max_diff(view.features.data(), &f) <= 1e-12);
    let with_empty = aggregate_clouds(&[a.cloud.clone(), PointCloud::empty(2, 1.5)]).unwrap();
    assert_eq!(with_empty, a.cloud);
}

#[test]
fn fully_culled_points_render_nothing() {
    let intr = Intrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
    let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -10.0)).unwrap();
    let cloud = PointCloud::new(Tensor::from_slice(&[0.0, 0.0, 2.0]).reshape([1, 3]).unwrap(), Tensor::ones([1, 1]), 1.5)
        .unwrap();
    let view = rasterize(&cloud, &intr, &pose, &SplatConfig::for_intrinsics(&intr)).unwrap();
    assert_eq!(view.total_hits(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constant_features_bounded(seed in 0u64..1000, c in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scene = random_scene(&mut rng, 24, 24, 120, 1);
        scene.cloud.features.fill(c as Real);
        let cfg = SplatConfig::for_intrinsics(&scene.intr);
        let view = rasterize(&scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
        for pix in 0..24 * 24 {
            let opacity = 1.0 - view.hits(pix).iter().map(|h| 1.0 - h.alpha).product::<Real>();
            let f = view.features.data()[pix];
            prop_assert!((f - c as Real * opacity).abs() <= 1e-12);
            prop_assert!(f.abs() <= (c as Real).abs() + 1e-12);
        }
    }

    #[test]
    fn nearer_opaque_point_attenuates(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 16, 16, 60, 1);
        let mut cloud = scene.cloud.clone();
        cloud.features.fill(1.0);
        let cfg = SplatConfig::for_intrinsics(&scene.intr).with_k(64);
        let before = rasterize(&cloud, &scene.intr, &scene.pose, &cfg).unwrap();
        // a point exactly on pixel (8, 8), nearer than everything else
        let target = Vector3::new(8.0, 8.0, 1.0);
        let cam = Vector3::new((target.x - scene.intr.cx) / scene.intr.fx * 0.5, (target.y - scene.intr.cy) / scene.intr.fy * 0.5, 0.5);
        let world = scene.pose.to_world(&cam);
        let mut pos = cloud.positions.data().to_vec();
        pos.extend_from_slice(world.as_slice());
        let mut feats = cloud.features.data().to_vec();
        feats.push(0.0);
        let n = cloud.len() + 1;
        let occluded = PointCloud::new(Tensor::new([n, 3], pos).unwrap(), Tensor::new([n, 1], feats).unwrap(), 1.5).unwrap();
        let after = rasterize(&occluded, &scene.intr, &scene.pose, &cfg).unwrap();
        let pix = 8 * 16 + 8;
        let front = after.hits(pix)[0];
        prop_assert_eq!(front.point as usize, n - 1);
        prop_assert!(after.features.data()[pix] <= before.features.data()[pix] * (1.0 - front.alpha) + 1e-12);
    }

    #[test]
    fn repeated_runs_bit_identical(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = random_scene(&mut rng, 40, 30, 200, 4);
        let cfg = SplatConfig::for_intrinsics(&scene.intr);
        let a = rasterize(&scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
        let b = rasterize(&scene.cloud, &scene.intr, &scene.pose, &cfg).unwrap();
        prop_assert!(a.features.data().iter().zip(b.features.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(a, b);
    }
}
