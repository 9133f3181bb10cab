//! Model assembly, loss arithmetic, training state and checkpoints.

use fwd_core::io::{generate_synthetic, Checkpoint, SceneBundle, SyntheticGeometry, SyntheticSpec, Texture};
use fwd_core::nn::{DepthConfig, DepthNet};
use fwd_core::pipeline::{
    loss, loss_var, ContentLoss, DepthTarget, EvalConfig, EvalTarget, FwdModel, LossConfig, ModelConfig, ModelVariant,
    TrainConfig, Trainer,
};
use fwd_core::FwdError;
use fwd_tensor::{Adam, AdamConfig, ParamStore, Real, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY_WIDTH: Real = 1.0 / 16.0;

fn tiny_scene(texture: Texture, seed: u64) -> SceneBundle {
    generate_synthetic(&SyntheticSpec::new(SyntheticGeometry::TwoPlanes, texture, 4, 8, 8).with_seed(seed)).unwrap()
}

fn small_scene(seed: u64) -> SceneBundle {
    generate_synthetic(&SyntheticSpec::new(SyntheticGeometry::TwoPlanes, Texture::Perlin, 4, 16, 12).with_seed(seed)).unwrap()
}

/// Wide baseline, so every variant leaves some target pixels uncovered.
fn wide_scene(seed: u64) -> SceneBundle {
    let spec = SyntheticSpec::new(SyntheticGeometry::TwoPlanes, Texture::Perlin, 4, 16, 12).with_arc(60.0);
    generate_synthetic(&spec.with_seed(seed)).unwrap()
}

fn tiny_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig::new(variant, TINY_WIDTH)
}

fn tiny_train(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed,
        ..Default::default()
    }
}

#[test]
fn defaults_match_published_constants() {
    let l = LossConfig::default();
    assert_eq!((l.lambda_l2, l.lambda_c, l.lambda_s), (5.0, 1.0, 5.0));
    assert_eq!(l.content_loss, ContentLoss::Off);
    let o = TrainConfig::default().optim;
    assert_eq!((o.lr, o.beta1, o.beta2), (1e-4, 0.9, 0.999));
    let a = AdamConfig::default();
    assert_eq!((a.lr, a.beta1, a.beta2), (1e-4, 0.9, 0.999));
}

#[test]
fn loss_of_uniform_offset() {
    let gt = Tensor::full([4, 5, 3], 0.3);
    let pred = gt.map(|v| v + 0.1);
    let p = loss(&pred, &gt, None, &LossConfig::default()).unwrap();
    assert!((p.l2 - 0.01).abs() < 1e-12);
    assert!((p.total - 0.05).abs() < 1e-12);
    assert_eq!(p.content, 0.0);
    let same = loss(&gt, &gt, None, &LossConfig::default()).unwrap();
    assert_eq!((same.l2, same.total), (0.0, 0.0));
}

#[test]
fn loss_decomposes_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred = Tensor::uniform([6, 7, 3], 0.0, 1.0, &mut rng);
    let gt = Tensor::uniform([6, 7, 3], 0.0, 1.0, &mut rng);
    let d = Tensor::uniform([6, 7], 1.0, 3.0, &mut rng);
    let s = Tensor::uniform([6, 7], 1.0, 3.0, &mut rng);
    let mask: Vec<bool> = (0..42).map(|i| i % 3 != 0).collect();
    let cfg = LossConfig {
        lambda_l2: 5.0,
        lambda_c: 1.5,
        lambda_s: 0.7,
        content_loss: ContentLoss::GradientDiffSurrogate,
    };
    let p = loss(&pred, &gt, Some((&d, &s, &mask)), &cfg).unwrap();
    assert!(p.content > 0.0 && p.depth > 0.0);
    let total = cfg.lambda_l2 * p.l2 + cfg.lambda_c * p.content + cfg.lambda_s * p.depth;
    assert_eq!(p.total, total);

    let n = mask.iter().filter(|m| **m).count() as Real;
    let want: Real = (0..42).filter(|&i| mask[i]).map(|i| (d.data()[i] - s.data()[i]).abs()).sum::<Real>() / n;
    assert!((p.depth - want).abs() < 1e-12);
}

#[test]
fn empty_depth_mask_contributes_nothing() {
    let gt = Tensor::full([4, 4, 3], 0.5);
    let d = Tensor::full([4, 4], 9.0);
    let s = Tensor::full([4, 4], 1.0);
    let p = loss(&gt, &gt, Some((&d, &s, &[false; 16])), &LossConfig::default()).unwrap();
    assert_eq!((p.depth, p.total), (0.0, 0.0));
}

#[test]
fn loss_rejects_mismatched_shapes() {
    let r = loss(&Tensor::zeros([4, 4, 3]), &Tensor::zeros([4, 5, 3]), None, &LossConfig::default());
    assert!(matches!(r, Err(FwdError::Shape(_))));
    let bad = LossConfig {
        lambda_c: -1.0,
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(FwdError::Domain(_))));
}

#[test]
fn every_variant_renders_the_target_shape() {
    let scene = tiny_scene(Texture::Checker, 1);
    let target = scene.views[2].pose;
    for v in ModelVariant::ALL {
        let m = FwdModel::new(tiny_config(v), 3).unwrap();
        let out = m.synthesize_from(&scene, &[0, 1, 3], &target).unwrap();
        assert_eq!(out.image.shape(), &[8, 8, 3], "{v}");
        assert_eq!(out.fused.shape(), &[8, 8, m.config.feature_dim], "{v}");
        assert!(out.image.is_finite());
        let clouds = if v.uses_fusion() { 3 } else { 1 };
        assert_eq!(out.depths.len(), clouds, "{v}");
        assert_eq!(out.coverage.len(), clouds, "{v}");
        assert_eq!(out.attention.is_some(), v.uses_fusion(), "{v}");
    }
}

#[test]
fn variant_names_round_trip() {
    for v in ModelVariant::ALL {
        assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, format!("\"{}\"", v.name()));
    }
    assert_eq!("FWD_D".parse::<ModelVariant>().unwrap(), ModelVariant::FwdD);
    assert!("fwd-x".parse::<ModelVariant>().is_err());
}

#[test]
fn synthesis_errors() {
    let mut scene = tiny_scene(Texture::Checker, 2);
    let m = FwdModel::new(tiny_config(ModelVariant::FwdD), 0).unwrap();
    let target = scene.views[0].pose;
    assert!(matches!(m.synthesize_from(&scene, &[], &target), Err(FwdError::EmptyInput(_))));
    scene.views[1].depth = None;
    scene.views[1].mask = None;
    assert!(matches!(m.synthesize_from(&scene, &[0, 1], &target), Err(FwdError::MissingDepth(_))));
    // FWD-U never reads sensor depth
    let u = FwdModel::new(tiny_config(ModelVariant::FwdU), 0).unwrap();
    assert!(u.synthesize_from(&scene, &[0, 1], &target).is_ok());

    let odd = generate_synthetic(&SyntheticSpec::new(SyntheticGeometry::Plane, Texture::Checker, 2, 10, 8)).unwrap();
    assert!(matches!(m.synthesize_from(&odd, &[0], &odd.views[1].pose), Err(FwdError::Shape(_))));
}

#[test]
fn cached_views_render_like_the_full_pass() {
    let scene = tiny_scene(Texture::Perlin, 3);
    let m = FwdModel::new(tiny_config(ModelVariant::FwdD), 5).unwrap();
    let target = scene.views[3].pose;
    let full = m.synthesize_from(&scene, &[0, 1], &target).unwrap();
    let cached: Vec<_> = [0, 1].iter().map(|&i| m.prepare_cached(&scene.views[i]).unwrap()).collect();
    let fast = m.render_cached(&cached, &scene.views[3].intrinsics, &target).unwrap();
    assert_eq!(full.image, fast.image);
}

#[test]
fn zero_steps_return_the_initialization() {
    let scene = tiny_scene(Texture::Checker, 1);
    let mut t = Trainer::new(tiny_config(ModelVariant::FwdD), tiny_train(0, 9)).unwrap();
    t.run(std::slice::from_ref(&scene), |_| panic!("no steps expected")).unwrap();
    let fresh = FwdModel::new(tiny_config(ModelVariant::FwdD), 9).unwrap();
    assert_eq!(t.model.to_checkpoint().encode(), fresh.to_checkpoint().encode());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let scenes = [tiny_scene(Texture::Perlin, 4)];
    let run = || {
        let mut t = Trainer::new(tiny_config(ModelVariant::FwdD), tiny_train(4, 11)).unwrap();
        t.run(&scenes, |_| {}).unwrap();
        t.checkpoint().encode()
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let scenes = [tiny_scene(Texture::Perlin, 5), tiny_scene(Texture::Checker, 6)];
    let cfg = tiny_train(6, 13);
    let mut straight = Trainer::new(tiny_config(ModelVariant::FwdD), cfg.clone()).unwrap();
    straight.run(&scenes, |_| {}).unwrap();

    let mut first = Trainer::new(tiny_config(ModelVariant::FwdD), cfg).unwrap();
    for _ in 0..3 {
        first.step(&scenes).unwrap();
    }
    let bytes = first.checkpoint().encode();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::decode(&bytes, "mem").unwrap(), "mem").unwrap();
    assert_eq!(resumed.state.step, 3);
    resumed.run(&scenes, |_| {}).unwrap();
    assert_eq!(resumed.checkpoint().encode(), straight.checkpoint().encode());
    assert_eq!(&straight.curve[3..], &resumed.curve[..]);
}

#[test]
fn two_stage_training_resumes_across_the_boundary() {
    let scenes = [tiny_scene(Texture::Perlin, 7)];
    let cfg = TrainConfig {
        two_stage: true,
        stage1_steps: 2,
        ..tiny_train(4, 17)
    };
    let mut straight = Trainer::new(tiny_config(ModelVariant::FwdU), cfg.clone()).unwrap();
    straight.run(&scenes, |_| {}).unwrap();
    let stages: Vec<u8> = straight.curve.iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec![1, 1, 2, 2]);

    let mut first = Trainer::new(tiny_config(ModelVariant::FwdU), cfg.clone()).unwrap();
    first.step(&scenes).unwrap();
    let ck = first.checkpoint();
    assert_eq!(ck.meta["stage_boundaries"], serde_json::json!([2]));
    let mut resumed = Trainer::from_checkpoint(&ck, "mem").unwrap();
    resumed.run(&scenes, |_| {}).unwrap();
    assert_eq!(resumed.checkpoint().encode(), straight.checkpoint().encode());

    let fwd_d = Trainer::new(tiny_config(ModelVariant::FwdD), cfg);
    assert!(matches!(fwd_d, Err(FwdError::Domain(_))));
}

#[test]
fn stage_one_trains_only_the_depth_refiner() {
    let scenes = [tiny_scene(Texture::Perlin, 8)];
    let cfg = TrainConfig {
        two_stage: true,
        stage1_steps: 3,
        ..tiny_train(3, 19)
    };
    let mut t = Trainer::new(tiny_config(ModelVariant::FwdU), cfg).unwrap();
    let before = t.model.store.clone();
    t.run(&scenes, |_| {}).unwrap();
    for (id, p) in t.model.store.iter() {
        let changed = p.value != *before.value(id);
        assert_eq!(changed, p.name.starts_with("depth.") && p.trainable, "{}", p.name);
    }
}

#[test]
fn checkpoint_save_load_save_is_idempotent() {
    let scenes = [tiny_scene(Texture::Perlin, 9)];
    let mut t = Trainer::new(tiny_config(ModelVariant::FwdD), tiny_train(2, 23)).unwrap();
    t.run(&scenes, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.fwdck");
    let b = dir.path().join("b.fwdck");
    t.checkpoint().save(&a).unwrap();
    let loaded = Trainer::from_checkpoint(&Checkpoint::load(&a).unwrap(), "a").unwrap();
    loaded.checkpoint().save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let m = FwdModel::from_checkpoint(&Checkpoint::load(&a).unwrap(), "a").unwrap();
    let target = scenes[0].views[1].pose;
    assert_eq!(
        m.synthesize_from(&scenes[0], &[0, 2], &target).unwrap().image,
        t.model.synthesize_from(&scenes[0], &[0, 2], &target).unwrap().image
    );
}

#[test]
fn checkpoint_rejects_foreign_or_incomplete_files() {
    let m = FwdModel::new(tiny_config(ModelVariant::FwdD), 1).unwrap();
    let mut ck = m.to_checkpoint();
    ck.meta["format"] = "something-else".into();
    assert!(matches!(FwdModel::from_checkpoint(&ck, "x"), Err(FwdError::Format { .. })));

    let full = m.to_checkpoint();
    let mut partial = Checkpoint::new(full.meta.clone());
    let bigger = FwdModel::new(ModelConfig::new(ModelVariant::FwdD, 0.25), 1).unwrap();
    for (_, p) in bigger.store.iter() {
        partial.push(format!("param/{}", p.name), p.value.clone());
    }
    match FwdModel::from_checkpoint(&partial, "x") {
        Err(FwdError::Format { field, .. }) => assert!(field.starts_with("param/")),
        other => panic!("expected a format error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn non_finite_loss_reports_the_step() {
    let mut scene = tiny_scene(Texture::Checker, 10);
    for v in &mut scene.views {
        v.image.data_mut()[0] = Real::NAN;
    }
    let mut t = Trainer::new(tiny_config(ModelVariant::FwdD), tiny_train(1, 0)).unwrap();
    match t.step(std::slice::from_ref(&scene)) {
        Err(FwdError::TrainingDiverged { step, loss }) => {
            assert_eq!(step, 0);
            assert!(loss.is_nan());
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.parts)),
    }
}

#[test]
fn training_needs_two_views_outside_the_holdout() {
    let scene = tiny_scene(Texture::Checker, 11);
    let cfg = TrainConfig {
        holdout: vec![0, 1, 2],
        ..tiny_train(1, 0)
    };
    let mut t = Trainer::new(tiny_config(ModelVariant::FwdD), cfg).unwrap();
    assert!(matches!(t.step(std::slice::from_ref(&scene)), Err(FwdError::EmptyInput(_))));
    assert!(matches!(t.step(&[]), Err(FwdError::EmptyInput(_))));
}

#[test]
fn sampled_views_respect_the_holdout() {
    let scene = small_scene(12);
    let cfg = TrainConfig {
        holdout: vec![1],
        ..tiny_train(12, 29)
    };
    let mut t = Trainer::new(tiny_config(ModelVariant::FwdD), cfg).unwrap();
    t.run(std::slice::from_ref(&scene), |r| {
        assert_ne!(r.target, 1);
        assert!(!r.inputs.contains(&1) && !r.inputs.contains(&r.target));
        assert_eq!(r.inputs.len(), 2);
    })
    .unwrap();
}

/// Every trainable parameter must receive a nonzero gradient within the
/// first two steps; the zero-initialized fusion token leaves the query
/// path flat for exactly one step.
#[test]
fn no_dead_parameters() {
    let scenes = [wide_scene(13)];
    for variant in ModelVariant::ALL {
        let mut t = Trainer::new(tiny_config(variant), tiny_train(2, 31)).unwrap();
        let ids: Vec<_> = t.model.store.trainable_ids().collect();
        let mut live = vec![false; ids.len()];
        for _ in 0..2 {
            t.step(&scenes).unwrap();
            for (k, id) in ids.iter().enumerate() {
                live[k] |= t.model.store.grad(*id).data().iter().any(|g| *g != 0.0);
            }
        }
        let unused = |name: &str| match variant {
            ModelVariant::AblateNoTransformer => name.starts_with("fusion."),
            ModelVariant::AblateNoViewdep => name.starts_with("viewdep."),
            _ => false,
        };
        for (k, id) in ids.iter().enumerate() {
            let name = &t.model.store.get(*id).name;
            assert_eq!(live[k], !unused(name), "{variant}: {name}");
        }
    }
}

/// The whole forward pass against central differences for every scalar
/// parameter. Gradients below 1e-5 are compared absolutely, since biases
/// feeding instance norm have a structurally zero gradient and the
/// difference quotient there is pure rounding noise.
#[test]
fn end_to_end_gradients_match_finite_differences() {
    let scene = tiny_scene(Texture::Perlin, 14);
    let mut model = FwdModel::new(tiny_config(ModelVariant::FwdD), 37).unwrap();
    let cfg = LossConfig {
        content_loss: ContentLoss::GradientDiffSurrogate,
        ..Default::default()
    };
    fn objective<'t>(m: &FwdModel, tape: &'t Tape, scene: &SceneBundle, cfg: &LossConfig) -> fwd_tensor::Var<'t> {
        let target = 2;
        let syn = m.synthesize_on(tape, scene, &[1, 3], &scene.views[target].pose).unwrap();
        let mask = scene.views[target].valid_mask().unwrap();
        let sensor = scene.views[target].depth.clone().unwrap();
        let depths = [DepthTarget {
            pred: syn.depths[0],
            sensor: &sensor,
            mask: &mask,
        }];
        loss_var(tape, syn.image, &scene.views[target].image, &depths, cfg).unwrap().total
    }
    let tape = Tape::new();
    let g = tape.backward(objective(&model, &tape, &scene, &cfg)).unwrap();
    let ids: Vec<_> = model.store.trainable_ids().collect();
    let analytic: Vec<Tensor> = ids.iter().map(|id| g.param(*id).cloned().unwrap_or_else(|| Tensor::zeros(model.store.value(*id).shape().to_vec()))).collect();
    // 1e-5 steps across ReLU kinks for a handful of encoder weights
    let h = 1e-6;
    let mut worst = (0.0, String::new());
    for (id, ga) in ids.iter().zip(&analytic) {
        for i in 0..ga.numel() {
            let orig = model.store.value(*id).data()[i];
            model.store.value_mut(*id).data_mut()[i] = orig + h;
            let up = objective(&model, &Tape::inference(), &scene, &cfg).value().item();
            model.store.value_mut(*id).data_mut()[i] = orig - h;
            let down = objective(&model, &Tape::inference(), &scene, &cfg).value().item();
            model.store.value_mut(*id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = ga.data()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-5);
            if err > worst.0 {
                worst = (err, format!("{}[{i}]: tape {a:e}, numeric {num:e}", model.store.get(*id).name));
            }
        }
    }
    assert!(worst.0 < 1e-3, "worst rel err {:e} at {}", worst.0, worst.1);
}

/// Depth refinement alone, supervised by the masked depth loss on a
/// fronto-parallel plane at depth 2. Every sensor sample is dropped, so the
/// net starts from the 2.5 prior and has to move the whole map.
#[test]
fn depth_refiner_learns_a_plane() {
    let spec = SyntheticSpec::new(SyntheticGeometry::Plane, Texture::Perlin, 1, 32, 32)
        .with_arc(0.0)
        .with_seed(15)
        .with_degradation(fwd_core::io::DepthDegradation {
            drop_fraction: 1.0,
            noise_rel: 0.0,
        });
    let scene = generate_synthetic(&spec).unwrap();
    let view = &scene.views[0];
    let truth = Tensor::full([32, 32], 2.0);
    let all = vec![true; 32 * 32];
    let valid = view.valid_mask().unwrap();
    let sensor = view.depth.clone().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let net = DepthNet::new(&mut store, DepthConfig::scaled(0.25), &mut rng);
    let mut adam = Adam::new(AdamConfig::default(), &store);
    let cfg = LossConfig::default();
    let mean_err = |store: &ParamStore| {
        let tape = Tape::inference();
        let d = net.forward(&tape, store, tape.constant(view.image.clone()), &sensor, &valid).unwrap().value();
        d.data().iter().map(|v| (v - 2.0).abs()).sum::<Real>() / d.numel() as Real
    };
    let start = mean_err(&store);
    assert!(start > 0.4, "{start}");
    for _ in 0..500 {
        let tape = Tape::new();
        let d = net.forward(&tape, &store, tape.constant(view.image.clone()), &sensor, &valid).unwrap();
        let img = tape.constant(view.image.clone());
        let targets = [DepthTarget {
            pred: d,
            sensor: &truth,
            mask: &all,
        }];
        let out = loss_var(&tape, img, &view.image, &targets, &cfg).unwrap();
        assert_eq!(out.parts.l2, 0.0);
        let g = tape.backward(out.total).unwrap();
        store.zero_grad();
        store.accumulate(&g);
        adam.step(&mut store).unwrap();
    }
    let end = mean_err(&store);
    assert!(end < 0.05, "mean |D − 2| went from {start} to {end}");
}

#[test]
fn evaluation_reports_rows_and_rates() {
    let scene = small_scene(16);
    let m = FwdModel::new(tiny_config(ModelVariant::FwdD), 2).unwrap();
    let targets = EvalTarget::leave_one_out(scene.len(), 2);
    assert_eq!(targets[0], EvalTarget { target: 0, inputs: vec![1, 2] });
    assert_eq!(targets[2], EvalTarget { target: 2, inputs: vec![1, 3] });
    let cfg = EvalConfig {
        warmup: 1,
        timed_renders: 3,
    };
    let report = fwd_core::pipeline::evaluate(&m, &[(scene.clone(), targets)], &cfg).unwrap();
    let out = m.synthesize_from(&scene, &[1, 3], &scene.views[2].pose).unwrap();
    let want = fwd_core::io::psnr(&out.image.map(|v| v.clamp(0.0, 1.0)), &scene.views[2].image, 1.0).unwrap();
    assert_eq!(report.rows[2].psnr_db, want);
    assert_eq!(report.rows.len(), scene.len());
    assert_eq!(report.scenes.len(), 1);
    assert!(report.aggregate.fps > 0.0);
    for r in &report.rows {
        assert!(r.psnr_db.is_finite() && r.ssim <= 1.0);
    }
    assert!(matches!(
        fwd_core::pipeline::evaluate(&m, &[(scene, vec![])], &cfg),
        Err(FwdError::EmptyInput(_))
    ));
}
