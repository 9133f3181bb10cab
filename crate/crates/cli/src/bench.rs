//! Per-component timing of the inference path on random clouds.

use std::fmt::Write as _;
use std::time::Instant;

use fwd_core::geometry::{Intrinsics, Pose};
use fwd_core::pipeline::{FwdModel, ModelConfig, ModelVariant};
use fwd_core::render::render_var;
use fwd_core::{FwdError, Real, Result};
use fwd_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub points: usize,
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub iters: usize,
    pub width_factor: Real,
    pub k_blend: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            points: 10_000,
            width: 128,
            height: 96,
            views: 2,
            iters: 10,
            width_factor: 0.25,
            k_blend: fwd_core::render::DEFAULT_K_BLEND,
            seed: 0,
        }
    }
}

/// Mean milliseconds per iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchReport {
    pub rasterize_ms: f64,
    pub fuse_ms: f64,
    pub refine_ms: f64,
    pub total_ms: f64,
}

impl BenchReport {
    pub fn fps(&self) -> f64 {
        1e3 / self.total_ms
    }

    pub fn table(&self) -> String {
        let mut s = String::from("component    ms/frame\n");
        for (name, v) in [
            ("rasterize", self.rasterize_ms),
            ("fuse", self.fuse_ms),
            ("refine", self.refine_ms),
            ("total", self.total_ms),
        ] {
            let _ = writeln!(s, "{name:<12} {v:>9.3}");
        }
        let _ = writeln!(s, "{:<12} {:>9.2}", "fps", self.fps());
        s
    }
}

/// Clouds of `points` random points in front of an identity camera, with
/// random features; rendered, fused and refined `iters` times.
pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.points == 0 || cfg.views == 0 || cfg.iters == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(FwdError::Domain(format!("bench sizes must be positive: {cfg:?}")));
    }
    let mut mc = ModelConfig::new(ModelVariant::FwdD, cfg.width_factor);
    mc.k_blend = cfg.k_blend;
    let d = mc.size_divisor();
    if !cfg.width.is_multiple_of(d) || !cfg.height.is_multiple_of(d) {
        return Err(FwdError::Shape(format!("resolution {}x{} must be a multiple of {d}", cfg.width, cfg.height)));
    }
    let model = FwdModel::new(mc, cfg.seed)?;
    let intr = Intrinsics::from_fov(cfg.width, cfg.height, 60.0);
    let pose = Pose::identity();
    let splat = model.config.splat(&intr);
    let c = model.config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clouds: Vec<(Tensor, Tensor)> = (0..cfg.views)
        .map(|_| {
            let mut pos = Vec::with_capacity(cfg.points * 3);
            for _ in 0..cfg.points {
                let z: Real = rng.random_range(2.0..4.0);
                let u: Real = rng.random_range(0.0..cfg.width as Real);
                let v: Real = rng.random_range(0.0..cfg.height as Real);
                pos.extend_from_slice(&[(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z]);
            }
            let pos = Tensor::new([cfg.points, 3], pos).expect("sizes");
            (pos, Tensor::randn([cfg.points, c], 1.0, &mut rng))
        })
        .collect();

    let (mut rast, mut fuse, mut refine) = (0.0, 0.0, 0.0);
    let (h, w) = (cfg.height, cfg.width);
    let start = Instant::now();
    for _ in 0..cfg.iters {
        let t0 = Instant::now();
        let tape = Tape::inference();
        let mut rendered = Vec::with_capacity(cfg.views);
        let mut masks = Vec::with_capacity(cfg.views);
        for (p, f) in &clouds {
            let out = render_var(tape.constant(p.clone()), tape.constant(f.clone()), &intr, &pose, &splat)?;
            masks.push(out.covered());
            rendered.push(out.features.reshape([h * w, c])?);
        }
        let t1 = Instant::now();
        let fused = model.fusion.forward(&tape, &model.store, &rendered, Some(&masks))?.fused;
        let t2 = Instant::now();
        let image = model.refiner.forward(&tape, &model.store, fused.reshape([h, w, c])?, None)?;
        std::hint::black_box(image.value());
        let t3 = Instant::now();
        rast += (t1 - t0).as_secs_f64();
        fuse += (t2 - t1).as_secs_f64();
        refine += (t3 - t2).as_secs_f64();
    }
    let total = start.elapsed().as_secs_f64();
    let k = 1e3 / cfg.iters as f64;
    Ok(BenchReport {
        rasterize_ms: rast * k,
        fuse_ms: fuse * k,
        refine_ms: refine * k,
        total_ms: total * k,
    })
}
