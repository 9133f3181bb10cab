use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fwd_core::io::{
    generate_synthetic, load_scene, metrics_csv, psnr, save_scene, ssim, codec::write_rgb_png, Checkpoint, DepthDegradation,
    MetricRow, SceneBundle, SyntheticGeometry, SyntheticSpec, Texture,
};
use fwd_core::pipeline::{
    evaluate, loss_curve_csv, ContentLoss, EvalConfig, EvalTarget, FwdModel, LossConfig, ModelConfig, ModelVariant,
    OptimConfig, TrainConfig, Trainer, DEFAULT_WIDTH_FACTOR,
};
use fwd_core::{FwdError, Real};

use crate::bench::{self, BenchConfig};
use crate::posefile::read_pose_file;
use crate::serve::{self, ServeState};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "fwd", version, about = "Forward-warping novel view synthesis")]
pub struct Cli {
    /// Worker threads for tensor kernels; 1 gives the reference
    /// single-threaded mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene with exact depth to a directory.
    Synthetic(SyntheticArgs),
    /// Train a model and write a checkpoint plus its loss curve.
    Train(TrainArgs),
    /// Render novel views listed in a pose file.
    Synth(SynthArgs),
    /// Leave-one-out PSNR, SSIM and frame rate.
    Eval(EvalArgs),
    /// Time rasterization, fusion and refinement on random clouds.
    Bench(BenchArgs),
    /// Serve frames over WebSocket and the viewer's static files.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GeometryArg {
    Plane,
    Cube,
    TwoPlanes,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TextureArg {
    Checker,
    Perlin,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ContentLossArg {
    Off,
    GradientDiffSurrogate,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("resolution must be positive, got {s:?}"));
    }
    Ok((w, h))
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: FwdError| e.to_string())
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, value_enum, default_value = "two-planes")]
    pub geometry: GeometryArg,
    #[arg(long, value_enum, default_value = "perlin")]
    pub texture: TextureArg,
    #[arg(long, default_value_t = 5)]
    pub views: usize,
    /// `WIDTHxHEIGHT`.
    #[arg(long, value_parser = parse_res, default_value = "128x96")]
    pub res: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Horizontal arc spanned by the cameras, degrees.
    #[arg(long)]
    pub arc: Option<Real>,
    /// Relative Gaussian noise on the stored depth.
    #[arg(long, default_value_t = 0.0)]
    pub depth_noise: Real,
    /// Fraction of depth samples dropped.
    #[arg(long, default_value_t = 0.0)]
    pub depth_drop: Real,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Glob of scene manifests.
    #[arg(long)]
    pub scenes: String,
    #[arg(long, value_parser = parse_variant, default_value = "fwd-d")]
    pub variant: ModelVariant,
    #[arg(long)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Continue from this checkpoint; model and loss flags are ignored.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WIDTH_FACTOR)]
    pub width: Real,
    #[arg(long)]
    pub lr: Option<Real>,
    #[arg(long)]
    pub lambda_l2: Option<Real>,
    #[arg(long)]
    pub lambda_c: Option<Real>,
    #[arg(long)]
    pub lambda_s: Option<Real>,
    #[arg(long, value_enum, default_value = "off")]
    pub content_loss: ContentLossArg,
    /// FWD-U: train the depth refiner alone for `--stage1-steps` first.
    #[arg(long)]
    pub two_stage: bool,
    #[arg(long, default_value_t = 0)]
    pub stage1_steps: u64,
    #[arg(long, default_value_t = 2)]
    pub n_input: usize,
    /// View indices excluded from training, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: Real,
    /// Print the loss every this many steps (0 = never).
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene manifest.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pose_file: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the checkpoint's variant.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<ModelVariant>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scenes: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input views per target, nearest by index.
    #[arg(long, default_value_t = 2)]
    pub inputs: usize,
    #[arg(long, default_value_t = 30)]
    pub renders: usize,
    /// Metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<ModelVariant>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Points per view.
    #[arg(long, default_value_t = 10_000)]
    pub points: usize,
    #[arg(long, value_parser = parse_res, default_value = "128x96")]
    pub res: (usize, usize),
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = DEFAULT_WIDTH_FACTOR)]
    pub width: Real,
    #[arg(long, default_value_t = fwd_core::render::DEFAULT_K_BLEND)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Directory with the built viewer.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<ModelVariant>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synthetic(a) => synthetic(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => run_bench(a),
        Command::Serve(a) => run_serve(a),
    }
}

fn synthetic(a: SyntheticArgs) -> CliResult<()> {
    let geometry = match a.geometry {
        GeometryArg::Plane => SyntheticGeometry::Plane,
        GeometryArg::Cube => SyntheticGeometry::Cube,
        GeometryArg::TwoPlanes => SyntheticGeometry::TwoPlanes,
    };
    let texture = match a.texture {
        TextureArg::Checker => Texture::Checker,
        TextureArg::Perlin => Texture::Perlin,
    };
    let mut spec = SyntheticSpec::new(geometry, texture, a.views, a.res.0, a.res.1).with_seed(a.seed);
    if let Some(arc) = a.arc {
        spec = spec.with_arc(arc);
    }
    if a.depth_noise > 0.0 || a.depth_drop > 0.0 {
        spec = spec.with_degradation(DepthDegradation {
            drop_fraction: a.depth_drop,
            noise_rel: a.depth_noise,
        });
    }
    let scene = generate_synthetic(&spec)?;
    let manifest = save_scene(&scene, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

/// Loads every manifest matched by `pattern`, in sorted path order.
pub fn load_scenes(pattern: &str) -> CliResult<Vec<SceneBundle>> {
    let paths = glob::glob(pattern).map_err(|e| CliError::Usage(format!("--scenes {pattern:?}: {e}")))?;
    let mut paths: Vec<PathBuf> = paths
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--scenes {pattern:?}: {e}")))?;
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("--scenes {pattern:?} matched no files")));
    }
    Ok(paths.iter().map(|p| load_scene(p)).collect::<Result<_, _>>()?)
}

fn load_model(path: &Path, variant: Option<ModelVariant>) -> CliResult<FwdModel> {
    let ck = Checkpoint::load(path)?;
    let m = FwdModel::from_checkpoint(&ck, &path.display().to_string())?;
    Ok(match variant {
        Some(v) => m.with_variant(v),
        None => m,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| {
        CliError::Core(FwdError::Io {
            path: path.into(),
            source: e,
        })
    })
}

fn curve_path(out: &Path) -> PathBuf {
    out.with_extension("loss.csv")
}

fn train(a: TrainArgs) -> CliResult<()> {
    let scenes = load_scenes(&a.scenes)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut t = Trainer::from_checkpoint(&ck, &p.display().to_string())?;
            t.config.steps = a.steps;
            t
        }
        None => {
            let defaults = LossConfig::default();
            let loss = LossConfig {
                lambda_l2: a.lambda_l2.unwrap_or(defaults.lambda_l2),
                lambda_c: a.lambda_c.unwrap_or(defaults.lambda_c),
                lambda_s: a.lambda_s.unwrap_or(defaults.lambda_s),
                content_loss: match a.content_loss {
                    ContentLossArg::Off => ContentLoss::Off,
                    ContentLossArg::GradientDiffSurrogate => ContentLoss::GradientDiffSurrogate,
                },
            };
            let mut optim = OptimConfig::default();
            if let Some(lr) = a.lr {
                optim.lr = lr;
            }
            let cfg = TrainConfig {
                steps: a.steps,
                seed: a.seed,
                optim,
                loss,
                n_input: a.n_input,
                two_stage: a.two_stage,
                stage1_steps: a.stage1_steps,
                noise_std: a.noise_std,
                holdout: a.holdout.clone(),
                ..Default::default()
            };
            Trainer::new(ModelConfig::new(a.variant, a.width), cfg)?
        }
    };
    let start = Instant::now();
    let log_every = a.log_every;
    trainer.run(&scenes, |r| {
        if log_every > 0 && (r.step % log_every == 0) {
            eprintln!(
                "step {:>6} stage {} loss {:.6} (l2 {:.6}, depth {:.6}) {:.1}s",
                r.step,
                r.stage,
                r.parts.total,
                r.parts.l2,
                r.parts.depth,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    trainer.checkpoint().save(&a.out)?;
    let curve = a.curve.clone().unwrap_or_else(|| curve_path(&a.out));
    write_file(&curve, loss_curve_csv(&trainer.curve).as_bytes())?;
    println!("{}", a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let scene = load_scene(&a.scene)?;
    let model = load_model(&a.checkpoint, a.variant)?;
    let entries = read_pose_file(&a.pose_file, &scene)?;
    std::fs::create_dir_all(&a.out).map_err(|e| FwdError::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut rows = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let start = Instant::now();
        let out = model.synthesize_from(&scene, &e.inputs, &e.pose)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let img = out.image.map(|v| v.clamp(0.0, 1.0));
        let path = a.out.join(format!("pose_{i:04}.png"));
        write_rgb_png(&path, &img)?;
        println!("{}", path.display());
        if let Some(v) = e.view {
            let gt = &scene.views[v].image;
            rows.push(MetricRow {
                scene: scene.name.clone(),
                view: v,
                psnr_db: psnr(&img, gt, 1.0)?,
                ssim: ssim(&img, gt, 1.0)?,
                ms_per_frame: ms as Real,
            });
        }
    }
    if !rows.is_empty() {
        write_file(&a.out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let scenes = load_scenes(&a.scenes)?;
    let model = load_model(&a.checkpoint, a.variant)?;
    let jobs: Vec<_> = scenes
        .into_iter()
        .map(|s| {
            let t = EvalTarget::leave_one_out(s.len(), a.inputs);
            (s, t)
        })
        .collect();
    let cfg = EvalConfig {
        timed_renders: a.renders.max(1),
        ..Default::default()
    };
    let report = evaluate(&model, &jobs, &cfg)?;
    println!("{:<24} {:>9} {:>8} {:>8}", "scene", "psnr_db", "ssim", "fps");
    for s in report.scenes.iter().chain(std::iter::once(&report.aggregate)) {
        println!("{:<24} {:>9.3} {:>8.4} {:>8.2}", s.scene, s.psnr_db, s.ssim, s.fps);
    }
    if let Some(out) = &a.out {
        write_file(out, metrics_csv(&report.rows).as_bytes())?;
    }
    Ok(())
}

fn run_bench(a: BenchArgs) -> CliResult<()> {
    let cfg = BenchConfig {
        points: a.points,
        width: a.res.0,
        height: a.res.1,
        views: a.views,
        iters: a.iters,
        width_factor: a.width,
        k_blend: a.k,
        seed: a.seed,
    };
    let report = bench::run(&cfg)?;
    print!("{}", report.table());
    Ok(())
}

fn run_serve(a: ServeArgs) -> CliResult<()> {
    let scene = load_scene(&a.scene)?;
    let model = load_model(&a.checkpoint, a.variant)?;
    let state = Arc::new(ServeState::new(model, scene, a.static_dir.clone())?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("runtime: {e}")))?;
    rt.block_on(async move {
        let addr = SocketAddr::new(a.host, a.port);
        let (local, server) = serve::bind(state, addr)
            .await
            .map_err(|e| CliError::Runtime(format!("bind {addr}: {e}")))?;
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        server.await.map_err(|e| CliError::Runtime(format!("serve: {e}")))
    })
}
