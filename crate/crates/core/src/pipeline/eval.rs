use std::time::Instant;

use fwd_tensor::Real;

use super::model::FwdModel;
use crate::error::{FwdError, Result};
use crate::io::{psnr, ssim, MetricRow, SceneBundle};

/// Which views to synthesize and from which inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTarget {
    pub target: usize,
    pub inputs: Vec<usize>,
}

impl EvalTarget {
    /// Leave-one-out: every view from its `n` nearest other views by index.
    pub fn leave_one_out(n_views: usize, n: usize) -> Vec<Self> {
        (0..n_views)
            .map(|t| {
                let mut others: Vec<usize> = (0..n_views).filter(|&i| i != t).collect();
                others.sort_by_key(|&i| (i.abs_diff(t), i));
                others.truncate(n.max(1));
                others.sort_unstable();
                Self { target: t, inputs: others }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub warmup: usize,
    /// Timed renders per scene for the frame rate.
    pub timed_renders: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            warmup: 2,
            timed_renders: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSummary {
    pub scene: String,
    pub psnr_db: Real,
    pub ssim: Real,
    pub fps: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub scenes: Vec<SceneSummary>,
    /// Means over all rows; frame rate averaged over scenes.
    pub aggregate: SceneSummary,
}

fn mean(v: impl Iterator<Item = Real>) -> Real {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as Real
    }
}

/// PSNR and SSIM against ground truth for each target, and wall-clock
/// frame rate over `timed_renders` renders of the first target after
/// warm-up.
pub fn evaluate(model: &FwdModel, scenes: &[(SceneBundle, Vec<EvalTarget>)], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (scene, targets) in scenes {
        let Some(first) = targets.first() else {
            return Err(FwdError::EmptyInput(format!("no evaluation targets for scene {}", scene.name)));
        };
        let pose = |t: &EvalTarget| scene.views[t.target].pose;
        for _ in 0..cfg.warmup {
            model.synthesize_from(scene, &first.inputs, &pose(first))?;
        }
        let start = Instant::now();
        for _ in 0..cfg.timed_renders.max(1) {
            model.synthesize_from(scene, &first.inputs, &pose(first))?;
        }
        let ms = start.elapsed().as_secs_f64() as Real * 1e3 / cfg.timed_renders.max(1) as Real;
        let first_row = rows.len();
        for t in targets {
            let out = model.synthesize_from(scene, &t.inputs, &pose(t))?;
            let gt = &scene.views[t.target].image;
            let img = out.image.map(|v| v.clamp(0.0, 1.0));
            rows.push(MetricRow {
                scene: scene.name.clone(),
                view: t.target,
                psnr_db: psnr(&img, gt, 1.0)?,
                ssim: ssim(&img, gt, 1.0)?,
                ms_per_frame: ms,
            });
        }
        let mine = &rows[first_row..];
        summaries.push(SceneSummary {
            scene: scene.name.clone(),
            psnr_db: mean(mine.iter().map(|r| r.psnr_db)),
            ssim: mean(mine.iter().map(|r| r.ssim)),
            fps: 1e3 / ms,
        });
    }
    let aggregate = SceneSummary {
        scene: "all".into(),
        psnr_db: mean(rows.iter().map(|r| r.psnr_db)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        fps: mean(summaries.iter().map(|s| s.fps)),
    };
    Ok(EvalReport {
        rows,
        scenes: summaries,
        aggregate,
    })
}
