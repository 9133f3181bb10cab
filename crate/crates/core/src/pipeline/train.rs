use std::fmt::Write as _;

use fwd_tensor::{Adam, AdamConfig, AdamState, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::loss::{loss_var, DepthTarget, LossConfig, LossParts};
use super::model::{FwdModel, ModelConfig, ModelVariant};
use crate::error::{FwdError, Result};
use crate::geometry::unproject_var;
use crate::io::{Checkpoint, SceneBundle};
use crate::nn::NoiseGate;
use crate::render::render_var;

pub const CHECKPOINT_FORMAT: &str = "fwd-model";

/// Adam settings as stored in checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for OptimConfig {
    fn default() -> Self {
        AdamConfig::default().into()
    }
}

impl From<AdamConfig> for OptimConfig {
    fn from(c: AdamConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl From<OptimConfig> for AdamConfig {
    fn from(c: OptimConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Input views per step; the target is drawn from the remaining views.
    pub n_input: usize,
    /// FWD-U only: train the depth refiner alone on RGB point clouds first.
    pub two_stage: bool,
    pub stage1_steps: u64,
    /// Power iterations per step for spectrally normalized weights.
    pub power_iters: usize,
    /// Std of the refinement noise gate; 0 disables it.
    pub noise_std: Real,
    /// View indices never used for training (per scene).
    pub holdout: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            seed: 0,
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            n_input: 2,
            two_stage: false,
            stage1_steps: 0,
            power_iters: 1,
            noise_std: 0.0,
            holdout: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u8,
    pub scene: usize,
    pub target: usize,
    pub inputs: Vec<usize>,
    pub parts: LossParts,
}

pub const LOSS_CURVE_HEADER: &str = "step,stage,scene,target,l2,content,depth,total";

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CURVE_HEADER);
    out.push('\n');
    for r in records {
        let p = &r.parts;
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{:e},{:e},{:e}",
            r.step, r.stage, r.scene, r.target, p.l2, p.content, p.depth, p.total
        );
    }
    out
}

/// Everything besides parameters that a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    /// 1 while only the depth refiner trains, 2 afterwards.
    pub stage: u8,
    pub rng: ChaCha8Rng,
    pub adam: Adam,
}

/// A model together with its optimizer and sampling state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FwdModel,
    pub config: TrainConfig,
    pub state: TrainState,
    pub curve: Vec<LossRecord>,
}

fn sampler_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.loss.validate()?;
        if config.two_stage && model_config.variant != ModelVariant::FwdU {
            return Err(FwdError::Domain("two-stage training applies to FWD-U only".into()));
        }
        let model = FwdModel::new(model_config, config.seed)?;
        let adam = Adam::new(config.optim.into(), &model.store);
        let stage = if config.two_stage && config.stage1_steps > 0 { 1 } else { 2 };
        Ok(Self {
            state: TrainState {
                step: 0,
                stage,
                rng: sampler_rng(config.seed),
                adam,
            },
            model,
            config,
            curve: Vec::new(),
        })
    }

    fn stage_for(&self, step: u64) -> u8 {
        if self.config.two_stage && step < self.config.stage1_steps {
            1
        } else {
            2
        }
    }

    /// Draws a scene, a target view and `n_input` distinct input views.
    fn sample(&mut self, scenes: &[SceneBundle]) -> Result<(usize, usize, Vec<usize>)> {
        if scenes.is_empty() {
            return Err(FwdError::EmptyInput("training needs at least one scene".into()));
        }
        let rng = &mut self.state.rng;
        let s = rng.random_range(0..scenes.len());
        let mut pool: Vec<usize> = (0..scenes[s].len()).filter(|i| !self.config.holdout.contains(i)).collect();
        if pool.len() < 2 {
            return Err(FwdError::EmptyInput(format!(
                "scene {} has {} training views, need at least 2",
                scenes[s].name,
                pool.len()
            )));
        }
        let target = pool.remove(rng.random_range(0..pool.len()));
        let n = self.config.n_input.clamp(1, pool.len());
        let mut inputs = Vec::with_capacity(n);
        for _ in 0..n {
            inputs.push(pool.remove(rng.random_range(0..pool.len())));
        }
        inputs.sort_unstable();
        Ok((s, target, inputs))
    }

    /// One optimizer step on a freshly sampled (scene, target, inputs).
    pub fn step(&mut self, scenes: &[SceneBundle]) -> Result<LossRecord> {
        let stage = self.stage_for(self.state.step);
        if self.state.stage == 1 && stage == 2 {
            // moments and bias correction restart with the full model
            self.state.adam = Adam::new(self.config.optim.into(), &self.model.store);
        }
        self.state.stage = stage;
        let (s, target, inputs) = self.sample(scenes)?;
        let scene = &scenes[s];
        let tape = Tape::new();
        let out = if stage == 1 {
            self.stage1_loss(&tape, scene, target, &inputs)?
        } else {
            self.full_loss(&tape, scene, target, &inputs)?
        };
        let (total, parts) = out;
        if !parts.total.is_finite() {
            return Err(FwdError::TrainingDiverged {
                step: self.state.step,
                loss: parts.total as f64,
            });
        }
        let grads = tape.backward(total)?;
        let store = &mut self.model.store;
        store.zero_grad();
        store.accumulate(&grads);
        self.state.adam.step(store)?;
        if stage == 2 {
            // stage 1 never runs the encoder
            self.model.update_spectral(self.config.power_iters);
        }
        let record = LossRecord {
            step: self.state.step,
            stage,
            scene: s,
            target,
            inputs,
            parts,
        };
        self.state.step += 1;
        self.curve.push(record.clone());
        Ok(record)
    }

    fn full_loss<'t>(&mut self, tape: &'t Tape, scene: &SceneBundle, target: usize, inputs: &[usize]) -> Result<(Var<'t>, LossParts)> {
        let model = &self.model;
        let views = inputs
            .iter()
            .map(|&i| model.prepare(tape, &scene.views[i]))
            .collect::<Result<Vec<_>>>()?;
        let tv = &scene.views[target];
        let mut gate = NoiseGate {
            rng: &mut self.state.rng,
            std: self.config.noise_std,
        };
        let noise = (self.config.noise_std > 0.0).then_some(&mut gate);
        let syn = model.render(tape, &views, &tv.intrinsics, &tv.pose, noise)?;
        let mut masks = Vec::new();
        if model.variant().uses_sensor_depth() {
            for &i in inputs {
                let (_, m) = model.initial_depth(&scene.views[i])?;
                masks.push(m);
            }
        }
        let depth_targets: Vec<DepthTarget<'t, '_>> = masks
            .iter()
            .zip(inputs)
            .zip(&views)
            .map(|((m, &i), v)| DepthTarget {
                pred: v.depth,
                sensor: scene.views[i].depth.as_ref().expect("checked by initial_depth"),
                mask: m,
            })
            .collect();
        let out = loss_var(tape, syn.image, &tv.image, &depth_targets, &self.config.loss)?;
        Ok((out.total, out.parts))
    }

    /// Stage 1 of FWD-U: input RGB is splatted straight into the target
    /// through the refined depth; only the depth refiner receives gradient.
    fn stage1_loss<'t>(&self, tape: &'t Tape, scene: &SceneBundle, target: usize, inputs: &[usize]) -> Result<(Var<'t>, LossParts)> {
        let model = &self.model;
        let tv = &scene.views[target];
        let intr = tv.intrinsics;
        let mut pos = Vec::with_capacity(inputs.len());
        let mut rgb = Vec::with_capacity(inputs.len());
        for &i in inputs {
            let v = &scene.views[i];
            let image = tape.constant(v.image.clone());
            let (init, valid) = model.initial_depth(v)?;
            let d = model.depth.forward(tape, &model.store, image, &init, &valid)?;
            pos.push(unproject_var(d, &v.intrinsics, &v.pose, &vec![true; v.intrinsics.num_pixels()])?);
            rgb.push(tape.constant(v.image.clone().reshape([v.intrinsics.num_pixels(), 3])?));
        }
        let out = render_var(Var::concat(&pos, 0)?, Var::concat(&rgb, 0)?, &intr, &tv.pose, &model.config.splat(&intr))?;
        let covered = out.covered();
        let count = covered.iter().filter(|c| **c).count();
        let mask = Tensor::new([intr.height, intr.width, 3], covered.iter().flat_map(|&c| [if c { 1.0 } else { 0.0 }; 3]).collect())?;
        let se = out
            .features
            .sub(tape.constant(tv.image.clone()))?
            .mul(tape.constant(mask))?
            .square()
            .sum()
            .scale(if count > 0 { 1.0 / (3 * count) as Real } else { 0.0 });
        let total = se.scale(self.config.loss.lambda_l2);
        let parts = LossParts {
            l2: se.value().item(),
            content: 0.0,
            depth: 0.0,
            total: total.value().item(),
        };
        Ok((total, parts))
    }

    /// Runs until `config.steps` steps are complete. `on_step` sees every
    /// record as it is produced.
    pub fn run(&mut self, scenes: &[SceneBundle], mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        while self.state.step < self.config.steps {
            let r = self.step(scenes)?;
            on_step(&r);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let rng = &self.state.rng;
        let seed_hex: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let mut meta = json!({
            "format": CHECKPOINT_FORMAT,
            "variant": self.model.variant(),
            "model": self.model.config,
            "train": self.config,
            "state": {
                "step": self.state.step,
                "stage": self.state.stage,
                "seed": self.config.seed,
                "rng_seed": seed_hex,
                "rng_stream": rng.get_stream(),
                "rng_word_pos": rng.get_word_pos().to_string(),
                "adam_t": self.state.adam.steps(),
            },
        });
        if self.config.two_stage {
            meta["stage_boundaries"] = json!([self.config.stage1_steps]);
        }
        let mut ck = Checkpoint::new(meta);
        push_params(&mut ck, &self.model);
        for (name, m, v) in self.state.adam.moments_as_tensors(&self.model.store) {
            ck.push(format!("adam.m/{name}"), m);
            ck.push(format!("adam.v/{name}"), v);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, file: &str) -> Result<Self> {
        let err = |field: &str, msg: String| FwdError::Format {
            file: file.into(),
            field: field.into(),
            msg,
        };
        let config: TrainConfig = serde_json::from_value(ck.meta.get("train").cloned().ok_or_else(|| err("train", "missing".into()))?)
            .map_err(|e| err("train", e.to_string()))?;
        let model = FwdModel::from_checkpoint(ck, file)?;
        let st = ck.meta.get("state").ok_or_else(|| err("state", "missing".into()))?;
        let field_u64 = |k: &str| st.get(k).and_then(|v| v.as_u64()).ok_or_else(|| err(&format!("state.{k}"), "missing".into()));
        let step = field_u64("step")?;
        let stage = field_u64("stage")? as u8;
        let t = field_u64("adam_t")?;
        let stream = field_u64("rng_stream")?;
        let seed_hex = st.get("rng_seed").and_then(|v| v.as_str()).ok_or_else(|| err("state.rng_seed", "missing".into()))?;
        if seed_hex.len() != 64 {
            return Err(err("state.rng_seed", "expected 64 hex digits".into()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|e| err("state.rng_seed", e.to_string()))?;
        }
        let pos: u128 = st
            .get("rng_word_pos")
            .and_then(|v| v.as_str())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("state.rng_word_pos", "missing or invalid".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(pos);
        let mut states = Vec::new();
        for id in model.store.trainable_ids() {
            let name = &model.store.get(id).name;
            let get = |prefix: &str| -> Result<Vec<Real>> {
                let key = format!("{prefix}/{name}");
                let t = ck.get(&key).ok_or_else(|| err(&key, "missing".into()))?;
                if t.shape() != model.store.value(id).shape() {
                    return Err(err(&key, format!("shape {:?}, expected {:?}", t.shape(), model.store.value(id).shape())));
                }
                Ok(t.data().to_vec())
            };
            states.push((id, AdamState { m: get("adam.m")?, v: get("adam.v")?, t }));
        }
        let adam = Adam::restore(config.optim.into(), states);
        Ok(Self {
            model,
            config,
            state: TrainState { step, stage, rng, adam },
            curve: Vec::new(),
        })
    }
}

fn push_params(ck: &mut Checkpoint, model: &FwdModel) {
    for (_, p) in model.store.iter() {
        ck.push(format!("param/{}", p.name), p.value.clone());
    }
}

impl FwdModel {
    /// Parameters only, for inference.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "format": CHECKPOINT_FORMAT,
            "variant": self.variant(),
            "model": self.config,
        }));
        push_params(&mut ck, self);
        ck
    }

    /// Rebuilds the model from any checkpoint written by this crate; every
    /// parameter must be present with its layout shape.
    pub fn from_checkpoint(ck: &Checkpoint, file: &str) -> Result<Self> {
        let err = |field: &str, msg: String| FwdError::Format {
            file: file.into(),
            field: field.into(),
            msg,
        };
        match ck.meta.get("format").and_then(|v| v.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => return Err(err("format", format!("expected {CHECKPOINT_FORMAT:?}, got {other:?}"))),
        }
        let config: ModelConfig = serde_json::from_value(ck.meta.get("model").cloned().ok_or_else(|| err("model", "missing".into()))?)
            .map_err(|e| err("model", e.to_string()))?;
        let mut model = FwdModel::new(config, 0)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let key = format!("param/{}", model.store.get(id).name);
            let t = ck.get(&key).ok_or_else(|| err(&key, "missing".into()))?;
            if t.shape() != model.store.value(id).shape() {
                return Err(err(&key, format!("shape {:?}, expected {:?}", t.shape(), model.store.value(id).shape())));
            }
            *model.store.value_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// A copy with `variant` swapped, sharing all parameters.
    pub fn with_variant(&self, variant: ModelVariant) -> Self {
        let mut m = self.clone();
        m.config.variant = variant;
        m
    }
}

/// Trains a fresh model on `scenes`; see [`Trainer`].
pub fn train(scenes: &[SceneBundle], model_config: ModelConfig, config: TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::new(model_config, config)?;
    t.run(scenes, |_| {})?;
    Ok(t)
}
