//! Model assembly, losses, training and evaluation.
//!
//! A forward pass lifts every input view into a point cloud (refined
//! depth, encoded features), applies view-dependent modulation toward the
//! target camera, splats each cloud into the target, fuses the renderings
//! per pixel and decodes RGB.

mod eval;
mod loss;
mod model;
mod train;

pub use eval::{evaluate, EvalConfig, EvalReport, EvalTarget, SceneSummary};
pub use loss::{loss, loss_var, ContentLoss, DepthTarget, LossConfig, LossOutput, LossParts};
pub use model::{
    CachedView, FwdModel, ModelConfig, ModelVariant, PreparedView, Rendered, Synthesis, DEFAULT_RESOLUTION,
    DEFAULT_WIDTH_FACTOR,
};
pub use train::{
    loss_curve_csv, train, LossRecord, OptimConfig, TrainConfig, TrainState, Trainer, CHECKPOINT_FORMAT,
    LOSS_CURVE_HEADER,
};
