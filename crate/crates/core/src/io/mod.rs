//! Scene manifests, synthetic scenes, codecs, checkpoints and metrics.

pub mod checkpoint;
pub mod codec;
pub mod metrics;
pub mod scene;
pub mod synthetic;

pub use checkpoint::Checkpoint;
pub use metrics::{metrics_csv, psnr, ssim, MetricRow};
pub use scene::{load_scene, save_scene, SceneBundle, View};
pub use synthetic::{generate_synthetic, DepthDegradation, SyntheticGeometry, SyntheticSpec, Texture};
