//! Hybrid CNN / selective-scan segmentation network.
//!
//! A ResNet-18 encoder feeds a three-stage decoder built from [`blocks::CsMambaBlock`]s,
//! with skip features refined by [`blocks::Msaa`]. Everything runs on the
//! `cmunet-tensor` autograd engine.

pub mod blocks;
pub mod checkpoint;
pub mod data;
mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scan2d;
pub mod ssm;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use error::{Error, Result};
pub use metrics::{compute_metrics, ConfusionMatrix, MetricReport};
pub use model::{CmUnet, ModelConfig, ModelOutputs};
pub use train::RunConfig;
