//! GLDN: a convolutional and Transformer network for age estimation from
//! 3D volumes, trained against Gaussian label distributions.
//!
//! The crate carries its own small tensor library and reverse-mode tape,
//! the layers and model, the loss, a synthetic phantom dataset and the
//! training loop.

pub mod agedist;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
mod ops;
pub mod params;
pub mod spt;
pub mod tape;
pub mod tensor;
pub mod training;

pub use agedist::{LabelDistribution, LambdaScheduler, LossConfig, MAX_AGE, MIN_AGE, NUM_BINS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use model::{Ablation, FusionConfig, Gldn, ModelConfig};
pub use params::{Ctx, Mode, ParamStore};
pub use spt::{Spt, SptConfig, SptPartConfig, ViewAxis};
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
pub use training::{Metrics, TrainConfig};
