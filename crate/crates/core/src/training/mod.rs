//! Optimizer, schedules, augmentation, metrics and the epoch loop.

pub mod augment;
pub mod fit;
pub mod metrics;
pub mod optim;
pub mod schedule;

pub use augment::{
    augment_rotate, augment_shift, rotate_volume, shift_volume, zscore, AugmentConfig,
};
pub use fit::{
    evaluate, fit, recalibrate_batchnorm, train_step, EpochRecord, Evaluation, StopReason,
    TrainConfig, TrainOutcome,
};
pub use metrics::{compute_metrics, mean_predictor_mae, Metrics};
pub use optim::{Adam, AdamConfig};
pub use schedule::{warmup_lr, EarlyStopping, StopDecision};
