//! Operational shell: configuration, folds, training, evaluation, plots.

pub mod config;
pub mod eval;
pub mod folds;
pub mod plot;
pub mod train;

pub use config::{ExperimentConfig, RunMode, SEED_ENV};
pub use eval::{evaluate, evaluate_with, EvalOutcome, VideoResult};
pub use folds::{make_folds, Fold, FoldPlan};
pub use train::{train, EpochLog, TrainConfig, TrainOutcome, Trainer};
