//! Training, evaluation, ablation and gradient-check drivers.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod train;

pub use ablation::{
    run_ablation_suite, run_cross_domain, AblationReport, AblationRow, CrossDomainReport,
};
pub use config::{AblationFlags, OptimizerConfig, RunConfig};
pub use eval::{
    evaluate, evaluate_checkpoint, Confusion, EvalReport, ModelPredictor, Predictor, THRESHOLD,
};
pub use gradsuite::{run_gradcheck, GradReport, GradRow, Scope};
pub use train::{
    train, train_on_split, write_run, EpochMetrics, MetricsReport, StepRecord, TrainOutcome,
};
