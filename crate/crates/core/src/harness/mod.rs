//! Training loop, evaluation metrics, the five-arm ablation runner and the
//! gradient-check suite.

pub mod ablate;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use ablate::{ablate, arms, AblationResult};
pub use config::{AdamConfig, TrainConfig};
pub use eval::{evaluate, evaluate_with, metrics_csv, MetricsRow, Summary};
pub use gradcheck::{gradcheck_all, gradcheck_csv, GradCheckRow};
pub use train::{train, TrainOutcome};
