pub mod hypergrad;
pub mod objective;
pub mod step;
pub mod toy;
pub mod train;

pub use hypergrad::{fd_hypergrad, hypergrad, inner_rollout, Hypergrad, Scheme, Stage, Trajectory};
pub use objective::{Objective, TransferProblem};
pub use step::{meta_step, theta_step, two_stage_step, BilevelConfig, InnerLr, StepReport, TrainState};
pub use train::{cache_source_features, evaluate, metrics_header, train, EpochMetrics, MetricsWriter, TrainConfig};
