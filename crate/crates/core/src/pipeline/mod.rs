//! The training loop: sampling, scoring, advantage estimation and policy
//! update, plus evaluation, metrics and checkpoints.

mod eval;
mod metrics;
mod trainer;

pub use eval::{evaluate, evaluate_policy, load_policy, EvalReport};
pub use metrics::{read_metrics, write_plot_data, MetricsLog, RunHeader, StepMetrics, StepTiming};
pub use trainer::{load_run_data, train, RunSummary, TrainState, Trainer};
