//! Experiment orchestration: configuration, seeded training runs, metrics and checkpoints.

mod checkpoint;
mod config;
mod metrics;
mod run;
mod state;
mod studies;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, ArrayEntry, Checkpoint, LayerEntry, LayerKind, Manifest,
    StateEntry, CLEAN_TOL, REPAIR_TOL,
};
pub use config::{ExperimentConfig, LrSchedule, OptimizerKind, Task};
pub use metrics::{compression_ratio, read_metrics, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use run::{
    adapt_network, build_task, compare, run_experiment, threads_from_env, RunOutcome, TaskSetup,
    THREADS_ENV,
};
pub use state::{step_layer, LayerState, StepSettings};
pub use studies::*;
