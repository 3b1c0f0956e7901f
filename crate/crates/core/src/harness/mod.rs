//! Experiment harness: configuration, per-session training, metrics,
//! artifacts and table verification.

pub mod audit;
pub mod config;
pub mod experiment;
pub mod golden;
pub mod metrics;
pub mod report;
pub mod trainer;

pub use audit::AuditLog;
pub use config::{Ablation, DatasetSource, ExperimentConfig, PhaseSchedule, PrototypeSource, ENV_OUT, ENV_SEED};
pub use experiment::{
    build_stream, run_experiment, run_experiment_with, Checkpoint, RunOptions, RunPaths, CHECKPOINT_FORMAT_VERSION,
};
pub use metrics::{average_accuracy, evaluate, performance_drop, RunReport, SessionMetrics};
pub use trainer::{run_incremental_session, train_base_session, train_epoch, IncrementalOutcome, TrainContext};
