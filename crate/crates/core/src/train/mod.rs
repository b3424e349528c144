//! Training loop, method variants, optimizer and schedule, checkpoints,
//! metrics and routing traces.

mod checkpoint;
mod config;
mod metrics;
mod optim;
mod trace;
mod trainer;

pub use checkpoint::{checkpoint_dir, Checkpoint, Manifest, TensorEntry, BLOB_FILE, MANIFEST_FILE};
pub use config::{TeacherOptions, TeacherRouterMode, TrainConfig, Variant};
pub use metrics::{read_metrics, without_wall_clock, BreakdownMean, MetricsRecord, MetricsWriter};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use trace::{RoutingTrace, Snapshot};
pub use trainer::{
    evaluate, load_teacher, probe_ids, restore_run, run_training, run_training_with, train_teacher, train_teacher_with,
    warm_start, EvalReport, RestoredRun, RoutingMode, RunSummary, StepOutput, TeacherState, Trainer, METRICS_FILE,
    SUMMARY_FILE, TRACE_FILE,
};

#[cfg(test)]
mod tests;
