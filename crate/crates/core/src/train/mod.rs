//! Optimisation loop, schedules, checkpoints and named run variants.

mod checkpoint;
mod optim;
mod run;
mod schedule;
mod step;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TensorEntry, CHECKPOINT_VERSION};
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};
pub use run::{
    checkpoint_path, lab_data, lab_model, metrics_path, read_metrics, run_stage, DataSubset, MetricsRow, RunConfig,
    RunOptions, RunResult, Stage, StageInputs, METRICS_HEADER, PRESETS,
};
pub use schedule::ScheduleConfig;
pub use step::{train_step, StepObjective, StepOutcome};
