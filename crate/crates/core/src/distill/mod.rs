//! Student supervision, the student network, and the training loops.

mod student;
mod supervision;
mod train;

pub use student::{StudentConfig, StudentModel, StudentOutput, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use supervision::{combine_supervision, combine_supervision_with, one_hot_hard, total_loss, HardArgmax};
pub use train::{
    grid_targets, metrics_jsonl, run_incremental_step, train_base, BaseOutcome, EpochMetrics, StepOutcome,
    TrainConfig,
};
