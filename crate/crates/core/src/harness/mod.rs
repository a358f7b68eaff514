//! Desk-scale training harness: synthetic tasks, a decoder-only stack,
//! Adam training with metric rows, and multi-variant comparison.

mod compare;
mod model;
mod task;
mod train;

pub use compare::{
    check_comparable, compare, crafts_label, dodm_compare, mode_label, Comparison, RunResult,
    SummaryRow, SUMMARY_CSV_HEADER,
};
pub use model::{block_forward, model_forward, BlockWeights, ModelWeights, StackOutput};
pub use task::{make_task, Dataset, Example, TaskKind, TaskSpec, SEP};
pub use train::{
    diffusion_report, evaluate, metrics_csv, token_accuracy, train, Adam, Evaluation, MetricRow,
    TrainConfig, TrainOutcome, METRICS_CSV_HEADER,
};
