//! Grounding metrics, evaluation reports and the ablation harness.

mod ablation;
mod metrics;
mod report;

pub use ablation::{
    ablation_suite, mean_std, run_cell, sweep_configs, train_and_evaluate, variant_configs,
    AblationTable, CellResult, Splits, SWEEP_BETA, SWEEP_LAMBDA, SWEEP_M,
};
pub use metrics::{accuracy_at_iou, bpg, ubp};
pub use report::{evaluate, predict_all, CategoryStats, EvalReport, Prediction};
