//! Few-shot evaluation: AUPRC, early-stopped fine-tuning, the paired
//! method x task x k x repeat experiment matrix, and rank aggregation.

mod benchmark;
pub mod finetune;
mod metrics;
mod report;

pub use benchmark::{
    evaluate_cell, instance_seed, instance_set, read_records, run_benchmark, run_seed,
    write_records, BenchmarkConfig, EvalRecord, Method, MethodSpec, RECORD_HEADER,
};
pub use finetune::{
    finetune, finetune_on_instances, sample_instances, FinetuneConfig, FinetuneOutcome,
};
pub use metrics::auprc;
pub use report::{
    aggregate, average_ranks, rank_chart_svg, welch_p_value, write_rank_csv, write_report_json,
    AverageRank, CellSummary, Report, Significance,
};
