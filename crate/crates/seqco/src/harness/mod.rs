//! Experiment driver: configuration, training loop, evaluation, ablation
//! grid, checkpoints and logs.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod runlog;
pub mod train;

pub use ablate::{ablate, default_grid, AblationReport, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use evaluate::{evaluate, score_pairs, EvalReport, ModelSummarizer, Protocol, Summarizer};
pub use runlog::{EvalRecord, LogRecord, RunLog, StepRecord};
pub use train::{Observer, Silent, TrainEvent, TrainOutcome, Trainer};

/// JSON Schemas for the report files.
pub mod schema {
    pub const EVAL_REPORT: &str = include_str!("../../schemas/eval_report.schema.json");
    pub const ABLATION_REPORT: &str = include_str!("../../schemas/ablation_report.schema.json");
    pub const RUNLOG_RECORD: &str = include_str!("../../schemas/runlog_record.schema.json");
}
