//! Experiment orchestration: configuration, the per-task training loop,
//! evaluation, multi-seed runs, reports and the command-line front end.

pub mod cli;
mod config;
mod eval;
mod experiment;
mod report;
mod train;

pub use config::{AbsorbMode, DatasetSpec, DistillSection, ExperimentConfig, HeadMask, Method, SslSection};
pub use eval::{evaluate_joint, predict, Predictor};
pub use experiment::{load_data, run_experiment, run_seed, teacher_for_seed, ExperimentData, THREADS_ENV};
pub use report::{
    aggregate, curve_csv, load_reports, render_summary, AccuracyMatrix, Aggregates, Report, SeedEntry, Stat,
    SummaryFormat,
};
pub use train::{train_task, Optimizer, TaskContext};

/// Labels for the independent random streams derived from a seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const CLASS_ORDER: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const TEACHER: u64 = 4;
    /// Stream of the joint (all-class) training view.
    pub const JOINT_VIEW: u64 = u64::MAX;
}
