//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use super::config::ExperimentConfig;
use super::eval::{evaluate_joint, Predictor};
use super::experiment::{load_data, run_experiment, teacher_for_seed};
use super::report::{load_reports, render_summary, SummaryFormat};
use super::stream;
use crate::data::TaskView;
use crate::error::Error;
use crate::nn::save_network;
use crate::oracle;

#[derive(Parser, Debug)]
#[command(name = "owm-lab", version, about = "Class-incremental learning with orthogonal weight modification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every seed of an experiment and write report.json and curve.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Jointly train a teacher network and save it as a checkpoint.
    Teacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for initialisation and batching (default: first configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the projector, gradient and stability suites.
    Oracle {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Summarise the report.json files in a directory and its subdirectories.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
    Table,
}

const USAGE: i32 = 2;
const FAILURE: i32 = 1;

fn load_config(path: &Path, err: &mut dyn Write) -> Result<ExperimentConfig, i32> {
    if !path.is_file() {
        let _ = writeln!(err, "error: config file {} not found", path.display());
        return Err(USAGE);
    }
    ExperimentConfig::load(path).map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        match e {
            Error::Config(_) | Error::Io { .. } => USAGE,
            _ => FAILURE,
        }
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match cli.command {
        Command::Run { config, seed, out: dir } => {
            let mut cfg = match load_config(&config, err) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                cfg = cfg.with_seeds(vec![s]);
            }
            let dir = dir.unwrap_or_else(|| {
                let stem = config.file_stem().map(|s| s.to_owned()).unwrap_or_else(|| "run".into());
                PathBuf::from("out").join(stem)
            });
            let report = match run_experiment(&cfg) {
                Ok(r) => r,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    return FAILURE;
                }
            };
            if let Err(e) = report.write(&dir) {
                let _ = writeln!(err, "error: {e}");
                return FAILURE;
            }
            for s in report.metrics.seeds.iter().filter(|s| !s.is_ok()) {
                let _ = writeln!(err, "seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or("unknown error"));
            }
            let reports = vec![(dir.join("report.json"), report)];
            let _ = write!(out, "{}", render_summary(&reports, SummaryFormat::Table));
            let _ = writeln!(out, "wrote {}", dir.display());
            if reports[0].1.metrics.aggregate.seeds_failed > 0 {
                FAILURE
            } else {
                0
            }
        }
        Command::Teacher { config, out: path, seed } => {
            let cfg = match load_config(&config, err) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let result = load_data(&cfg).and_then(|data| {
                let (net, losses) = teacher_for_seed(&cfg, &data, seed)?;
                save_network(&net, &path)?;
                let view = TaskView::whole(data.test.clone(), stream::JOINT_VIEW);
                let all: Vec<usize> = (0..data.test.class_count()).collect();
                let acc = evaluate_joint(&net, &view, &all, Predictor::Plain)?;
                Ok((acc, losses))
            });
            match result {
                Ok((acc, losses)) => {
                    let last = losses.last().copied().unwrap_or(f64::NAN);
                    let _ = writeln!(
                        out,
                        "teacher saved to {} (seed {seed}, final epoch loss {last:.4}, joint test accuracy {:.2}%)",
                        path.display(),
                        100.0 * acc
                    );
                    0
                }
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    FAILURE
                }
            }
        }
        Command::Oracle { seed } => {
            let checks = oracle::run_all(seed);
            for c in &checks {
                let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                0
            } else {
                FAILURE
            }
        }
        Command::Report { input, format } => {
            let format = match format {
                Format::Csv => SummaryFormat::Csv,
                Format::Json => SummaryFormat::Json,
                Format::Table => SummaryFormat::Table,
            };
            match load_reports(&input) {
                Ok(reports) => {
                    let _ = write!(out, "{}", render_summary(&reports, format));
                    0
                }
                Err(Error::Io { .. }) if !input.is_dir() => {
                    let _ = writeln!(err, "error: {} is not a directory", input.display());
                    USAGE
                }
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    FAILURE
                }
            }
        }
    }
}
