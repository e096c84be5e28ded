//! JSON reports, curve CSV and summary tables.
//!
//! A report has a `metrics` section that depends only on the config and the
//! seeds, and a `run` section with wall-clock times and thread counts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Accuracies of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub seed: u64,
    /// Accuracy over all classes seen so far, after each task.
    pub joint_after_task: Vec<f64>,
    /// Accuracy on each task's test samples after the last task, predicting
    /// over all classes.
    pub per_task_after_final: Vec<f64>,
    pub final_joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetrics {
    /// Test accuracy of the jointly trained teacher over all classes.
    pub joint_accuracy: f64,
    /// Mean loss per epoch; empty for a loaded checkpoint.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<AccuracyMatrix>,
    /// Joint accuracy on the validation split after each task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_joint_after_task: Option<Vec<f64>>,
    /// Mean loss per epoch, one list per task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_losses: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherMetrics>,
}

impl SeedEntry {
    pub fn is_ok(&self) -> bool {
        self.accuracy.is_some()
    }
}

/// Mean and sample standard deviation (absent for fewer than two values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Stat { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub spread: String,
    pub final_joint: Option<Stat>,
    pub joint_after_task: Vec<Stat>,
    pub per_task_after_final: Vec<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_joint: Option<Stat>,
}

/// Recomputes the aggregate block from per-seed entries.
pub fn aggregate(seeds: &[SeedEntry]) -> Aggregates {
    let ok: Vec<&AccuracyMatrix> = seeds.iter().filter_map(|s| s.accuracy.as_ref()).collect();
    let column = |f: &dyn Fn(&AccuracyMatrix) -> &[f64]| -> Vec<Stat> {
        let len = ok.iter().map(|m| f(m).len()).min().unwrap_or(0);
        (0..len)
            .filter_map(|i| Stat::of(&ok.iter().map(|m| f(m)[i]).collect::<Vec<_>>()))
            .collect()
    };
    let teacher: Vec<f64> = seeds
        .iter()
        .filter(|s| s.is_ok())
        .filter_map(|s| s.teacher.as_ref().map(|t| t.joint_accuracy))
        .collect();
    Aggregates {
        seeds_ok: ok.len(),
        seeds_failed: seeds.len() - ok.len(),
        spread: "sample_std".into(),
        final_joint: Stat::of(&ok.iter().map(|m| m.final_joint).collect::<Vec<_>>()),
        joint_after_task: column(&|m| &m.joint_after_task),
        per_task_after_final: column(&|m| &m.per_task_after_final),
        teacher_joint: Stat::of(&teacher),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub tasks: usize,
    pub partitions_by_seed: Vec<Vec<Vec<usize>>>,
    pub head_mask: String,
    pub absorb: String,
    pub validation_fraction: f64,
    pub rotation: String,
    pub channel_order: String,
    pub class_incremental_budget: Budget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_budget: Option<Budget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub train_provenance: String,
    pub test_provenance: String,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: Option<String>,
    pub method: String,
    pub dataset: DatasetInfo,
    pub protocol: Protocol,
    pub seeds: Vec<SeedEntry>,
    pub aggregate: Aggregates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub wall_time_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub version: String,
    pub threads: usize,
    pub timings: Vec<SeedTiming>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config_digest: String,
    pub metrics: Metrics,
    pub run: RunInfo,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The metrics section alone, as written inside the report.
    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Report> {
        let report: Report = serde_json::from_str(text).map_err(|e| Error::Data(format!("report: {e}")))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "report schema version {} not supported (expected {SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// Writes `report.json` and `curve.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json() + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("curve.csv");
        std::fs::write(&csv, curve_csv(&self.metrics.seeds)).map_err(|e| Error::io(&csv, e))
    }
}

/// One row per seed and task: `task_index,seed,joint_accuracy`.
pub fn curve_csv(seeds: &[SeedEntry]) -> String {
    let mut out = String::from("task_index,seed,joint_accuracy\n");
    for m in seeds.iter().filter_map(|s| s.accuracy.as_ref()) {
        for (t, acc) in m.joint_after_task.iter().enumerate() {
            writeln!(out, "{},{},{acc}", t + 1, m.seed).expect("write to string");
        }
    }
    out
}

/// `report.json` files at `dir` or one level below, in path order.
pub fn load_reports(dir: &Path) -> Result<Vec<(PathBuf, Report)>> {
    let mut paths = Vec::new();
    let direct = dir.join("report.json");
    if direct.is_file() {
        paths.push(direct);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    paths.extend(subdirs.into_iter().map(|d| d.join("report.json")).filter(|p| p.is_file()));
    if paths.is_empty() {
        return Err(Error::Data(format!("no report.json under {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok((p.clone(), Report::from_json(&text)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SummaryFormat {
    Csv,
    Json,
    Table,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    name: Option<&'a str>,
    method: &'a str,
    config_digest: &'a str,
    aggregate: Aggregates,
}

fn pct(s: &Stat) -> String {
    match s.std {
        Some(sd) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * sd),
        None => format!("{:.2}", 100.0 * s.mean),
    }
}

/// Renders method summaries; aggregates are recomputed from the seed
/// entries rather than read back.
pub fn render_summary(reports: &[(PathBuf, Report)], format: SummaryFormat) -> String {
    let rows: Vec<SummaryRow> = reports
        .iter()
        .map(|(_, r)| SummaryRow {
            name: r.metrics.name.as_deref(),
            method: &r.metrics.method,
            config_digest: &r.config_digest,
            aggregate: aggregate(&r.metrics.seeds),
        })
        .collect();
    match format {
        SummaryFormat::Json => serde_json::to_string_pretty(&rows).expect("summary serializes") + "\n",
        SummaryFormat::Csv => {
            let mut out = String::from("name,method,task_index,seeds,mean_joint_accuracy,std_joint_accuracy\n");
            for row in &rows {
                for (t, s) in row.aggregate.joint_after_task.iter().enumerate() {
                    let std = s.std.map(|v| v.to_string()).unwrap_or_default();
                    writeln!(
                        out,
                        "{},{},{},{},{},{std}",
                        row.name.unwrap_or(""),
                        row.method,
                        t + 1,
                        s.n,
                        s.mean
                    )
                    .expect("write to string");
                }
            }
            out
        }
        SummaryFormat::Table => {
            let tasks = rows.iter().map(|r| r.aggregate.joint_after_task.len()).max().unwrap_or(0);
            let mut header = vec!["run".to_string(), "method".into(), "seeds".into(), "final joint %".into()];
            header.extend((1..=tasks).map(|t| format!("after T{t}")));
            header.push("teacher %".into());
            let mut table = vec![header];
            for (row, (path, _)) in rows.iter().zip(reports) {
                let label = row.name.map(str::to_string).unwrap_or_else(|| {
                    path.parent()
                        .and_then(|p| p.file_name())
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default()
                });
                let mut cells = vec![
                    label,
                    row.method.to_string(),
                    row.aggregate.seeds_ok.to_string(),
                    row.aggregate.final_joint.as_ref().map(pct).unwrap_or_else(|| "-".into()),
                ];
                for t in 0..tasks {
                    cells.push(row.aggregate.joint_after_task.get(t).map(pct).unwrap_or_else(|| "-".into()));
                }
                cells.push(row.aggregate.teacher_joint.as_ref().map(pct).unwrap_or_else(|| "-".into()));
                table.push(cells);
            }
            let widths: Vec<usize> = (0..table[0].len())
                .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
                .collect();
            let mut out = String::new();
            for (i, r) in table.iter().enumerate() {
                let line: Vec<String> = r
                    .iter()
                    .zip(&widths)
                    .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                    .collect();
                writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
                if i == 0 {
                    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                    writeln!(out, "{}", rule.join("  ")).expect("write to string");
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let s = Stat::of(&[0.5, 0.6, 0.7]).unwrap();
        assert!((s.mean - 0.6).abs() < 1e-12);
        assert!((s.std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(Stat::of(&[0.4]).unwrap().std, None);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn failed_seeds_are_excluded() {
        let ok = SeedEntry {
            seed: 1,
            status: "ok".into(),
            error: None,
            accuracy: Some(AccuracyMatrix {
                seed: 1,
                joint_after_task: vec![1.0, 0.5],
                per_task_after_final: vec![0.2, 0.8],
                final_joint: 0.5,
            }),
            validation_joint_after_task: None,
            epoch_losses: None,
            teacher: None,
        };
        let failed = SeedEntry {
            seed: 2,
            status: "failed".into(),
            error: Some("boom".into()),
            accuracy: None,
            validation_joint_after_task: None,
            epoch_losses: None,
            teacher: None,
        };
        let agg = aggregate(&[ok.clone(), failed.clone()]);
        assert_eq!((agg.seeds_ok, agg.seeds_failed), (1, 1));
        assert_eq!(agg.final_joint.unwrap().mean, 0.5);
        assert_eq!(curve_csv(&[ok, failed]), "task_index,seed,joint_accuracy\n1,1,1\n2,1,0.5\n");
    }
}
