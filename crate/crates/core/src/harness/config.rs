//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::nn::Architecture;
use crate::ssl::{Aggregate, SslConfig, Strategy, TransformKind, TransformSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "owm")]
    Owm,
    #[serde(rename = "owm+ssl")]
    OwmSsl,
    #[serde(rename = "owm+saa")]
    OwmSaa,
    #[serde(rename = "owm+fd")]
    OwmFd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Owm => "owm",
            Method::OwmSsl => "owm+ssl",
            Method::OwmSaa => "owm+saa",
            Method::OwmFd => "owm+fd",
        }
    }

    pub fn uses_owm(self) -> bool {
        self != Method::Sgd
    }

    pub fn needs_ssl(self) -> bool {
        matches!(self, Method::OwmSsl | Method::OwmSaa)
    }
}

/// Which classifier logits enter the training softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMask {
    /// Classes of every task seen so far.
    #[default]
    Cumulative,
    /// Classes of the current task only.
    Current,
    /// All outputs.
    None,
}

/// When projectors absorb batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsorbMode {
    /// After every optimisation step.
    #[default]
    PerBatch,
    /// In one pass over the task's data once its training is finished.
    EndOfTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Class count when the files do not contain the highest label.
        #[serde(default)]
        classes: Option<usize>,
        #[serde(default)]
        normalize: bool,
    },
    Cifar10 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default = "yes")]
        normalize: bool,
    },
    Cifar100 {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default = "yes")]
        normalize: bool,
    },
    /// 2-D Gaussian blobs on a ring, generated from `data_seed`.
    Blobs {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        data_seed: u64,
    },
}

fn yes() -> bool {
    true
}

fn default_spread() -> f64 {
    0.3
}

fn default_radius() -> f64 {
    3.0
}

impl DatasetSpec {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DatasetSpec::Cifar10 { train, test, .. } | DatasetSpec::Cifar100 { train, test, .. } => {
                train.iter_mut().chain(test.iter_mut()).for_each(fix);
            }
            DatasetSpec::Blobs { .. } => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSection {
    pub alpha_base: f64,
    #[serde(default = "rotation")]
    pub transforms: TransformKind,
    /// Use only the first `transform_count` transforms of the family.
    #[serde(default)]
    pub transform_count: Option<usize>,
    #[serde(default)]
    pub saa_normalize: bool,
    /// Defaults to false under owm+ssl and true under owm+saa.
    #[serde(default)]
    pub absorb_transformed: Option<bool>,
    #[serde(default)]
    pub aggregate: Aggregate,
}

fn rotation() -> TransformKind {
    TransformKind::Rotation
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub lambda: f64,
    /// Checkpoint of a jointly trained teacher; when absent a teacher is
    /// trained per seed before the student run.
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Teacher budget; each defaults to the class-incremental value.
    #[serde(default)]
    pub teacher_epochs: Option<usize>,
    #[serde(default)]
    pub teacher_batch_size: Option<usize>,
    #[serde(default)]
    pub teacher_learning_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub method: Method,
    pub tasks: usize,
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub head_mask: HeadMask,
    #[serde(default)]
    pub absorb: AbsorbMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub shuffle_classes: bool,
    /// Explicit class partition, one list per task.
    #[serde(default)]
    pub partition: Option<Vec<Vec<usize>>>,
    /// Share of the test set held out for validation.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    pub dataset: DatasetSpec,
    pub architecture: Architecture,
    #[serde(default)]
    pub ssl: Option<SslSection>,
    #[serde(default)]
    pub distill: Option<DistillSection>,
    #[serde(skip)]
    digest: String,
}

fn default_epochs() -> usize {
    10
}

fn default_batch() -> usize {
    32
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_validation() -> f64 {
    0.2
}

impl ExperimentConfig {
    /// Parses and validates a config; relative paths are taken from `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        // Digest over the parsed form, before paths are made absolute, so it
        // does not depend on where the config lives.
        cfg.digest = sha256_hex(&[cfg.canonical_text().as_bytes()]);
        cfg.dataset.resolve(base_dir);
        if let Some(d) = cfg.distill.as_mut() {
            if let Some(p) = d.teacher_checkpoint.as_mut() {
                if p.is_relative() {
                    *p = base_dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every field with defaults filled in, as TOML.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical text.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.tasks == 0 {
            return bad("tasks must be at least 1".into());
        }
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return bad("epochs_per_task and batch_size must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        if self.method.needs_ssl() != self.ssl.is_some() {
            return bad(format!(
                "method {} {} an [ssl] block",
                self.method.name(),
                if self.method.needs_ssl() { "requires" } else { "does not take" }
            ));
        }
        if (self.method == Method::OwmFd) != self.distill.is_some() {
            return bad(format!(
                "method {} {} a [distill] block",
                self.method.name(),
                if self.method == Method::OwmFd { "requires" } else { "does not take" }
            ));
        }
        if let Some(d) = &self.distill {
            if !(d.lambda >= 0.0) || !d.lambda.is_finite() {
                return bad(format!("distill.lambda must be non-negative, got {}", d.lambda));
            }
            if d.teacher_epochs == Some(0) || d.teacher_batch_size == Some(0) {
                return bad("teacher budget values must be at least 1".into());
            }
            if d.teacher_learning_rate.is_some_and(|lr| !(lr > 0.0)) {
                return bad("distill.teacher_learning_rate must be positive".into());
            }
        }
        if let Some(cfg) = self.ssl_config()? {
            if self.architecture.proxy_outputs < cfg.transforms.len() {
                return bad(format!(
                    "architecture.proxy_outputs = {} is smaller than the {} transforms",
                    self.architecture.proxy_outputs,
                    cfg.transforms.len()
                ));
            }
        }
        if let DatasetSpec::Blobs {
            classes,
            train_per_class,
            test_per_class,
            spread,
            ..
        } = &self.dataset
        {
            if *classes == 0 || *train_per_class == 0 || *test_per_class == 0 || !(*spread >= 0.0) {
                return bad("blobs need positive classes, sample counts and a non-negative spread".into());
            }
        }
        self.architecture.network_spec()?;
        Ok(())
    }

    /// The SSL settings implied by method and `[ssl]` block.
    pub fn ssl_config(&self) -> Result<Option<SslConfig>> {
        let Some(s) = &self.ssl else { return Ok(None) };
        let strategy = match self.method {
            Method::OwmSsl => Strategy::Ssl,
            Method::OwmSaa => Strategy::Saa,
            _ => return Ok(None),
        };
        let transforms = match s.transform_count {
            Some(n) => TransformSet::truncated(s.transforms, n)?,
            None => TransformSet::full(s.transforms),
        };
        let mut cfg = SslConfig::new(strategy, transforms, s.alpha_base)?;
        cfg.saa_normalize = s.saa_normalize;
        if let Some(a) = s.absorb_transformed {
            cfg.absorb_transformed = a;
        }
        cfg.aggregate = s.aggregate;
        Ok(Some(cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
method = "owm"
tasks = 2
learning_rate = 0.1
[dataset]
format = "blobs"
classes = 4
train_per_class = 10
test_per_class = 5
[architecture]
input = [2, 1, 1]
hidden = [8]
classes = 4
"#;

    #[test]
    fn defaults_and_digest() {
        let cfg = ExperimentConfig::from_toml(BASE, Path::new(".")).unwrap();
        assert_eq!(cfg.epochs_per_task, 10);
        assert_eq!(cfg.head_mask, HeadMask::Cumulative);
        assert_eq!(cfg.absorb, AbsorbMode::PerBatch);
        assert_eq!(cfg.digest().len(), 64);
        // Whitespace and key order do not change the digest.
        let shuffled = BASE.replace("tasks = 2\nlearning_rate = 0.1", "learning_rate   = 0.1\ntasks = 2");
        let again = ExperimentConfig::from_toml(&shuffled, Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg.digest(), again.digest());
    }

    #[test]
    fn method_blocks_must_match() {
        let ssl = BASE.replace("\"owm\"", "\"owm+ssl\"");
        assert!(matches!(ExperimentConfig::from_toml(&ssl, Path::new(".")), Err(Error::Config(_))));
        let with_block = format!("{ssl}[ssl]\nalpha_base = 1.0\n");
        assert!(ExperimentConfig::from_toml(&with_block, Path::new(".")).is_ok());
        let stray = format!("{BASE}[distill]\nlambda = 1.0\n");
        assert!(ExperimentConfig::from_toml(&stray, Path::new(".")).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let lr = BASE.replace("learning_rate = 0.1", "learning_rate = 0.0");
        assert!(ExperimentConfig::from_toml(&lr, Path::new(".")).is_err());
        let unknown = BASE.replace("tasks = 2", "tasks = 2\nmomentum = 0.9");
        assert!(ExperimentConfig::from_toml(&unknown, Path::new(".")).is_err());
        let ssl6 = BASE.replace("\"owm\"", "\"owm+ssl\"")
            + "[ssl]\nalpha_base = 1.0\ntransforms = \"channel_permutation\"\n";
        assert!(ExperimentConfig::from_toml(&ssl6, Path::new(".")).is_err());
    }
}
