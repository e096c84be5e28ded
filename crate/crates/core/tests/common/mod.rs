#![allow(dead_code)]

use std::path::{Path, PathBuf};

use owm_lab::harness::ExperimentConfig;
use owm_lab::{RngState, Tensor};

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn preset_dir() -> PathBuf {
    crate_dir().join("../../presets/digits")
}

pub fn digits_dir() -> PathBuf {
    crate_dir().join("tests/fixtures/digits")
}

pub fn preset(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&preset_dir().join(format!("{name}.toml"))).expect("preset loads")
}

/// A four-class blob experiment that trains in well under a second.
pub fn blob_toml(method: &str, seeds: &[u64], extra: &str) -> String {
    let ssl = if method == "owm+ssl" || method == "owm+saa" {
        "[ssl]\nalpha_base = 1.0\ntransform_count = 1\n"
    } else {
        ""
    };
    let distill = if method == "owm+fd" {
        "[distill]\nlambda = 1.0\nteacher_epochs = 20\n"
    } else {
        ""
    };
    format!(
        r#"name = "blobs-{method}"
method = "{method}"
tasks = 2
epochs_per_task = 5
batch_size = 8
learning_rate = 0.05
seeds = {seeds:?}
{extra}
[dataset]
format = "blobs"
classes = 4
train_per_class = 40
test_per_class = 20
spread = 0.5

[architecture]
input = [2, 1, 1]
classes = 4
hidden = [8]
{ssl}{distill}"#
    )
}

pub fn blob_config(method: &str, seeds: &[u64], extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(&blob_toml(method, seeds, extra), Path::new(".")).expect("blob config parses")
}

pub fn random_images(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("finite draws")
}
