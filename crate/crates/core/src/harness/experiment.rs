//! Multi-seed class-incremental runs.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use super::config::{DatasetSpec, ExperimentConfig, HeadMask, Method};
use super::eval::{evaluate_joint, Predictor};
use super::report::{
    aggregate, AccuracyMatrix, Budget, DatasetInfo, Metrics, Protocol, Report, RunInfo, SeedEntry, SeedTiming,
    TeacherMetrics, SCHEMA_VERSION,
};
use super::stream;
use super::train::{train_task, Optimizer, TaskContext};
use crate::data::synthetic::{gaussian_blobs, ring_centres};
use crate::data::{
    load_cifar, load_idx, split_classes, ChannelStats, CifarVariant, ClassOrder, LabeledImageSet, TaskSequence, TaskView,
};
use crate::distill::{train_teacher, TeacherBudget, TeacherExtractor};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::RngState;
use crate::ssl::alpha_schedule;

/// Environment variable bounding the number of seeds run in parallel.
pub const THREADS_ENV: &str = "OWM_LAB_THREADS";

/// Train and test sets shared by every seed of a run.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Arc<LabeledImageSet>,
    pub test: Arc<LabeledImageSet>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let normalise = |mut train: LabeledImageSet, mut test: LabeledImageSet, on: bool| -> Result<ExperimentData> {
        if on {
            let stats = ChannelStats::compute(&train);
            train.normalize(&stats)?;
            test.normalize(&stats)?;
        }
        Ok(ExperimentData {
            train: Arc::new(train),
            test: Arc::new(test),
        })
    };
    let data = match &cfg.dataset {
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
            normalize,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            let count = classes.unwrap_or(0).max(train.class_count()).max(test.class_count());
            normalise(train.with_class_count(count)?, test.with_class_count(count)?, *normalize)?
        }
        DatasetSpec::Cifar10 { train, test, normalize } | DatasetSpec::Cifar100 { train, test, normalize } => {
            let variant = if matches!(cfg.dataset, DatasetSpec::Cifar10 { .. }) {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100
            };
            let (train, _) = load_cifar(train, variant)?;
            let (test, _) = load_cifar(test, variant)?;
            normalise(train, test, *normalize)?
        }
        DatasetSpec::Blobs {
            classes,
            train_per_class,
            test_per_class,
            spread,
            radius,
            data_seed,
        } => {
            let centres = ring_centres(*classes, *radius);
            let root = RngState::new(*data_seed);
            let train = gaussian_blobs(&centres, *train_per_class, *spread, &mut root.derive(&[0]))?;
            let test = gaussian_blobs(&centres, *test_per_class, *spread, &mut root.derive(&[1]))?;
            normalise(train, test, false)?
        }
    };
    if data.train.class_count() != cfg.architecture.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the classifier has {} outputs",
            data.train.class_count(),
            cfg.architecture.classes
        )));
    }
    if data.train.image_shape() != cfg.architecture.input.as_slice() {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the architecture expects {:?}",
            data.train.image_shape(),
            cfg.architecture.input
        )));
    }
    Ok(data)
}

fn partitions_for_seed(cfg: &ExperimentConfig, class_count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let order = match (&cfg.partition, cfg.shuffle_classes) {
        (Some(p), _) => ClassOrder::Explicit(p.clone()),
        (None, true) => ClassOrder::Shuffled(RngState::new(seed).derive(&[stream::CLASS_ORDER])),
        (None, false) => ClassOrder::Contiguous,
    };
    split_classes(class_count, cfg.tasks, &order)
}

fn teacher_budget(cfg: &ExperimentConfig) -> Budget {
    let d = cfg.distill.as_ref();
    Budget {
        epochs: d.and_then(|d| d.teacher_epochs).unwrap_or(cfg.epochs_per_task),
        batch_size: d.and_then(|d| d.teacher_batch_size).unwrap_or(cfg.batch_size),
        learning_rate: d.and_then(|d| d.teacher_learning_rate).unwrap_or(cfg.learning_rate),
    }
}

/// Jointly trains the teacher for `seed` on the whole training set.
pub fn teacher_for_seed(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<(Network, Vec<f64>)> {
    let b = teacher_budget(cfg);
    let joint = TaskView::whole(data.train.clone(), stream::JOINT_VIEW);
    let spec = cfg.architecture.network_spec()?;
    let budget = TeacherBudget {
        epochs: b.epochs,
        batch_size: b.batch_size,
        learning_rate: b.learning_rate,
    };
    train_teacher(&joint, &spec, budget, &RngState::new(seed).derive(&[stream::TEACHER]))
}

fn load_teacher(cfg: &ExperimentConfig) -> Result<Option<TeacherExtractor>> {
    let Some(path) = cfg.distill.as_ref().and_then(|d| d.teacher_checkpoint.as_ref()) else {
        return Ok(None);
    };
    let teacher = TeacherExtractor::load(path)?;
    if teacher.network().spec() != &cfg.architecture.network_spec()? {
        return Err(Error::Config(format!(
            "teacher checkpoint {} was trained with a different architecture",
            path.display()
        )));
    }
    Ok(Some(teacher))
}

/// One full class-incremental run.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
    shared_teacher: Option<&TeacherExtractor>,
) -> Result<SeedEntry> {
    let root = RngState::new(seed);
    let partitions = partitions_for_seed(cfg, data.train.class_count(), seed)?;
    let (test, validation) = if cfg.validation_fraction > 0.0 {
        let (rest, val) = data
            .test
            .split_validation(cfg.validation_fraction, &mut root.derive(&[stream::VALIDATION]))?;
        (Arc::new(rest), Some(Arc::new(val)))
    } else {
        (data.test.clone(), None)
    };
    let seq = TaskSequence::new(data.train.clone(), test, partitions.clone())?;
    let val_seq = validation
        .map(|v| TaskSequence::new(data.train.clone(), v, partitions))
        .transpose()?;
    let tasks = seq.task_count();
    let all_classes = seq.seen_classes(tasks - 1);

    let mut owned_teacher = None;
    let mut teacher_metrics = None;
    if cfg.method == Method::OwmFd {
        let (teacher, losses) = match shared_teacher {
            Some(t) => (t.clone(), Vec::new()),
            None => {
                let (net, losses) = teacher_for_seed(cfg, data, seed)?;
                (TeacherExtractor::new(net), losses)
            }
        };
        let joint_view = TaskView::whole(seq.test_set().clone(), stream::JOINT_VIEW);
        let acc = evaluate_joint(teacher.network(), &joint_view, &all_classes, Predictor::Plain)?;
        teacher_metrics = Some(TeacherMetrics {
            joint_accuracy: acc,
            epoch_losses: losses,
        });
        owned_teacher = Some(teacher);
    }
    let lambda = cfg.distill.as_ref().map_or(0.0, |d| d.lambda);
    let teacher = owned_teacher.as_ref().map(|t| (t, lambda));

    let ssl = cfg.ssl_config()?;
    let predictor = match (&ssl, cfg.method) {
        (Some(s), Method::OwmSaa) => Predictor::Aggregated(&s.transforms, s.aggregate),
        _ => Predictor::Plain,
    };
    let spec = cfg.architecture.network_spec()?;
    let mut net = Network::init(&spec, &mut root.derive(&[stream::INIT]))?;
    let mut opt = Optimizer::for_method(cfg.method, &net, cfg.learning_rate)?;

    let mut joint_after_task = Vec::with_capacity(tasks);
    let mut validation_joint = val_seq.as_ref().map(|_| Vec::with_capacity(tasks));
    let mut epoch_losses = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let alpha_t = match &ssl {
            // A single task has no schedule; the base weight is used.
            Some(s) if tasks == 1 => s.alpha_base,
            Some(s) => alpha_schedule(t + 1, tasks, s.alpha_base)?,
            None => 0.0,
        };
        let mask = match cfg.head_mask {
            HeadMask::Cumulative => Some(seq.seen_classes(t)),
            HeadMask::Current => {
                let mut c = seq.classes(t).to_vec();
                c.sort_unstable();
                Some(c)
            }
            HeadMask::None => None,
        };
        let ctx = TaskContext {
            method: cfg.method,
            epochs: cfg.epochs_per_task,
            batch_size: cfg.batch_size,
            mask,
            absorb: cfg.absorb,
            alpha_t,
            ssl: ssl.as_ref(),
            teacher,
            task: t,
        };
        epoch_losses.push(train_task(&mut net, &mut opt, &seq.train_view(t), &ctx, &root)?);
        let seen = seq.seen_classes(t);
        joint_after_task.push(evaluate_joint(&net, &seq.seen_test_view(t), &seen, predictor)?);
        if let (Some(vs), Some(acc)) = (&val_seq, validation_joint.as_mut()) {
            acc.push(evaluate_joint(&net, &vs.seen_test_view(t), &seen, predictor)?);
        }
    }
    let per_task_after_final = (0..tasks)
        .map(|t| evaluate_joint(&net, &seq.test_view(t), &all_classes, predictor))
        .collect::<Result<Vec<_>>>()?;
    let final_joint = *joint_after_task.last().expect("at least one task");
    Ok(SeedEntry {
        seed,
        status: "ok".into(),
        error: None,
        accuracy: Some(AccuracyMatrix {
            seed,
            joint_after_task,
            per_task_after_final,
            final_joint,
        }),
        validation_joint_after_task: validation_joint,
        epoch_losses: Some(epoch_losses),
        teacher: teacher_metrics,
    })
}

fn thread_count(seeds: usize) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds).max(1)),
    }
}

/// Runs every seed (in parallel, each seed single-threaded) and assembles the
/// report. A failing seed is recorded in the report instead of aborting the
/// others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let data = load_data(cfg)?;
    let shared_teacher = load_teacher(cfg)?;
    let partitions_by_seed = cfg
        .seeds
        .iter()
        .map(|&s| partitions_for_seed(cfg, data.train.class_count(), s))
        .collect::<Result<Vec<_>>>()?;
    let threads = thread_count(cfg.seeds.len())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;
    let results: Vec<(SeedEntry, SeedTiming)> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let start = Instant::now();
                let entry = run_seed(cfg, &data, seed, shared_teacher.as_ref()).unwrap_or_else(|e| SeedEntry {
                    seed,
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    accuracy: None,
                    validation_joint_after_task: None,
                    epoch_losses: None,
                    teacher: None,
                });
                let timing = SeedTiming {
                    seed,
                    wall_time_seconds: start.elapsed().as_secs_f64(),
                };
                (entry, timing)
            })
            .collect()
    });
    let (seeds, timings): (Vec<SeedEntry>, Vec<SeedTiming>) = results.into_iter().unzip();
    let ssl = cfg.ssl.as_ref();
    let protocol = Protocol {
        tasks: cfg.tasks,
        partitions_by_seed,
        head_mask: format!("{:?}", cfg.head_mask).to_lowercase(),
        absorb: match cfg.absorb {
            super::config::AbsorbMode::PerBatch => "per_batch".into(),
            super::config::AbsorbMode::EndOfTask => "end_of_task".into(),
        },
        validation_fraction: cfg.validation_fraction,
        rotation: "counterclockwise".into(),
        channel_order: "lexicographic".into(),
        class_incremental_budget: Budget {
            epochs: cfg.epochs_per_task,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
        },
        teacher_budget: (cfg.method == Method::OwmFd).then(|| teacher_budget(cfg)),
        alpha_base: ssl.map(|s| s.alpha_base),
        lambda: cfg.distill.as_ref().map(|d| d.lambda),
    };
    let aggregate = aggregate(&seeds);
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        config_digest: cfg.digest().to_string(),
        metrics: Metrics {
            name: cfg.name.clone(),
            method: cfg.method.name().into(),
            dataset: DatasetInfo {
                train_provenance: data.train.provenance().into(),
                test_provenance: data.test.provenance().into(),
                train_samples: data.train.len(),
                test_samples: data.test.len(),
            },
            protocol,
            seeds,
            aggregate,
        },
        run: RunInfo {
            version: env!("CARGO_PKG_VERSION").into(),
            threads,
            timings,
        },
    })
}
