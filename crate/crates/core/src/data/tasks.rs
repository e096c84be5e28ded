//! Class-incremental task splits and per-task views.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Stream label mixed into batch permutations.
const BATCH_STREAM: u64 = 0x62_6174_6368;

/// How classes are assigned to tasks.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassOrder {
    /// Blocks in label order: `{0,1}, {2,3}, …`.
    Contiguous,
    /// Blocks of a seed-shuffled label order.
    Shuffled(RngState),
    /// A given partition, validated for disjoint cover.
    Explicit(Vec<Vec<usize>>),
}

pub fn split_classes(class_count: usize, tasks: usize, order: &ClassOrder) -> Result<Vec<Vec<usize>>> {
    if tasks == 0 {
        return Err(Error::Config("task count must be at least 1".into()));
    }
    let parts = match order {
        ClassOrder::Explicit(parts) => {
            if parts.len() != tasks {
                return Err(Error::Config(format!(
                    "explicit partition has {} tasks, expected {tasks}",
                    parts.len()
                )));
            }
            parts.clone()
        }
        ClassOrder::Contiguous | ClassOrder::Shuffled(_) => {
            if !class_count.is_multiple_of(tasks) {
                return Err(Error::Config(format!(
                    "{class_count} classes do not split evenly into {tasks} tasks; give an explicit partition"
                )));
            }
            let mut labels: Vec<usize> = (0..class_count).collect();
            if let ClassOrder::Shuffled(rng) = order {
                rng.clone().shuffle(&mut labels);
            }
            labels.chunks(class_count / tasks).map(<[usize]>::to_vec).collect()
        }
    };
    validate_partition(&parts, class_count)?;
    Ok(parts)
}

/// Checks that `parts` are non-empty, pairwise disjoint and cover
/// `0..class_count`.
pub fn validate_partition(parts: &[Vec<usize>], class_count: usize) -> Result<()> {
    let mut seen = vec![false; class_count];
    for (t, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("task {t} has no classes")));
        }
        for &c in part {
            if c >= class_count {
                return Err(Error::Config(format!("task {t} names class {c} outside {class_count} classes")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!("class {c} appears in more than one task")));
            }
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("class {c} is not assigned to any task")));
    }
    Ok(())
}

/// A read-only window onto some samples of a set. Every [`gather`] call is
/// counted so tests can confirm which data a training loop touched.
///
/// [`gather`]: TaskView::gather
#[derive(Clone, Debug)]
pub struct TaskView {
    set: Arc<LabeledImageSet>,
    indices: Vec<usize>,
    classes: Vec<usize>,
    stream: u64,
    accesses: Arc<AtomicUsize>,
}

impl TaskView {
    fn new(set: Arc<LabeledImageSet>, classes: Vec<usize>, stream: u64) -> TaskView {
        let wanted: BTreeSet<usize> = classes.iter().copied().collect();
        let indices = (0..set.len()).filter(|&i| wanted.contains(&set.labels()[i])).collect();
        TaskView {
            set,
            indices,
            classes,
            stream,
            accesses: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// All samples of `set`. `stream` separates its batch order from task views.
    pub fn whole(set: Arc<LabeledImageSet>, stream: u64) -> TaskView {
        let classes = (0..set.class_count()).collect();
        TaskView::new(set, classes, stream)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Classes this view was built for, in partition order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn image_shape(&self) -> &[usize] {
        self.set.image_shape()
    }

    /// Number of `gather` calls so far (shared across clones).
    pub fn access_count(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }

    /// Images and labels at view positions `positions`.
    pub fn gather(&self, positions: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        self.accesses.fetch_add(1, Ordering::Relaxed);
        let mut idx = Vec::with_capacity(positions.len());
        for &p in positions {
            let &i = self
                .indices
                .get(p)
                .ok_or_else(|| Error::Data(format!("view position {p} out of range ({})", self.len())))?;
            idx.push(i);
        }
        self.set.gather(&idx)
    }

    /// View positions in consecutive chunks of `batch_size`.
    pub fn chunks(&self, batch_size: usize) -> Result<Vec<Vec<usize>>> {
        self.plan(batch_size, (0..self.len()).collect())
    }

    /// Shuffled batches for one epoch. The permutation depends only on the
    /// seed of `rng`, this view's stream and `epoch`; the final short batch
    /// is kept.
    pub fn batches(&self, batch_size: usize, rng: &RngState, epoch: u64) -> Result<Vec<Vec<usize>>> {
        let order = rng.derive(&[BATCH_STREAM, self.stream, epoch]).permutation(self.len());
        self.plan(batch_size, order)
    }

    fn plan(&self, batch_size: usize, order: Vec<usize>) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Data(format!("no samples for classes {:?}", self.classes)));
        }
        Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }
}

/// The ordered stream of tasks over shared train and test sets.
#[derive(Clone, Debug)]
pub struct TaskSequence {
    train: Arc<LabeledImageSet>,
    test: Arc<LabeledImageSet>,
    partitions: Vec<Vec<usize>>,
}

impl TaskSequence {
    pub fn new(train: Arc<LabeledImageSet>, test: Arc<LabeledImageSet>, partitions: Vec<Vec<usize>>) -> Result<Self> {
        if train.class_count() != test.class_count() {
            return Err(Error::Data(format!(
                "train set has {} classes, test set {}",
                train.class_count(),
                test.class_count()
            )));
        }
        if train.image_shape() != test.image_shape() {
            return Err(Error::Data(format!(
                "train images {:?} and test images {:?} differ in shape",
                train.image_shape(),
                test.image_shape()
            )));
        }
        validate_partition(&partitions, train.class_count())?;
        Ok(TaskSequence {
            train,
            test,
            partitions,
        })
    }

    pub fn task_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn partitions(&self) -> &[Vec<usize>] {
        &self.partitions
    }

    /// Classes of task `t` (0-based).
    pub fn classes(&self, t: usize) -> &[usize] {
        &self.partitions[t]
    }

    /// Sorted union of the classes of tasks `0..=t`.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.partitions[..=t].iter().flatten().copied().collect();
        set.into_iter().collect()
    }

    pub fn train_view(&self, t: usize) -> TaskView {
        TaskView::new(self.train.clone(), self.partitions[t].clone(), t as u64)
    }

    pub fn test_view(&self, t: usize) -> TaskView {
        TaskView::new(self.test.clone(), self.partitions[t].clone(), t as u64)
    }

    /// Test samples of every class seen up to and including task `t`.
    pub fn seen_test_view(&self, t: usize) -> TaskView {
        TaskView::new(self.test.clone(), self.seen_classes(t), t as u64)
    }

    pub fn train_set(&self) -> &Arc<LabeledImageSet> {
        &self.train
    }

    pub fn test_set(&self) -> &Arc<LabeledImageSet> {
        &self.test
    }
}
