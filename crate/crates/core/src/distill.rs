//! Feature distillation from a jointly trained, frozen teacher extractor.

use std::path::Path;

use crate::data::TaskView;
use crate::error::{Error, Result};
use crate::nn::{load_network, mse, softmax_cross_entropy, Gradients, Network, NetworkSpec};
use crate::objective::{plain_loss_and_grads, LossComponents};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Loss weights used at full scale: 300 for SVHN / CIFAR-10, 100 for
/// CIFAR-100.
pub const LAMBDA_SVHN_CIFAR10: f64 = 300.0;
pub const LAMBDA_CIFAR100: f64 = 100.0;

/// A teacher network used only through its extractor, read-only.
#[derive(Clone, Debug)]
pub struct TeacherExtractor {
    net: Network,
}

impl TeacherExtractor {
    pub fn new(net: Network) -> Self {
        TeacherExtractor { net }
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_network(path).map(Self::new)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.net.features(x)
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

/// `CE(C(E(x)), y) + λ·MSE(E(x), E*(x))`, the MSE averaged over batch and
/// feature dimensions.
pub fn fd_loss_and_grads(
    student: &mut Network,
    teacher: &TeacherExtractor,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    mask: Option<&[usize]>,
) -> Result<(LossComponents, Gradients)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if teacher.feature_dim() != student.feature_dim() {
        return Err(Error::Config(format!(
            "teacher features ({}) and student features ({}) differ",
            teacher.feature_dim(),
            student.feature_dim()
        )));
    }
    let target = teacher.features(x)?;
    let out = student.forward(x)?;
    let (ce, dclass) = softmax_cross_entropy(&out.class_logits, labels, mask)?;
    let (feature_mse, mut dfeat) = mse(&out.features, &target)?;
    dfeat.data_mut().iter_mut().for_each(|v| *v *= lambda);
    let grads = student.backward(&dclass, None, Some(&dfeat))?;
    Ok((
        LossComponents {
            total: ce + lambda * feature_mse,
            classification: ce,
            proxy: Vec::new(),
            feature_mse,
        },
        grads,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Joint training with plain SGD over all classes at once. Returns the
/// network and the mean loss of every epoch.
pub fn train_teacher(
    joint: &TaskView,
    spec: &NetworkSpec,
    budget: TeacherBudget,
    rng: &RngState,
) -> Result<(Network, Vec<f64>)> {
    if joint.classes().iter().any(|&c| c >= spec.classes) {
        return Err(Error::Config(format!(
            "dataset classes {:?} exceed the architecture's {} outputs",
            joint.classes(),
            spec.classes
        )));
    }
    if budget.epochs == 0 {
        return Err(Error::Config("teacher needs at least one epoch".into()));
    }
    if joint.image_shape() != spec.input.as_slice() {
        return Err(Error::Config(format!(
            "dataset images {:?} do not match architecture input {:?}",
            joint.image_shape(),
            spec.input
        )));
    }
    let mut net = Network::init(spec, &mut rng.derive(&[crate::harness::stream::INIT]))?;
    let mut losses = Vec::with_capacity(budget.epochs);
    for epoch in 0..budget.epochs {
        let mut sum = 0.0;
        let plan = joint.batches(budget.batch_size, rng, epoch as u64)?;
        let count = plan.len();
        for batch in plan {
            let (x, y) = joint.gather(&batch)?;
            let (loss, grads) = plain_loss_and_grads(&mut net, &x, &y, None)?;
            net.take_mean_inputs()?;
            net.sgd_step(&grads, budget.learning_rate)?;
            sum += loss.total;
        }
        losses.push(sum / count as f64);
    }
    Ok((net, losses))
}
