//! The per-task training loop.

use super::config::{AbsorbMode, Method};
use crate::data::TaskView;
use crate::distill::{fd_loss_and_grads, TeacherExtractor};
use crate::error::{Error, Result};
use crate::nn::{Gradients, LayerMeans, Network};
use crate::objective::{plain_loss_and_grads, LossComponents};
use crate::owm::OwmOptimizerState;
use crate::rng::RngState;
use crate::ssl::{saa_loss_and_grads, ssl_loss_and_grads, SslConfig};
use crate::tensor::Tensor;

/// Parameter update rule for one run.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { learning_rate: f64 },
    Owm(OwmOptimizerState),
}

impl Optimizer {
    pub fn for_method(method: Method, net: &Network, learning_rate: f64) -> Result<Self> {
        if method.uses_owm() {
            Ok(Optimizer::Owm(OwmOptimizerState::new(net, learning_rate)?))
        } else {
            Ok(Optimizer::Sgd { learning_rate })
        }
    }

    pub fn step(&self, net: &mut Network, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Sgd { learning_rate } => net.sgd_step(grads, *learning_rate),
            Optimizer::Owm(state) => state.step(net, grads),
        }
    }

    pub fn owm_state(&self) -> Option<&OwmOptimizerState> {
        match self {
            Optimizer::Owm(s) => Some(s),
            Optimizer::Sgd { .. } => None,
        }
    }
}

/// Everything `train_task` needs besides the network, optimizer and data.
#[derive(Clone, Debug)]
pub struct TaskContext<'a> {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// Classes allowed in the training softmax; `None` for all outputs.
    pub mask: Option<Vec<usize>>,
    pub absorb: AbsorbMode,
    /// SSL weight for this task.
    pub alpha_t: f64,
    pub ssl: Option<&'a SslConfig>,
    pub teacher: Option<(&'a TeacherExtractor, f64)>,
    /// Task index (0-based), used in diagnostics.
    pub task: usize,
}

fn method_loss(net: &mut Network, x: &Tensor, y: &[usize], ctx: &TaskContext) -> Result<(LossComponents, Gradients)> {
    let mask = ctx.mask.as_deref();
    match ctx.method {
        Method::Sgd | Method::Owm => plain_loss_and_grads(net, x, y, mask),
        Method::OwmSsl => {
            let cfg = ctx.ssl.ok_or_else(|| Error::Config("owm+ssl needs SSL settings".into()))?;
            ssl_loss_and_grads(net, x, y, cfg, ctx.alpha_t, mask)
        }
        Method::OwmSaa => {
            let cfg = ctx.ssl.ok_or_else(|| Error::Config("owm+saa needs SSL settings".into()))?;
            saa_loss_and_grads(net, x, y, cfg, ctx.alpha_t, mask)
        }
        Method::OwmFd => {
            let (teacher, lambda) = ctx.teacher.ok_or_else(|| Error::Config("owm+fd needs a teacher".into()))?;
            fd_loss_and_grads(net, teacher, x, y, lambda, mask)
        }
    }
}

/// Batch means for end-of-task absorption, one snapshot per transformed
/// copy when the SSL settings ask for it.
fn absorption_means(net: &Network, x: &Tensor, ssl: Option<&SslConfig>) -> Result<Vec<LayerMeans>> {
    match ssl {
        Some(cfg) if cfg.absorb_transformed => (0..cfg.transforms.len())
            .map(|m| net.batch_means(&cfg.transforms.apply_batch(m, x)?))
            .collect(),
        _ => Ok(vec![net.batch_means(x)?]),
    }
}

/// Trains on one task's view and returns the mean loss of every epoch. The
/// loop only ever sees `view`, so earlier tasks' data is out of reach.
pub fn train_task(
    net: &mut Network,
    opt: &mut Optimizer,
    view: &TaskView,
    ctx: &TaskContext,
    rng: &RngState,
) -> Result<Vec<f64>> {
    if ctx.method.uses_owm() != matches!(opt, Optimizer::Owm(_)) {
        return Err(Error::Config(format!(
            "method {} does not match the optimizer",
            ctx.method.name()
        )));
    }
    let mut losses = Vec::with_capacity(ctx.epochs);
    for epoch in 0..ctx.epochs {
        let plan = view.batches(ctx.batch_size, rng, epoch as u64)?;
        let mut sum = 0.0;
        for batch in &plan {
            let (x, y) = view.gather(batch)?;
            let (loss, grads) = method_loss(net, &x, &y, ctx)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical {
                    op: "train_task",
                    detail: format!("loss became {} in task {} epoch {epoch}", loss.total, ctx.task),
                });
            }
            opt.step(net, &grads)?;
            let means = net.take_all_mean_inputs()?;
            if let (Optimizer::Owm(state), AbsorbMode::PerBatch) = (&mut *opt, ctx.absorb) {
                for m in &means {
                    state.absorb_means(m)?;
                }
            }
            sum += loss.total;
        }
        losses.push(sum / plan.len() as f64);
    }
    if let (Optimizer::Owm(state), AbsorbMode::EndOfTask) = (opt, ctx.absorb) {
        for batch in view.chunks(ctx.batch_size)? {
            let (x, _) = view.gather(&batch)?;
            for m in absorption_means(net, &x, ctx.ssl)? {
                state.absorb_means(&m)?;
            }
        }
    }
    Ok(losses)
}
