//! Loss bookkeeping shared by every training objective.

use serde::Serialize;

use crate::error::Result;
use crate::nn::{softmax_cross_entropy, Gradients, Network};
use crate::tensor::Tensor;

/// Unweighted loss terms of one optimisation step, plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub total: f64,
    /// Classification cross-entropy. Under SAA this is the sum over copies.
    pub classification: f64,
    /// Proxy-task cross-entropy per transform index (empty when unused).
    pub proxy: Vec<f64>,
    /// Feature-matching MSE (zero when unused).
    pub feature_mse: f64,
}

/// Cross-entropy on the classifier head only.
pub fn plain_loss_and_grads(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    mask: Option<&[usize]>,
) -> Result<(LossComponents, Gradients)> {
    let out = net.forward(x)?;
    let (ce, dclass) = softmax_cross_entropy(&out.class_logits, labels, mask)?;
    let grads = net.backward(&dclass, None, None)?;
    Ok((
        LossComponents {
            total: ce,
            classification: ce,
            ..Default::default()
        },
        grads,
    ))
}
