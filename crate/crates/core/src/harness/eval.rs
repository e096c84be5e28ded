//! Joint accuracy over the classes learned so far.

use crate::data::TaskView;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::ssl::{saa_predict, Aggregate, TransformSet};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

/// How class scores are produced at test time.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Plain,
    /// Scores averaged over transformed copies (owm+saa).
    Aggregated(&'a TransformSet, Aggregate),
}

/// Arg-max over the `allowed` classes of each row; ties go to the lower
/// class index.
fn masked_argmax(scores: &Tensor, allowed: &[usize]) -> Result<Vec<usize>> {
    let (rows, cols) = scores.dims2()?;
    if let Some(&c) = allowed.iter().find(|&&c| c >= cols) {
        return Err(Error::Data(format!("class {c} outside {cols} outputs")));
    }
    let mut sorted = allowed.to_vec();
    sorted.sort_unstable();
    Ok((0..rows)
        .map(|r| {
            let row = scores.row(r);
            let mut best = sorted[0];
            for &c in &sorted[1..] {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Predicted classes for a batch, restricted to `allowed`.
pub fn predict(net: &Network, x: &Tensor, allowed: &[usize], predictor: Predictor) -> Result<Vec<usize>> {
    if allowed.is_empty() {
        return Err(Error::Data("prediction needs at least one allowed class".into()));
    }
    let scores = match predictor {
        Predictor::Plain => net.infer(x)?.class_logits,
        Predictor::Aggregated(ts, agg) => saa_predict(net, x, ts, Some(allowed), agg)?,
    };
    masked_argmax(&scores, allowed)
}

/// Fraction of `view` classified correctly when predictions range over
/// `allowed`.
pub fn evaluate_joint(net: &Network, view: &TaskView, allowed: &[usize], predictor: Predictor) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in view.chunks(EVAL_CHUNK)? {
        let (x, y) = view.gather(&chunk)?;
        let pred = predict(net, &x, allowed, predictor)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / view.len() as f64)
}
