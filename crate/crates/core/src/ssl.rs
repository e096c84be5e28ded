//! Self-supervised proxy tasks: image transformations, the SSL weight
//! schedule, the OWM+SSL and OWM+SAA objectives and aggregated prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_cross_entropy, Gradients, LayerMeans, Network};
use crate::objective::LossComponents;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Multiples of 90° counter-clockwise.
    Rotation,
    /// Permutations of three colour channels in lexicographic order.
    ChannelPermutation,
}

/// Channel orders RGB, RBG, GRB, GBR, BRG, BGR.
const CHANNEL_PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// An indexed family of transforms `f_0..f_{M-1}`; `f_0` is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformSet {
    kind: TransformKind,
    count: usize,
}

impl TransformSet {
    pub fn rotation() -> Self {
        TransformSet {
            kind: TransformKind::Rotation,
            count: 4,
        }
    }

    pub fn channel_permutation() -> Self {
        TransformSet {
            kind: TransformKind::ChannelPermutation,
            count: 6,
        }
    }

    pub fn full(kind: TransformKind) -> Self {
        match kind {
            TransformKind::Rotation => Self::rotation(),
            TransformKind::ChannelPermutation => Self::channel_permutation(),
        }
    }

    /// The first `count` transforms of `kind` (`count = 1` is identity only).
    pub fn truncated(kind: TransformKind, count: usize) -> Result<Self> {
        let full = Self::full(kind).count;
        if count == 0 || count > full {
            return Err(Error::Config(format!("{kind:?} supports 1..={full} transforms, got {count}")));
        }
        Ok(TransformSet { kind, count })
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Index of the transform undoing `m` within the full group.
    pub fn inverse_index(&self, m: usize) -> usize {
        match self.kind {
            TransformKind::Rotation => (4 - m % 4) % 4,
            TransformKind::ChannelPermutation => {
                let p = CHANNEL_PERMUTATIONS[m];
                let mut inv = [0; 3];
                for (i, &c) in p.iter().enumerate() {
                    inv[c] = i;
                }
                CHANNEL_PERMUTATIONS.iter().position(|q| *q == inv).expect("group is closed")
            }
        }
    }

    fn check_index(&self, m: usize) -> Result<()> {
        if m >= Self::full(self.kind).count {
            return Err(Error::Config(format!("transform index {m} out of range for {:?}", self.kind)));
        }
        Ok(())
    }

    /// Applies `f_m` to every image of a `B×C×H×W` batch.
    pub fn apply_batch(&self, m: usize, x: &Tensor) -> Result<Tensor> {
        self.check_index(m)?;
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::Geometry(format!("expected B×C×H×W images, got {:?}", x.shape())));
        };
        if m == 0 {
            return Ok(x.clone());
        }
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        match self.kind {
            TransformKind::Rotation => {
                if h != w {
                    return Err(Error::Geometry(format!("rotation needs square images, got {h}x{w}")));
                }
                let n = h;
                for plane in 0..b * c {
                    let s = &src[plane * n * n..(plane + 1) * n * n];
                    let d = &mut out[plane * n * n..(plane + 1) * n * n];
                    for i in 0..n {
                        for j in 0..n {
                            // Source pixel of output (i, j) after m quarter turns CCW.
                            let (si, sj) = match m % 4 {
                                1 => (j, n - 1 - i),
                                2 => (n - 1 - i, n - 1 - j),
                                3 => (n - 1 - j, i),
                                _ => (i, j),
                            };
                            d[i * n + j] = s[si * n + sj];
                        }
                    }
                }
            }
            TransformKind::ChannelPermutation => {
                if c != 3 {
                    return Err(Error::Geometry(format!("channel permutation needs 3 channels, got {c}")));
                }
                let perm = CHANNEL_PERMUTATIONS[m];
                let plane = h * w;
                for bi in 0..b {
                    for (dst_c, &src_c) in perm.iter().enumerate() {
                        let s = &src[(bi * 3 + src_c) * plane..(bi * 3 + src_c + 1) * plane];
                        out[(bi * 3 + dst_c) * plane..(bi * 3 + dst_c + 1) * plane].copy_from_slice(s);
                    }
                }
            }
        }
        Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
    }
}

/// `f_m` on a single `C×H×W` image.
pub fn apply_transform(ts: &TransformSet, m: usize, x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    if x.rank() != 3 {
        return Err(Error::Geometry(format!("expected a C×H×W image, got {:?}", x.shape())));
    }
    ts.apply_batch(m, &x.reshape(&shape)?)?.reshape(x.shape())
}

/// SSL weight for task `t` of `tasks` (1-based): `(T − t)/(T − 1)·alpha_base`.
pub fn alpha_schedule(t: usize, tasks: usize, alpha_base: f64) -> Result<f64> {
    if tasks < 2 {
        return Err(Error::Config("alpha schedule needs at least two tasks".into()));
    }
    if t == 0 || t > tasks {
        return Err(Error::Config(format!("task index {t} outside 1..={tasks}")));
    }
    Ok((tasks - t) as f64 / (tasks - 1) as f64 * alpha_base)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ssl,
    Saa,
    Off,
}

/// How SAA combines per-copy predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Probability,
    Logit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub alpha_base: f64,
    pub strategy: Strategy,
    pub transforms: TransformSet,
    /// Divide the SAA classification sum by `M`.
    pub saa_normalize: bool,
    /// Absorb batch means of the transformed copies as well.
    pub absorb_transformed: bool,
    pub aggregate: Aggregate,
}

impl SslConfig {
    pub fn new(strategy: Strategy, transforms: TransformSet, alpha_base: f64) -> Result<Self> {
        if !(alpha_base >= 0.0) || !alpha_base.is_finite() {
            return Err(Error::Config(format!("alpha_base must be non-negative, got {alpha_base}")));
        }
        Ok(SslConfig {
            alpha_base,
            strategy,
            transforms,
            saa_normalize: false,
            absorb_transformed: strategy == Strategy::Saa,
            aggregate: Aggregate::Probability,
        })
    }
}

fn check_proxy_head(net: &Network, ts: &TransformSet) -> Result<()> {
    if net.proxy_count() < ts.len() {
        return Err(Error::Config(format!(
            "proxy head has {} outputs but the transform set has {}",
            net.proxy_count(),
            ts.len()
        )));
    }
    Ok(())
}

/// `CE(C(E(x)), y) + (α_t/M)·Σ_m CE(F(E(f_m(x))), m)`.
///
/// Copy `m = 0` is the untransformed batch and carries the classification
/// term. The network is left holding the batch means to absorb: those of the
/// untransformed batch, followed by one snapshot per further copy when
/// `absorb_transformed` is set.
pub fn ssl_loss_and_grads(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &SslConfig,
    alpha_t: f64,
    mask: Option<&[usize]>,
) -> Result<(LossComponents, Gradients)> {
    if cfg.strategy != Strategy::Ssl {
        return Err(Error::Config("ssl_loss_and_grads requires strategy ssl".into()));
    }
    let ts = &cfg.transforms;
    check_proxy_head(net, ts)?;
    let m_count = ts.len();
    let batch = labels.len();
    let weight = alpha_t / m_count as f64;
    // With zero weight the transformed copies contribute nothing.
    let copies = if alpha_t == 0.0 && !cfg.absorb_transformed { 1 } else { m_count };

    let mut grads = Gradients::zeros(net);
    let mut parts = LossComponents {
        proxy: Vec::with_capacity(m_count),
        ..Default::default()
    };
    let mut means: Vec<LayerMeans> = Vec::with_capacity(copies);
    for m in 0..copies {
        let xm = ts.apply_batch(m, x)?;
        let out = net.forward(&xm)?;
        means.push(net.mean_inputs().expect("forward records means"));
        let targets = vec![m; batch];
        let (pce, mut dproxy) = softmax_cross_entropy(&out.proxy_logits, &targets, None)?;
        dproxy.data_mut().iter_mut().for_each(|v| *v *= weight);
        parts.proxy.push(pce);
        let dclass = if m == 0 {
            let (ce, d) = softmax_cross_entropy(&out.class_logits, labels, mask)?;
            parts.classification = ce;
            d
        } else {
            Tensor::zeros(out.class_logits.shape())
        };
        let g = net.backward(&dclass, Some(&dproxy), None)?;
        grads.add_assign(&g)?;
    }
    parts.total = parts.classification + weight * parts.proxy.iter().sum::<f64>();
    if !cfg.absorb_transformed {
        means.truncate(1);
    }
    net.set_all_mean_inputs(means)?;
    Ok((parts, grads))
}

/// `Σ_m [CE(C(E(f_m(x))), y) + α_t·CE(F(E(f_m(x))), m)]`, the classification
/// sum optionally divided by `M`.
pub fn saa_loss_and_grads(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &SslConfig,
    alpha_t: f64,
    mask: Option<&[usize]>,
) -> Result<(LossComponents, Gradients)> {
    if cfg.strategy != Strategy::Saa {
        return Err(Error::Config("saa_loss_and_grads requires strategy saa".into()));
    }
    let ts = &cfg.transforms;
    check_proxy_head(net, ts)?;
    let m_count = ts.len();
    let batch = labels.len();
    let class_weight = if cfg.saa_normalize { 1.0 / m_count as f64 } else { 1.0 };

    let mut grads = Gradients::zeros(net);
    let mut parts = LossComponents {
        proxy: Vec::with_capacity(m_count),
        ..Default::default()
    };
    let mut means = Vec::with_capacity(m_count);
    let mut weighted_class = 0.0;
    for m in 0..m_count {
        let xm = ts.apply_batch(m, x)?;
        let out = net.forward(&xm)?;
        means.push(net.mean_inputs().expect("forward records means"));
        let (ce, mut dclass) = softmax_cross_entropy(&out.class_logits, labels, mask)?;
        let (pce, mut dproxy) = softmax_cross_entropy(&out.proxy_logits, &vec![m; batch], None)?;
        dclass.data_mut().iter_mut().for_each(|v| *v *= class_weight);
        dproxy.data_mut().iter_mut().for_each(|v| *v *= alpha_t);
        parts.classification += ce;
        weighted_class += class_weight * ce;
        parts.proxy.push(pce);
        let g = net.backward(&dclass, Some(&dproxy), None)?;
        grads.add_assign(&g)?;
    }
    parts.total = weighted_class + alpha_t * parts.proxy.iter().sum::<f64>();
    if !cfg.absorb_transformed {
        means.truncate(1);
    }
    net.set_all_mean_inputs(means)?;
    Ok((parts, grads))
}

/// Class scores averaged over the `M` transformed copies. With
/// [`Aggregate::Probability`] the per-copy (masked) softmax outputs are
/// averaged; with [`Aggregate::Logit`] the logits are averaged first.
pub fn saa_predict(
    net: &Network,
    x: &Tensor,
    ts: &TransformSet,
    mask: Option<&[usize]>,
    aggregate: Aggregate,
) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for m in 0..ts.len() {
        let logits = net.infer(&ts.apply_batch(m, x)?)?.class_logits;
        let term = match aggregate {
            Aggregate::Probability => softmax(&logits, mask)?,
            Aggregate::Logit => logits,
        };
        match &mut acc {
            None => acc = Some(term),
            Some(a) => a.axpy(1.0, &term)?,
        }
    }
    let mean = acc.expect("transform set is non-empty").scale(1.0 / ts.len() as f64)?;
    match aggregate {
        Aggregate::Probability => Ok(mean),
        Aggregate::Logit => softmax(&mean, mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn img(c: usize, n: usize, rng: &mut RngState) -> Tensor {
        Tensor::new(vec![c, n, n], (0..c * n * n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_transform() {
        let mut rng = RngState::new(1);
        let x = img(3, 4, &mut rng);
        for ts in [TransformSet::rotation(), TransformSet::channel_permutation()] {
            assert_eq!(apply_transform(&ts, 0, &x).unwrap(), x);
        }
    }

    #[test]
    fn quarter_turn_ccw() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = apply_transform(&TransformSet::rotation(), 1, &x).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn four_quarter_turns_close() {
        let mut rng = RngState::new(2);
        let x = img(2, 5, &mut rng);
        let ts = TransformSet::rotation();
        let mut y = x.clone();
        for _ in 0..4 {
            y = apply_transform(&ts, 1, &y).unwrap();
        }
        assert_eq!(y, x);
        // Composite indices agree with repeated quarter turns.
        let once = apply_transform(&ts, 1, &x).unwrap();
        let twice = apply_transform(&ts, 1, &once).unwrap();
        assert_eq!(apply_transform(&ts, 2, &x).unwrap(), twice);
        assert_eq!(
            apply_transform(&ts, 3, &x).unwrap(),
            apply_transform(&ts, 1, &twice).unwrap()
        );
    }

    #[test]
    fn rotation_needs_square() {
        let x = Tensor::zeros(&[1, 2, 3]);
        assert!(matches!(
            apply_transform(&TransformSet::rotation(), 1, &x),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn channel_order_is_lexicographic() {
        let x = Tensor::new(vec![3, 1, 1], vec![10.0, 20.0, 30.0]).unwrap();
        let ts = TransformSet::channel_permutation();
        let got: Vec<Vec<f64>> = (0..6).map(|m| apply_transform(&ts, m, &x).unwrap().into_data()).collect();
        let want = vec![
            vec![10.0, 20.0, 30.0],
            vec![10.0, 30.0, 20.0],
            vec![20.0, 10.0, 30.0],
            vec![20.0, 30.0, 10.0],
            vec![30.0, 10.0, 20.0],
            vec![30.0, 20.0, 10.0],
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(alpha_schedule(1, 5, 5.0).unwrap(), 5.0);
        assert_eq!(alpha_schedule(5, 5, 5.0).unwrap(), 0.0);
        assert!((alpha_schedule(3, 5, 0.75).unwrap() - 0.375).abs() < 1e-15);
        assert!(matches!(alpha_schedule(1, 1, 5.0), Err(Error::Config(_))));
        assert!(alpha_schedule(0, 5, 1.0).is_err());
    }

    #[test]
    fn schedule_is_nonincreasing() {
        for tasks in 2..=10 {
            let vals: Vec<f64> = (1..=tasks).map(|t| alpha_schedule(t, tasks, 2.5).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(*vals.last().unwrap(), 0.0);
        }
    }
}
