//! Orthogonal weight modification.
//!
//! Each projected layer keeps a projector `P` over its bias-augmented input
//! space. Gradients are right-multiplied by `P` so that the layer's response
//! to previously absorbed inputs stays (approximately) fixed. `P` is grown
//! with the recursive least-squares rank-1 update
//!
//! ```text
//! k = P x̄ / (1 + x̄ᵀ P x̄)
//! P ← P − k x̄ᵀ P
//! ```
//!
//! which, started from the identity, equals `I − A(AᵀA + I)⁻¹Aᵀ` for the
//! absorbed means `A` (ridge constant 1).

use crate::error::{Error, Result};
use crate::linalg::ridge_solve;
use crate::nn::checkpoint::{decode_network, encode_network, encode_tensor, put_u32, put_u64, Reader};
use crate::nn::{Gradients, Layer, LayerMeans, Network, ParamGrad};
use crate::tensor::{matmul, Tensor};

/// Ridge constant implied by the recursive update.
pub const RECURSIVE_RIDGE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    p: Tensor,
    ridge_epsilon: f64,
    batches_absorbed: u64,
}

impl Projector {
    pub fn identity(dim: usize) -> Self {
        Projector {
            p: Tensor::eye(dim),
            ridge_epsilon: RECURSIVE_RIDGE,
            batches_absorbed: 0,
        }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn ridge_epsilon(&self) -> f64 {
        self.ridge_epsilon
    }

    pub fn batches_absorbed(&self) -> u64 {
        self.batches_absorbed
    }

    /// One recursive update with an (already bias-augmented) batch mean.
    pub fn update(&mut self, mean_input: &[f64]) -> Result<()> {
        let n = self.dim();
        if mean_input.len() != n {
            return Err(Error::dim("projector_update", &[n], &[mean_input.len()]));
        }
        if mean_input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                op: "projector_update",
                detail: "non-finite mean input".into(),
            });
        }
        let pd = self.p.data_mut();
        let px: Vec<f64> = (0..n)
            .map(|i| pd[i * n..(i + 1) * n].iter().zip(mean_input).map(|(a, b)| a * b).sum())
            .collect();
        let denom = 1.0 + mean_input.iter().zip(&px).map(|(a, b)| a * b).sum::<f64>();
        // P is symmetric, so x̄ᵀP is (P x̄)ᵀ.
        for i in 0..n {
            let ki = px[i] / denom;
            if ki == 0.0 {
                continue;
            }
            for (pij, pxj) in pd[i * n..(i + 1) * n].iter_mut().zip(&px) {
                *pij -= ki * pxj;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (pd[i * n + j] + pd[j * n + i]);
                pd[i * n + j] = avg;
                pd[j * n + i] = avg;
            }
        }
        self.p.ensure_finite("projector_update")?;
        self.batches_absorbed += 1;
        Ok(())
    }
}

/// `I − A(AᵀA + εI)⁻¹Aᵀ` from the columns of `inputs` (`n×m`).
pub fn projector_direct(inputs: &Tensor, ridge_epsilon: f64) -> Result<Tensor> {
    let (n, _) = inputs.dims2()?;
    let at = inputs.transpose()?;
    let gram = matmul(&at, inputs)?;
    let x = ridge_solve(&gram, ridge_epsilon, &at)?;
    let correction = matmul(inputs, &x)?;
    Tensor::eye(n).sub(&correction)
}

/// Direct projector over explicit column vectors; no columns gives `I`.
pub fn projector_direct_from_columns(dim: usize, columns: &[Vec<f64>], ridge_epsilon: f64) -> Result<Tensor> {
    if columns.is_empty() {
        if !(ridge_epsilon > 0.0) {
            return Err(Error::Contract(format!("ridge constant must be positive, got {ridge_epsilon}")));
        }
        return Ok(Tensor::eye(dim));
    }
    let m = columns.len();
    let mut data = vec![0.0; dim * m];
    for (j, col) in columns.iter().enumerate() {
        if col.len() != dim {
            return Err(Error::dim("projector_direct", &[dim], &[col.len()]));
        }
        for (i, &v) in col.iter().enumerate() {
            data[i * m + j] = v;
        }
    }
    projector_direct(&Tensor::new(vec![dim, m], data)?, ridge_epsilon)
}

/// `dw · P`. A projector that has absorbed nothing is exactly the identity,
/// so the gradient is returned untouched.
pub fn project_gradient(proj: &Projector, dw: &Tensor) -> Result<Tensor> {
    let (_, cols) = dw.dims2()?;
    if cols != proj.dim() {
        return Err(Error::dim("project_gradient", dw.shape(), proj.p.shape()));
    }
    if proj.batches_absorbed == 0 {
        return Ok(dw.clone());
    }
    matmul(dw, &proj.p)
}

/// Projectors for every extractor parameter layer and the classifier head.
/// The proxy head has none and is trained by plain gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct OwmOptimizerState {
    extractor: Vec<Option<Projector>>,
    classifier: Projector,
    learning_rate: f64,
}

fn layer_projector(layer: &Layer) -> Option<Projector> {
    layer.augmented_input_dim().map(Projector::identity)
}

impl OwmOptimizerState {
    pub fn new(net: &Network, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(OwmOptimizerState {
            extractor: net.extractor().iter().map(layer_projector).collect(),
            classifier: layer_projector(net.classifier()).expect("classifier has params"),
            learning_rate,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn extractor_projectors(&self) -> &[Option<Projector>] {
        &self.extractor
    }

    pub fn classifier_projector(&self) -> &Projector {
        &self.classifier
    }

    /// Every projector, extractor layers first, then the classifier.
    pub fn projectors(&self) -> impl Iterator<Item = &Projector> {
        self.extractor.iter().flatten().chain(std::iter::once(&self.classifier))
    }

    fn check_layout(&self, net: &Network) -> Result<()> {
        if self.extractor.len() != net.extractor().len() {
            return Err(Error::State(format!(
                "optimizer tracks {} extractor layers, network has {}",
                self.extractor.len(),
                net.extractor().len()
            )));
        }
        for (i, (proj, layer)) in self.extractor.iter().zip(net.extractor()).enumerate() {
            match (proj, layer.augmented_input_dim()) {
                (Some(p), Some(d)) if p.dim() == d => {}
                (None, None) => {}
                (None, Some(_)) => return Err(Error::State(format!("missing projector for extractor layer {i}"))),
                (Some(p), d) => {
                    return Err(Error::State(format!(
                        "projector dim {} does not match extractor layer {i} ({d:?})",
                        p.dim()
                    )))
                }
            }
        }
        if net.classifier().augmented_input_dim() != Some(self.classifier.dim()) {
            return Err(Error::State("classifier projector dim mismatch".into()));
        }
        Ok(())
    }

    /// Applies `W ← W − η·(dW·P)` to extractor and classifier layers (bias
    /// folded in through the augmented coordinate) and a plain step to the
    /// proxy head. Projectors are not modified.
    pub fn step(&self, net: &mut Network, grads: &Gradients) -> Result<()> {
        self.check_layout(net)?;
        if grads.extractor.len() != net.extractor().len() {
            return Err(Error::State("gradient layout does not match network".into()));
        }
        let lr = self.learning_rate;
        for (i, (layer, g)) in net.extractor_mut().iter_mut().zip(&grads.extractor).enumerate() {
            match (&self.extractor[i], g) {
                (Some(p), Some(g)) => apply_projected(layer, p, g, lr)?,
                (None, None) => {}
                _ => return Err(Error::State(format!("gradient/projector mismatch at extractor layer {i}"))),
            }
        }
        apply_projected(net.classifier_mut(), &self.classifier, &grads.classifier, lr)?;
        crate::nn::network_apply_plain(net.proxy_head_mut(), &grads.proxy, lr)
    }

    /// Feeds every projector the batch means recorded by the network's last
    /// forward pass (and any queued copies), consuming them.
    pub fn absorb_batch(&mut self, net: &mut Network) -> Result<()> {
        self.check_layout(net)?;
        for means in net.take_all_mean_inputs()? {
            self.absorb_means(&means)?;
        }
        Ok(())
    }

    pub fn absorb_means(&mut self, means: &LayerMeans) -> Result<()> {
        if means.extractor.len() != self.extractor.len() {
            return Err(Error::State("mean-input layout does not match optimizer".into()));
        }
        for (i, (proj, m)) in self.extractor.iter_mut().zip(&means.extractor).enumerate() {
            match (proj, m) {
                (Some(p), Some(m)) => p.update(m)?,
                (None, _) => {}
                (Some(_), None) => {
                    return Err(Error::State(format!("stale or missing mean input for extractor layer {i}")))
                }
            }
        }
        self.classifier.update(&means.classifier)
    }
}

fn apply_projected(layer: &mut Layer, proj: &Projector, g: &ParamGrad, lr: f64) -> Result<()> {
    let projected = if proj.batches_absorbed() == 0 {
        g.clone()
    } else {
        ParamGrad::from_augmented(&project_gradient(proj, &g.augmented()?)?)?
    };
    crate::nn::network_apply_plain(layer, &projected, lr)
}

const PROJ_TAG: &[u8; 4] = b"PROJ";
const CLASSIFIER_SLOT: u32 = u32::MAX;

/// Network checkpoint followed by a `PROJ` section holding the optimizer:
/// `f64` learning rate, `u32` projector count, then per projector
/// `u32` slot (extractor layer index, or `u32::MAX` for the classifier),
/// `f64` ridge constant, `u64` batches absorbed and the matrix tensor.
pub fn encode_snapshot(net: &Network, state: &OwmOptimizerState) -> Vec<u8> {
    let mut out = encode_network(net);
    out.extend_from_slice(PROJ_TAG);
    out.extend_from_slice(&state.learning_rate.to_le_bytes());
    let slots: Vec<(u32, &Projector)> = state
        .extractor
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i as u32, p)))
        .chain(std::iter::once((CLASSIFIER_SLOT, &state.classifier)))
        .collect();
    put_u32(&mut out, slots.len() as u32);
    for (slot, p) in slots {
        put_u32(&mut out, slot);
        out.extend_from_slice(&p.ridge_epsilon.to_le_bytes());
        put_u64(&mut out, p.batches_absorbed);
        encode_tensor(&mut out, &p.p);
    }
    out
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<(Network, OwmOptimizerState)> {
    let (net, end) = decode_network(bytes)?;
    let mut r = Reader::at(bytes, end);
    if r.take(4, "section tag")? != PROJ_TAG {
        return Err(Error::format(end as u64, "expected PROJ section"));
    }
    let lr = r.f64("learning rate")?;
    let mut state = OwmOptimizerState::new(&net, lr).map_err(|e| Error::format(end as u64 + 4, e.to_string()))?;
    let count = r.u32("projector count")?;
    let expected = state.projectors().count() as u32;
    if count != expected {
        return Err(Error::format(r.pos() as u64 - 4, format!("{count} projectors, network needs {expected}")));
    }
    for _ in 0..count {
        let at = r.pos() as u64;
        let slot = r.u32("projector slot")?;
        let eps = r.f64("ridge constant")?;
        let absorbed = r.u64("batch counter")?;
        let p = r.tensor()?;
        let target = if slot == CLASSIFIER_SLOT {
            Some(&mut state.classifier)
        } else {
            state.extractor.get_mut(slot as usize).and_then(Option::as_mut)
        };
        let target = target.ok_or_else(|| Error::format(at, format!("no projected layer at slot {slot}")))?;
        if target.p.shape() != p.shape() {
            return Err(Error::format(at, "projector shape mismatch"));
        }
        *target = Projector {
            p,
            ridge_epsilon: eps,
            batches_absorbed: absorbed,
        };
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.pos() as u64, "trailing bytes after PROJ section"));
    }
    Ok((net, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn rel_frob(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn empty_subspace_is_identity() {
        assert_eq!(projector_direct_from_columns(4, &[], 1e-3).unwrap(), Tensor::eye(4));
    }

    #[test]
    fn rank_one_annihilation() {
        let a = vec![0.0, 1.0, 0.0];
        let p = projector_direct_from_columns(3, std::slice::from_ref(&a), 1e-9).unwrap();
        let pa = crate::tensor::matvec(&p, &a).unwrap();
        assert!(crate::tensor::norm(&pa) <= 1e-4);
        let mut want = Tensor::eye(3);
        want.data_mut()[4] = 0.0;
        assert!(p.sub(&want).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn hand_update_on_identity() {
        let mut p = Projector::identity(3);
        p.update(&[1.0, 0.0, 0.0]).unwrap();
        let mut want = Tensor::eye(3);
        want.data_mut()[0] = 0.5;
        assert_eq!(p.matrix(), &want);
        assert_eq!(p.batches_absorbed(), 1);
    }

    #[test]
    fn zero_mean_leaves_projector() {
        let mut p = Projector::identity(3);
        p.update(&[0.3, -0.1, 1.0]).unwrap();
        let before = p.matrix().clone();
        p.update(&[0.0; 3]).unwrap();
        assert_eq!(p.matrix(), &before);
    }

    #[test]
    fn non_finite_mean_rejected() {
        let mut p = Projector::identity(2);
        assert!(matches!(p.update(&[f64::NAN, 1.0]), Err(Error::Numerical { .. })));
    }

    #[test]
    fn recursion_matches_direct_formula() {
        let mut rng = RngState::new(17);
        let n = 6;
        let means: Vec<Vec<f64>> = (0..5).map(|_| (0..n).map(|_| rng.normal()).collect()).collect();
        let mut p = Projector::identity(n);
        for m in &means {
            p.update(m).unwrap();
        }
        let direct = projector_direct_from_columns(n, &means, 1.0).unwrap();
        assert!(rel_frob(p.matrix(), &direct) <= 1e-6);
    }

    #[test]
    fn direct_matches_symbolic_recomputation() {
        // Recompute I − A(AᵀA+εI)⁻¹Aᵀ through the explicitly inverted m×m
        // matrix (cofactor-free Gauss-Jordan on a 3×3).
        let mut rng = RngState::new(23);
        let a = Tensor::new(vec![8, 3], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let eps = 1e-3;
        let p = projector_direct(&a, eps).unwrap();
        let g = matmul(&a.transpose().unwrap(), &a).unwrap();
        let mut m = [[0.0f64; 6]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = g.get2(i, j) + if i == j { eps } else { 0.0 };
            }
            m[i][3 + i] = 1.0;
        }
        for c in 0..3 {
            let d = m[c][c];
            for v in m[c].iter_mut() {
                *v /= d;
            }
            for r in 0..3 {
                if r != c {
                    let f = m[r][c];
                    for k in 0..6 {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
        let inv = Tensor::new(vec![3, 3], (0..9).map(|k| m[k / 3][3 + k % 3]).collect()).unwrap();
        let want = Tensor::eye(8)
            .sub(&matmul(&matmul(&a, &inv).unwrap(), &a.transpose().unwrap()).unwrap())
            .unwrap();
        assert!(p.sub(&want).unwrap().max_abs() <= 1e-10);
        // Absorbed columns are annihilated up to the ridge scale.
        let pa = matmul(&p, &a).unwrap();
        assert!(pa.frobenius_norm() <= eps.sqrt() * a.frobenius_norm());
    }

    #[test]
    fn identity_and_zero_projection() {
        let dw = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let p = Projector::identity(3);
        assert_eq!(project_gradient(&p, &dw).unwrap(), dw);
        let zero = Projector {
            p: Tensor::zeros(&[3, 3]),
            ridge_epsilon: 1.0,
            batches_absorbed: 1,
        };
        assert!(project_gradient(&zero, &dw).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(project_gradient(&p, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn projected_gradient_ignores_absorbed_direction() {
        let mut rng = RngState::new(31);
        let a: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let mut p = Projector::identity(5);
        // Repeated absorption shrinks P·a like 1/(1 + k‖a‖²).
        for _ in 0..2000 {
            p.update(&a).unwrap();
        }
        let dw = Tensor::new(vec![3, 5], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let g = project_gradient(&p, &dw).unwrap();
        let ga = crate::tensor::matvec(&g, &a).unwrap();
        let bound = 1e-3 * dw.frobenius_norm() * crate::tensor::norm(&a);
        assert!(crate::tensor::norm(&ga) <= bound);
    }

    #[test]
    fn repeated_absorption_is_monotone() {
        let x = [0.5, 1.0, -0.2, 1.0];
        let mut p = Projector::identity(4);
        let mut last = f64::INFINITY;
        for _ in 0..3 {
            p.update(&x).unwrap();
            let n = crate::tensor::norm(&crate::tensor::matvec(p.matrix(), &x).unwrap());
            assert!(n < last);
            last = n;
        }
    }
}
