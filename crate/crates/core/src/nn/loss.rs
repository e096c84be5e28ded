use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax. With a mask, only the listed classes take part; the
/// remaining entries get probability zero.
pub fn softmax(logits: &Tensor, mask: Option<&[usize]>) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    let active = active_set(k, mask)?;
    let mut out = vec![0.0; b * k];
    for r in 0..b {
        let row = logits.row(r);
        let max = active.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &c in &active {
            let e = (row[c] - max).exp();
            out[r * k + c] = e;
            z += e;
        }
        for &c in &active {
            out[r * k + c] /= z;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![b, k], out))
}

fn active_set(k: usize, mask: Option<&[usize]>) -> Result<Vec<usize>> {
    match mask {
        None => Ok((0..k).collect()),
        Some(m) => {
            if m.is_empty() {
                return Err(Error::Data("empty class mask".into()));
            }
            if let Some(&bad) = m.iter().find(|&&c| c >= k) {
                return Err(Error::Data(format!("mask class {bad} outside {k} logits")));
            }
            let mut v = m.to_vec();
            v.sort_unstable();
            v.dedup();
            Ok(v)
        }
    }
}

/// Mean cross-entropy over the batch and its exact gradient with respect
/// to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize], mask: Option<&[usize]>) -> Result<(f64, Tensor)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let active = active_set(k, mask)?;
    for &y in labels {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        if mask.is_some() && active.binary_search(&y).is_err() {
            return Err(Error::Data(format!("label {y} is outside the active class mask")));
        }
    }
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = active.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = active.iter().map(|&c| (row[c] - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[y];
        for &c in &active {
            grad[r * k + c] = (row[c] - log_z).exp() * inv_b;
        }
        grad[r * k + y] -= inv_b;
    }
    let g = Tensor::from_parts_unchecked(vec![b, k], grad);
    g.ensure_finite("softmax_cross_entropy")?;
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::Numerical {
            op: "softmax_cross_entropy",
            detail: "non-finite loss".into(),
        });
    }
    Ok((loss, g))
}

/// Mean squared error over all elements, and its gradient w.r.t. `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.scale(2.0 / n)?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_two_class() {
        let logits = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[0], None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn huge_logit_is_stable() {
        let logits = Tensor::from_rows(&[vec![1e6, 0.0]]).unwrap();
        let (loss, g) = softmax_cross_entropy(&logits, &[0], None).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(softmax_cross_entropy(&logits, &[3], None), Err(Error::Data(_))));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2], Some(&[0, 1])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = crate::rng::RngState::new(13);
        let data: Vec<f64> = (0..20).map(|_| 2.0 * rng.normal()).collect();
        let logits = Tensor::new(vec![4, 5], data.clone()).unwrap();
        let labels = [0, 3, 4, 1];
        for mask in [None, Some(&[0usize, 1, 3, 4][..])] {
            let (_, g) = softmax_cross_entropy(&logits, &labels, mask).unwrap();
            let h = 1e-5;
            for i in 0..20 {
                let mut p = data.clone();
                p[i] += h;
                let mut m = data.clone();
                m[i] -= h;
                let lp = softmax_cross_entropy(&Tensor::new(vec![4, 5], p).unwrap(), &labels, mask).unwrap().0;
                let lm = softmax_cross_entropy(&Tensor::new(vec![4, 5], m).unwrap(), &labels, mask).unwrap().0;
                let num = (lp - lm) / (2.0 * h);
                let ana = g.data()[i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
                assert!(rel <= 1e-6 || (num - ana).abs() < 1e-10, "i={i} {num} vs {ana}");
            }
        }
    }

    #[test]
    fn mse_gradient() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 4.0]]).unwrap();
        let (l, g) = mse(&a, &b).unwrap();
        assert!((l - 2.5).abs() < 1e-15);
        assert_eq!(g.data(), &[1.0, -2.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12), masked in any::<bool>()) {
            let logits = Tensor::new(vec![3, 4], vals).unwrap();
            let mask: Option<&[usize]> = if masked { Some(&[1, 2]) } else { None };
            let p = softmax(&logits, mask).unwrap();
            for r in 0..3 {
                let row = p.row(r);
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                if masked {
                    prop_assert_eq!(row[0], 0.0);
                    prop_assert_eq!(row[3], 0.0);
                }
            }
        }
    }
}
