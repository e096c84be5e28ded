//! Symmetric ridge solves via Cholesky factorization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-9;

/// Lower-triangular Cholesky factor of `g + eps·I`, row-major `n×n`.
fn cholesky_shifted(g: &Tensor, eps: f64) -> Result<Vec<f64>> {
    let (n, _) = g.dims2()?;
    let gd = g.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = gd[j * n + j] + eps;
        for p in 0..j {
            diag -= l[j * n + p] * l[j * n + p];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Numerical {
                op: "ridge_solve",
                detail: format!("factorization breakdown at pivot {j} (value {diag:e})"),
            });
        }
        let d = diag.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = gd[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Solves `(g + eps·I) X = b` for symmetric positive semi-definite `g`.
pub fn ridge_solve(g: &Tensor, eps: f64, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = g.dims2()?;
    if n != n2 {
        return Err(Error::dim("ridge_solve", g.shape(), &[n, n]));
    }
    let (bn, m) = b.dims2()?;
    if bn != n {
        return Err(Error::dim("ridge_solve", g.shape(), b.shape()));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Contract(format!("ridge constant must be positive, got {eps}")));
    }
    let tol = SYMMETRY_TOL * g.max_abs().max(1.0);
    let asym = g.asymmetry()?;
    if asym > tol {
        return Err(Error::Contract(format!(
            "ridge_solve needs a symmetric matrix (max asymmetry {asym:e})"
        )));
    }

    let l = cholesky_shifted(g, eps)?;
    let mut x = b.data().to_vec();
    // Forward substitution L y = b, then back substitution Lᵀ x = y, one
    // right-hand-side column at a time.
    for col in 0..m {
        for i in 0..n {
            let mut s = x[i * m + col];
            for p in 0..i {
                s -= l[i * n + p] * x[p * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * m + col];
            for p in (i + 1)..n {
                s -= l[p * n + i] * x[p * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
    }
    let out = Tensor::from_parts_unchecked(vec![n, m], x);
    out.ensure_finite("ridge_solve")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::matmul;

    /// Dense Gaussian elimination with partial pivoting on `(g + eps I) | b`.
    fn elimination(g: &Tensor, eps: f64, b: &Tensor) -> Vec<f64> {
        let (n, _) = g.dims2().unwrap();
        let (_, m) = b.dims2().unwrap();
        let w = n + m;
        let mut aug = vec![0.0; n * w];
        for i in 0..n {
            for j in 0..n {
                aug[i * w + j] = g.get2(i, j) + if i == j { eps } else { 0.0 };
            }
            for j in 0..m {
                aug[i * w + n + j] = b.get2(i, j);
            }
        }
        for c in 0..n {
            let piv = (c..n)
                .max_by(|&x, &y| aug[x * w + c].abs().total_cmp(&aug[y * w + c].abs()))
                .unwrap();
            for j in 0..w {
                aug.swap(c * w + j, piv * w + j);
            }
            for r in 0..n {
                if r != c {
                    let f = aug[r * w + c] / aug[c * w + c];
                    for j in 0..w {
                        aug[r * w + j] -= f * aug[c * w + j];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                x[i * m + j] = aug[i * w + n + j] / aug[i * w + i];
            }
        }
        x
    }

    fn random_psd(rng: &mut RngState, n: usize, rank: usize) -> Tensor {
        let a = Tensor::new(vec![n, rank], (0..n * rank).map(|_| rng.normal()).collect()).unwrap();
        matmul(&a, &a.transpose().unwrap()).unwrap()
    }

    fn residual(g: &Tensor, eps: f64, x: &Tensor, b: &Tensor) -> f64 {
        let n = g.dims2().unwrap().0;
        let shifted = g.add(&Tensor::eye(n).scale(eps).unwrap()).unwrap();
        let r = matmul(&shifted, x).unwrap().sub(b).unwrap();
        r.frobenius_norm() / b.frobenius_norm()
    }

    #[test]
    fn zero_matrix_unit_ridge() {
        let x = ridge_solve(&Tensor::zeros(&[3, 3]), 1.0, &Tensor::eye(3)).unwrap();
        assert_eq!(x, Tensor::eye(3));
    }

    #[test]
    fn diagonal_case() {
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let x = ridge_solve(&g, 1.0, &Tensor::eye(2)).unwrap();
        let want = [0.5, 0.0, 0.0, 0.25];
        for (a, b) in x.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn agrees_with_elimination() {
        let mut rng = RngState::new(5);
        let g = random_psd(&mut rng, 10, 10);
        let b = Tensor::new(vec![10, 3], (0..30).map(|_| rng.normal()).collect()).unwrap();
        let x = ridge_solve(&g, 1e-2, &b).unwrap();
        let oracle = elimination(&g, 1e-2, &b);
        let diff: f64 = x.data().iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / scale <= 1e-10, "{}", diff / scale);
        assert!(residual(&g, 1e-2, &x, &b) <= 1e-10);
    }

    #[test]
    fn residual_bound_on_ill_conditioned_matrices() {
        let mut rng = RngState::new(9);
        for case in 0..100 {
            let n = 2 + case % 12;
            // Eigenvalues spread over [1e-8, 1] give condition numbers up to 1e8.
            let q = {
                let a = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.normal()).collect()).unwrap();
                gram_schmidt(&a)
            };
            let mut diag = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let e = -8.0 * i as f64 / (n - 1) as f64;
                diag.data_mut()[i * n + i] = 10f64.powf(e);
            }
            let g = matmul(&matmul(&q, &diag).unwrap(), &q.transpose().unwrap()).unwrap();
            let g = g.add(&g.transpose().unwrap()).unwrap().scale(0.5).unwrap();
            let b = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
            let x = ridge_solve(&g, 1e-3, &b).unwrap();
            assert!(residual(&g, 1e-3, &x, &b) <= 1e-8);
        }
    }

    fn gram_schmidt(a: &Tensor) -> Tensor {
        let (n, _) = a.dims2().unwrap();
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a.get2(i, j)).collect()).collect();
        for j in 0..n {
            for p in 0..j {
                let d: f64 = cols[j].iter().zip(&cols[p]).map(|(x, y)| x * y).sum();
                let prev = cols[p].clone();
                cols[j].iter_mut().zip(prev).for_each(|(x, y)| *x -= d * y);
            }
            let nrm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            cols[j].iter_mut().for_each(|x| *x /= nrm);
        }
        let mut out = Tensor::zeros(&[n, n]);
        for j in 0..n {
            for i in 0..n {
                out.data_mut()[i * n + j] = cols[j][i];
            }
        }
        out
    }

    #[test]
    fn asymmetric_input_is_a_contract_error() {
        let g = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(ridge_solve(&g, 1.0, &Tensor::eye(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn indefinite_matrix_breaks_down() {
        let g = Tensor::from_rows(&[vec![-5.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(ridge_solve(&g, 1.0, &Tensor::eye(2)), Err(Error::Numerical { .. })));
    }
}
