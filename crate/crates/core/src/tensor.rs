//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate needs.
//!
//! Every constructor and every arithmetic kernel rejects non-finite values,
//! so a NaN is reported by the operation that produced it instead of
//! surfacing several layers later.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn first_non_finite(data: &[f64]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        if let Some(i) = first_non_finite(&data) {
            return Err(Error::Numerical {
                op: "Tensor::new",
                detail: format!("non-finite value {} at flat index {i}", data[i]),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without re-validating. Callers guarantee the shape
    /// product matches and the values are finite.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "zero-sized tensor {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim("dims2", other, &[0, 0])),
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1..].iter().product::<usize>();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts_unchecked(shape.to_vec(), self.data.clone()))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts_unchecked(vec![c, r], out))
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match first_non_finite(&self.data) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical {
                op,
                detail: format!("non-finite value {} at flat index {i}", self.data[i]),
            }),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let t = Tensor::from_parts_unchecked(self.shape.clone(), data);
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        let t = Tensor::from_parts_unchecked(self.shape.clone(), self.data.iter().map(|v| v * k).collect());
        t.ensure_finite("scale")?;
        Ok(t)
    }

    /// `self += k * other`, in place.
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("axpy", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        self.ensure_finite("axpy")
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a_ij - a_ji|` of a square matrix.
    pub fn asymmetry(&self) -> Result<f64> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::dim("asymmetry", &self.shape, &[c, r]));
        }
        let mut worst = 0.0f64;
        for i in 0..r {
            for j in (i + 1)..r {
                worst = worst.max((self.data[i * r + j] - self.data[j * r + i]).abs());
            }
        }
        Ok(worst)
    }
}

/// Standard matrix product. Accumulation runs in `i, k, j` order, which is
/// fixed, so results are bitwise reproducible for a given build.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &bd[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    let t = Tensor::from_parts_unchecked(vec![m, n], out);
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// Matrix-vector product `a · x`.
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = a.dims2()?;
    if x.len() != k {
        return Err(Error::dim("matvec", a.shape(), &[x.len()]));
    }
    let out: Vec<f64> = (0..m).map(|i| dot(a.row(i), x)).collect();
    if let Some(i) = first_non_finite(&out) {
        return Err(Error::Numerical {
            op: "matvec",
            detail: format!("non-finite output at {i}"),
        });
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn random(rng: &mut RngState, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = RngState::new(7);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        match err {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::Numerical { .. })
        ));
        let big = Tensor::filled(&[1, 1], 1e300);
        assert!(matches!(matmul(&big, &big), Err(Error::Numerical { .. })));
    }

    #[test]
    fn associativity_on_random_triples() {
        let mut rng = RngState::new(11);
        for _ in 0..50 {
            let a = random(&mut rng, 4, 6);
            let b = random(&mut rng, 6, 5);
            let c = random(&mut rng, 5, 3);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm();
            assert!(rel <= 1e-9, "{rel}");
        }
    }
}
