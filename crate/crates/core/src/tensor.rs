//! Dense row-major f64 tensors.
//!
//! Only the handful of operations the pipeline needs are provided: matrix
//! products, elementwise activations and reshapes. Gradient bookkeeping lives
//! in [`crate::autodiff`]; everything here is a pure function of its inputs.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
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

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn value(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

/// `out += a (m×k) · b (k×n)`, i-k-j loop order for contiguous inner access.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Draws an inverted-dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect())
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Inverted dropout. With `train == false` or `rate == 0` this is the identity
/// and consumes no randomness.
pub fn dropout(x: &Tensor, rate: f64, train: bool, rng: &mut SeededRng) -> Result<Tensor> {
    check_rate(rate)?;
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_zero() {
        let b = m(&[&[1.0, -2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let out = Tensor::zeros(&[2, 2]).matmul(&b).unwrap();
        assert_eq!(out, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn relu_sign_cases() {
        let x = Tensor::row_vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.73106).abs() < 1e-5);
        assert!(sigmoid(700.0) <= 1.0 && sigmoid(700.0) > 0.999);
        assert!(sigmoid(-700.0).is_finite() && sigmoid(-700.0) >= 0.0);
        let mut prev = 0.0;
        for i in -50..50 {
            let s = sigmoid(i as f64 * 0.5);
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn dropout_degenerate_cases() {
        let x = Tensor::row_vector(vec![1.0, -2.0, 3.0]);
        let mut rng = SeededRng::new(3);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.9, false, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = SeededRng::new(11);
        let x = Tensor::scalar(1.0);
        let draws = 100_000;
        let mut total = 0.0;
        for _ in 0..draws {
            total += dropout(&x, 0.5, true, &mut rng).unwrap().value();
        }
        let mean = total / draws as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
