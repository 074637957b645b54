use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values (rank 0, 1 or 2 in practice).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external input, rejecting length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", expected, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by arithmetic on validated
    /// inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("dot", format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("axpy", format!("{:?}", self.shape), format!("{:?}", other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `W x + b` for `W: [m, n]`, `x: [n]`, `b: [m]`.
pub fn affine(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = match w.shape() {
        [m, n] => (*m, *n),
        other => return Err(Error::dim("affine", "rank-2 weight", format!("{other:?}"))),
    };
    if x.len() != n {
        return Err(Error::dim("affine", n, x.len()));
    }
    if b.len() != m {
        return Err(Error::dim("affine", m, b.len()));
    }
    let mut out = b.data().to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w.data()[i * n..(i + 1) * n];
        *o += row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(Tensor::from_parts(vec![m], out))
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::Contract("softmax of an empty tensor".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), softmax_slice(x.data())))
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn affine_identity_and_zero_weight() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2]);
        let x = Tensor::vector(vec![2.0, 3.0]).unwrap();
        assert_eq!(affine(&eye, &x, &zero).unwrap().data(), &[2.0, 3.0]);

        let w0 = Tensor::zeros(&[2, 2]);
        let b = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let x = Tensor::vector(vec![-7.0, 11.0]).unwrap();
        assert_eq!(affine(&w0, &x, &b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn affine_matches_loop_oracle() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        // Independent oracle: explicit double loop.
        let mut oracle = [0.0; 2];
        for (i, o) in oracle.iter_mut().enumerate() {
            for j in 0..2 {
                *o += w.data()[i * 2 + j] * x.data()[j];
            }
        }
        assert_eq!(oracle, [3.0, 7.0]);
        assert_eq!(affine(&w, &x, &b).unwrap().data(), &oracle);
    }

    #[test]
    fn affine_shape_errors() {
        let w = Tensor::zeros(&[2, 3]);
        let x = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(affine(&w, &x, &b), Err(Error::Dimension { .. })));
        let x = Tensor::zeros(&[3]);
        let b = Tensor::zeros(&[3]);
        assert!(affine(&w, &x, &b).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(tanh(&Tensor::scalar(0.0).unwrap()).data(), &[0.0]);
        let s = softmax(&Tensor::vector(vec![4.2; 3]).unwrap()).unwrap();
        for p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let r = relu(&Tensor::vector(vec![-1.0, 2.0]).unwrap());
        assert_eq!(r.data(), &[0.0, 2.0]);
        assert!(softmax(&Tensor::zeros(&[0])).is_err());
    }

    #[test]
    fn softmax_handles_large_logits() {
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0, -1000.0]).unwrap()).unwrap();
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.is_finite());
    }
}
