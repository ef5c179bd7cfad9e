//! Dense row-major `f32` tensors and the forward kernels shared by inference
//! and training.
//!
//! Every kernel here accumulates in a fixed order that does not depend on how
//! many rows are processed together. Running one token or a batch of tokens
//! through [`matmul`] therefore yields bit-identical rows, which is what lets
//! tree verification reproduce vanilla greedy decoding exactly.

pub mod kernels;

use std::fmt;
use std::sync::{Arc, OnceLock};

use crate::error::{dim_err, validation_err, Result};
use kernels::PackedMatrix;

/// Dense n-dimensional `f32` array in row-major order.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    /// Packed copy for [`Tensor::packed`], dropped on every mutation.
    packed: OnceLock<Arc<PackedMatrix<f32>>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} has a zero dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data, packed: OnceLock::new() })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], packed: OnceLock::new() }
    }

    /// Row vector / matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.packed = OnceLock::new();
        &mut self.data
    }

    /// The `[rows, cols]` view of this tensor in the packed layout used by
    /// [`kernels::matmul_packed`], built on first use.
    pub fn packed(&self) -> &PackedMatrix<f32> {
        self.packed.get_or_init(|| Arc::new(PackedMatrix::pack(&self.data, self.rows(), self.cols())))
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        self.packed = OnceLock::new();
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        self.packed = OnceLock::new();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

/// Matrix product of `a` (`[n, k]` or `[b, n, k]`) with `b` (`[k, m]` or `[b, k, m]`).
///
/// A 3-D left operand with a 2-D right operand is treated as a stack of rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        (&[n, k], &[k2, m]) if k == k2 => {
            let mut out = vec![0.0; n * m];
            kernels::matmul(a.data(), n, k, b.data(), m, &mut out);
            Tensor::new(vec![n, m], out)
        }
        (&[bs, n, k], &[k2, m]) if k == k2 => {
            let mut out = vec![0.0; bs * n * m];
            kernels::matmul(a.data(), bs * n, k, b.data(), m, &mut out);
            Tensor::new(vec![bs, n, m], out)
        }
        (&[bs, n, k], &[bs2, k2, m]) if k == k2 && bs == bs2 => {
            let mut out = vec![0.0; bs * n * m];
            for i in 0..bs {
                kernels::matmul(
                    &a.data()[i * n * k..(i + 1) * n * k],
                    n,
                    k,
                    &b.data()[i * k * m..(i + 1) * k * m],
                    m,
                    &mut out[i * n * m..(i + 1) * n * m],
                );
            }
            Tensor::new(vec![bs, n, m], out)
        }
        (sa, sb) => Err(dim_err!("matmul shape mismatch: {sa:?} x {sb:?}")),
    }
}

/// Softmax along the last axis at the given temperature.
///
/// Temperature zero yields a one-hot row at the argmax, ties going to the
/// lowest index.
pub fn softmax(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    if temperature.is_nan() || temperature < 0.0 {
        return Err(validation_err!("temperature must be >= 0, got {temperature}"));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        kernels::softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

/// RMS normalisation along the last axis, scaled by `weight`.
pub fn rmsnorm(x: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor> {
    if weight.numel() != x.cols() {
        return Err(dim_err!(
            "rmsnorm weight has {} elements, input last axis is {}",
            weight.numel(),
            x.cols()
        ));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        kernels::rmsnorm_in_place(out.row_mut(r), weight.data(), eps);
    }
    Ok(out)
}

/// Mean Smooth-L1 (transition point 1) between `pred` and `target`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<f32> {
    if pred.shape() != target.shape() {
        return Err(dim_err!(
            "smooth_l1 shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| f64::from(kernels::smooth_l1_elem(p - t)))
        .sum();
    Ok((total / pred.numel() as f64) as f32)
}

/// Mean over rows of `-sum(target * log_softmax(logits))`.
pub fn soft_cross_entropy(target_dist: &Tensor, logits: &Tensor) -> Result<f32> {
    if target_dist.shape() != logits.shape() {
        return Err(dim_err!(
            "soft_cross_entropy shape mismatch: {:?} vs {:?}",
            target_dist.shape(),
            logits.shape()
        ));
    }
    check_distribution_rows(target_dist)?;
    let mut total = 0.0f64;
    let mut logp = vec![0.0; logits.cols()];
    for r in 0..logits.rows() {
        kernels::log_softmax(logits.row(r), &mut logp);
        total -= target_dist
            .row(r)
            .iter()
            .zip(&logp)
            .map(|(&t, &l)| f64::from(t) * f64::from(l))
            .sum::<f64>();
    }
    Ok((total / logits.rows() as f64) as f32)
}

/// Every row must be non-negative and sum to one within `1e-4`.
pub(crate) fn check_distribution_rows(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row(r);
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(validation_err!("distribution row {r} has a negative or non-finite entry"));
        }
        let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(validation_err!("distribution row {r} sums to {s}"));
        }
    }
    Ok(())
}
