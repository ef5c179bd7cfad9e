//! Slice-level kernels. All reductions use a fixed accumulation order.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type of the kernels: `f32` for models, `f64` for
/// gradient checking.
pub trait Scalar:
    num_traits::Float + AddAssign + SubAssign + MulAssign + DivAssign + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Input rows sharing one register tile.
const PANEL_ROWS: usize = 4;
/// Output columns whose weights stay cache-resident while every panel
/// visits them.
const STRIP_COLS: usize = 64;

/// `out[n, m] = x[n, k] * w[k, m]`.
///
/// Weight-stationary: the weights are walked in column strips, and within a
/// strip the rows are split into balanced panels of at most [`PANEL_ROWS`],
/// each holding a register tile of outputs (narrower tiles for taller
/// panels). Every output element is a chain of fused multiply-adds in
/// ascending `k` order starting from zero, so its value does not depend on
/// `n`, on the tiling, or on whether the weights are packed.
pub fn matmul<T: Scalar>(x: &[T], n: usize, k: usize, w: &[T], m: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for j0 in (0..m).step_by(STRIP_COLS) {
        let j1 = (j0 + STRIP_COLS).min(m);
        panels(Strip { x, k, w, stride: m, j0, j1, base: 0 }, n, m, out);
    }
}

/// A `[k, m]` matrix rearranged so each column strip is contiguous, which
/// keeps weight reads sequential when the matrix streams from memory.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMatrix<T> {
    k: usize,
    m: usize,
    data: Vec<T>,
}

impl<T: Scalar> PackedMatrix<T> {
    pub fn pack(w: &[T], k: usize, m: usize) -> Self {
        assert_eq!(w.len(), k * m, "packed matrix shape");
        let mut data = Vec::with_capacity(k * m);
        for j0 in (0..m).step_by(STRIP_COLS) {
            let j1 = (j0 + STRIP_COLS).min(m);
            for i in 0..k {
                data.extend_from_slice(&w[i * m + j0..i * m + j1]);
            }
        }
        Self { k, m, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.k, self.m)
    }
}

/// [`matmul`] against packed weights; results are bit-identical.
pub fn matmul_packed<T: Scalar>(x: &[T], n: usize, w: &PackedMatrix<T>, out: &mut [T]) {
    let (k, m) = (w.k, w.m);
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(out.len(), n * m);
    for j0 in (0..m).step_by(STRIP_COLS) {
        let j1 = (j0 + STRIP_COLS).min(m);
        let strip = &w.data[j0 * k..j1 * k];
        panels(Strip { x, k, w: strip, stride: j1 - j0, j0, j1, base: j0 }, n, m, out);
    }
}

/// Output columns `j0..j1`; weight `(i, j)` lives at
/// `w[i * stride + j - base]`.
#[derive(Clone, Copy)]
struct Strip<'a, T> {
    x: &'a [T],
    k: usize,
    w: &'a [T],
    stride: usize,
    j0: usize,
    j1: usize,
    base: usize,
}

fn panels<T: Scalar>(s: Strip<'_, T>, n: usize, m: usize, out: &mut [T]) {
    let count = n.div_ceil(PANEL_ROWS);
    let mut tb = 0;
    for p in 0..count {
        let rows = (n - tb) / (count - p);
        match rows {
            1 => s.run::<1, 64>(tb, m, out),
            2 => s.run::<2, 32>(tb, m, out),
            3 => s.run::<3, 32>(tb, m, out),
            _ => s.run::<4, 16>(tb, m, out),
        }
        tb += rows;
    }
}

impl<T: Scalar> Strip<'_, T> {
    /// Rows `tb..tb + R` of the strip, `W` columns at a time.
    #[inline(always)]
    fn run<const R: usize, const W: usize>(&self, tb: usize, m: usize, out: &mut [T]) {
        let xr: [&[T]; R] = std::array::from_fn(|r| &self.x[(tb + r) * self.k..(tb + r + 1) * self.k]);
        let mut jb = self.j0;
        while jb < self.j1 {
            let width = (self.j1 - jb).min(W);
            let c = jb - self.base;
            let mut put = |r: usize, vals: &[T]| {
                out[(tb + r) * m + jb..(tb + r) * m + jb + width].copy_from_slice(vals);
            };
            if width == W {
                for (r, a) in self.tile::<R, W>(&xr, c).iter().enumerate() {
                    put(r, a);
                }
            } else {
                for (r, xrow) in xr.iter().enumerate() {
                    put(r, &self.columns(xrow, c, width));
                }
            }
            jb += width;
        }
    }

    /// Full `R x W` register tile at strip column `c`.
    #[inline(always)]
    fn tile<const R: usize, const W: usize>(&self, xr: &[&[T]; R], c: usize) -> [[T; W]; R] {
        let (w, stride) = (self.w, self.stride);
        let mut acc = [[T::zero(); W]; R];
        for i in 0..self.k {
            let wrow: &[T; W] = w[i * stride + c..i * stride + c + W].try_into().expect("full tile");
            for r in 0..R {
                let xv = xr[r][i];
                for l in 0..W {
                    acc[r][l] = xv.mul_add(wrow[l], acc[r][l]);
                }
            }
        }
        acc
    }

    /// One row against `width` columns starting at strip column `c`.
    fn columns(&self, xrow: &[T], c: usize, width: usize) -> Vec<T> {
        let mut acc = vec![T::zero(); width];
        for (i, &xv) in xrow.iter().enumerate() {
            let wrow = &self.w[i * self.stride + c..i * self.stride + c + width];
            for (al, &wl) in acc.iter_mut().zip(wrow) {
                *al = xv.mul_add(wl, *al);
            }
        }
        acc
    }
}

/// `out[n, k] = dy[n, m] * w[k, m]^T` (gradient of [`matmul`] w.r.t. `x`).
pub fn matmul_nt<T: Scalar>(dy: &[T], n: usize, m: usize, w: &[T], k: usize, out: &mut [T]) {
    debug_assert_eq!(dy.len(), n * m);
    debug_assert_eq!(w.len(), k * m);
    for t in 0..n {
        let drow = &dy[t * m..(t + 1) * m];
        for i in 0..k {
            out[t * k + i] = dot(drow, &w[i * m..(i + 1) * m]);
        }
    }
}

/// `out[k, m] += x[n, k]^T * dy[n, m]` (gradient of [`matmul`] w.r.t. `w`).
pub fn matmul_tn_acc<T: Scalar>(x: &[T], n: usize, k: usize, dy: &[T], m: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), k * m);
    const ROW_BLOCK: usize = 64;
    let mut tb = 0;
    while tb < n {
        let te = (tb + ROW_BLOCK).min(n);
        for i in 0..k {
            let orow = &mut out[i * m..(i + 1) * m];
            for t in tb..te {
                axpy(orow, x[t * k + i], &dy[t * m..(t + 1) * m]);
            }
        }
        tb = te;
    }
}

#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = a.mul_add(xi, *yi);
    }
}

/// Dot product with sixteen interleaved accumulators combined pairwise.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..16 {
            acc[l] = xa[l].mul_add(xb[l], acc[l]);
        }
    }
    for (l, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        acc[l] = x.mul_add(y, acc[l]);
    }
    let mut width = 8;
    while width > 0 {
        for l in 0..width {
            let v = acc[l + width];
            acc[l] += v;
        }
        width /= 2;
    }
    acc[0]
}

/// Index of the maximum, lowest index on ties. NaN entries are never chosen.
pub fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, &v) in x.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T], temperature: T) {
    if temperature == T::zero() {
        let a = argmax(row);
        row.fill(T::zero());
        row[a] = T::one();
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn log_softmax<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Returns `1 / sqrt(mean(x^2) + eps)` after scaling `row` in place.
pub fn rmsnorm_in_place<T: Scalar>(row: &mut [T], weight: &[T], eps: T) -> T {
    let ms = dot(row, row) / T::of(row.len() as f64);
    let inv = T::one() / (ms + eps).sqrt();
    for (v, &w) in row.iter_mut().zip(weight) {
        *v = *v * inv * w;
    }
    inv
}

#[inline]
pub fn smooth_l1_elem<T: Scalar>(d: T) -> T {
    let a = d.abs();
    let half = T::of(0.5);
    if a < T::one() {
        half * d * d
    } else {
        a - half
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Precomputed rotary angles, `[max_positions, head_dim / 2]`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    half: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(head_dim: usize, max_positions: usize, theta: f32) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for pos in 0..max_positions {
            for i in 0..half {
                let freq = (theta as f64).powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (pos as f64 * freq).sin_cos();
                cos.push(c as f32);
                sin.push(s as f32);
            }
        }
        Self { half, cos, sin }
    }

    pub fn max_positions(&self) -> usize {
        self.cos.len() / self.half.max(1)
    }

    /// Rotates pairs `(i, i + d/2)` of one head-sized slice. `inverse` applies
    /// the transpose rotation (used by the backward pass).
    pub fn apply<T: Scalar>(&self, x: &mut [T], position: usize, inverse: bool) {
        let half = self.half;
        debug_assert_eq!(x.len(), 2 * half);
        let c = &self.cos[position * half..(position + 1) * half];
        let s = &self.sin[position * half..(position + 1) * half];
        for i in 0..half {
            let ci = T::of(f64::from(c[i]));
            let si = T::of(f64::from(if inverse { -s[i] } else { s[i] }));
            let (a, b) = (x[i], x[i + half]);
            x[i] = a * ci - b * si;
            x[i + half] = a * si + b * ci;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batched_rows_match_single_rows_bitwise() {
        let (n, k, m) = (5, 37, 300);
        let x: Vec<f32> = (0..n * k).map(|i| ((i * 7919) % 113) as f32 / 57.0 - 1.0).collect();
        let w: Vec<f32> = (0..k * m).map(|i| ((i * 104729) % 97) as f32 / 49.0 - 1.0).collect();
        let mut batched = vec![0.0; n * m];
        matmul(&x, n, k, &w, m, &mut batched);
        for t in 0..n {
            let mut single = vec![0.0; m];
            matmul(&x[t * k..(t + 1) * k], 1, k, &w, m, &mut single);
            assert_eq!(&batched[t * m..(t + 1) * m], &single[..]);
        }
    }

    #[test]
    fn every_panel_split_matches_a_scalar_fma_chain() {
        let (k, m) = (19, 83);
        let w: Vec<f64> = (0..k * m).map(|i| ((i * 31) % 53) as f64 / 26.0 - 1.0).collect();
        for n in 1..=13 {
            let x: Vec<f64> = (0..n * k).map(|i| ((i * 17) % 41) as f64 / 20.0 - 1.0).collect();
            let mut out = vec![0.0; n * m];
            matmul(&x, n, k, &w, m, &mut out);
            let mut packed = vec![0.0; n * m];
            matmul_packed(&x, n, &PackedMatrix::pack(&w, k, m), &mut packed);
            assert_eq!(packed, out);
            for t in 0..n {
                for j in 0..m {
                    let e = (0..k).fold(0.0f64, |a, i| x[t * k + i].mul_add(w[i * m + j], a));
                    assert_eq!(out[t * m + j].to_bits(), e.to_bits(), "n={n} t={t} j={j}");
                }
            }
        }
    }

    #[test]
    fn transposed_products_agree_with_naive() {
        let (n, k, m) = (3, 4, 5);
        let x: Vec<f32> = (0..n * k).map(|i| i as f32 * 0.1).collect();
        let w: Vec<f32> = (0..k * m).map(|i| 1.0 - i as f32 * 0.05).collect();
        let dy: Vec<f32> = (0..n * m).map(|i| (i as f32).sin()).collect();
        let mut dx = vec![0.0; n * k];
        matmul_nt(&dy, n, m, &w, k, &mut dx);
        let mut dw = vec![0.0; k * m];
        matmul_tn_acc(&x, n, k, &dy, m, &mut dw);
        for t in 0..n {
            for i in 0..k {
                let e: f32 = (0..m).map(|j| dy[t * m + j] * w[i * m + j]).sum();
                assert!((dx[t * k + i] - e).abs() < 1e-5);
            }
        }
        for i in 0..k {
            for j in 0..m {
                let e: f32 = (0..n).map(|t| x[t * k + i] * dy[t * m + j]).sum();
                assert!((dw[i * m + j] - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rope_inverse_round_trips() {
        let orig: Vec<f32> = (0..32).map(|i| i as f32 * 0.3 - 2.0).collect();
        let table = RopeTable::new(32, 64, 10_000.0);
        let mut x = orig.clone();
        table.apply(&mut x, 17, false);
        table.apply(&mut x, 17, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
