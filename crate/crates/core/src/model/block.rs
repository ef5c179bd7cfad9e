//! Pre-norm decoder block: RMSNorm, rotary multi-head attention, SwiGLU MLP.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::cache::LayerCache;
use super::mask::AttentionMask;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::kernels::{self, RopeTable, Scalar};
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f32 = 1e-5;

/// Parameters of one decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

pub(crate) const BLOCK_TENSORS: [&str; 9] =
    ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"];

pub(crate) fn normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Tensor {
    let d = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).expect("shape is valid")
}

impl BlockWeights {
    /// Scaled-normal init. Output projections use `out_std`; with
    /// `identity` they are zero, so the block passes its input through
    /// unchanged.
    pub(crate) fn init(hidden: usize, ffn: usize, std: f32, out_std: f32, identity: bool, rng: &mut impl Rng) -> Self {
        let wq = normal(&[hidden, hidden], std, rng);
        let wk = normal(&[hidden, hidden], std, rng);
        let wv = normal(&[hidden, hidden], std, rng);
        let wo = if identity { Tensor::zeros(&[hidden, hidden]) } else { normal(&[hidden, hidden], out_std, rng) };
        let w_gate = normal(&[hidden, ffn], std, rng);
        let w_up = normal(&[hidden, ffn], std, rng);
        let w_down = if identity { Tensor::zeros(&[ffn, hidden]) } else { normal(&[ffn, hidden], out_std, rng) };
        Self {
            attn_norm: Tensor::ones(&[hidden]),
            wq,
            wk,
            wv,
            wo,
            mlp_norm: Tensor::ones(&[hidden]),
            w_gate,
            w_up,
            w_down,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }

    pub(crate) fn from_tensors(t: Vec<Tensor>) -> Self {
        let mut it = t.into_iter();
        let mut next = || it.next().expect("nine block tensors");
        Self {
            attn_norm: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            mlp_norm: next(),
            w_gate: next(),
            w_up: next(),
            w_down: next(),
        }
    }

    /// Runs `n` rows of `x` (`[n, hidden]`, updated in place) through the
    /// block, writing their keys and values to cache slots `past..past + n`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &self,
        x: &mut [f32],
        n: usize,
        positions: &[usize],
        mask: &AttentionMask,
        past: usize,
        kv: &mut LayerCache,
        heads: usize,
        rope: &RopeTable,
    ) {
        let h = self.wq.rows();
        let f = self.ffn_dim();
        let hd = h / heads;
        let mut xn = x.to_vec();
        for row in xn.chunks_mut(h) {
            kernels::rmsnorm_in_place(row, self.attn_norm.data(), NORM_EPS);
        }
        let mut q = vec![0.0; n * h];
        kernels::matmul_packed(&xn, n, self.wq.packed(), &mut q);
        let kslots = &mut kv.k[past * h..(past + n) * h];
        kernels::matmul_packed(&xn, n, self.wk.packed(), kslots);
        let vslots = &mut kv.v[past * h..(past + n) * h];
        kernels::matmul_packed(&xn, n, self.wv.packed(), vslots);
        for (i, &pos) in positions.iter().enumerate() {
            for head in 0..heads {
                rope.apply(&mut q[i * h + head * hd..i * h + (head + 1) * hd], pos, false);
                let off = (past + i) * h + head * hd;
                rope.apply(&mut kv.k[off..off + hd], pos, false);
            }
        }

        let scale = 1.0 / (hd as f32).sqrt();
        let mut attn = vec![0.0f32; n * h];
        let mut scores = Vec::with_capacity(mask.cols());
        let mut slots = Vec::with_capacity(mask.cols());
        for i in 0..n {
            slots.clear();
            slots.extend(mask.row(i).iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j));
            for head in 0..heads {
                let off = head * hd;
                let qi = &q[i * h + off..i * h + off + hd];
                scores.clear();
                scores.extend(slots.iter().map(|&j| kernels::dot(qi, &kv.k[j * h + off..j * h + off + hd]) * scale));
                kernels::softmax_in_place(&mut scores, 1.0);
                let out = &mut attn[i * h + off..i * h + off + hd];
                for (&j, &p) in slots.iter().zip(&scores) {
                    kernels::axpy(out, p, &kv.v[j * h + off..j * h + off + hd]);
                }
            }
        }
        let mut o = vec![0.0; n * h];
        kernels::matmul_packed(&attn, n, self.wo.packed(), &mut o);
        for (a, b) in x.iter_mut().zip(&o) {
            *a += b;
        }

        xn.copy_from_slice(x);
        for row in xn.chunks_mut(h) {
            kernels::rmsnorm_in_place(row, self.mlp_norm.data(), NORM_EPS);
        }
        let mut g = vec![0.0; n * f];
        let mut u = vec![0.0; n * f];
        kernels::matmul_packed(&xn, n, self.w_gate.packed(), &mut g);
        kernels::matmul_packed(&xn, n, self.w_up.packed(), &mut u);
        for (a, b) in g.iter_mut().zip(&u) {
            *a = kernels::silu(*a) * b;
        }
        kernels::matmul_packed(&g, n, self.w_down.packed(), &mut o);
        for (a, b) in x.iter_mut().zip(&o) {
            *a += b;
        }
    }

    pub(crate) fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> BlockVars {
        let v: Vec<Var> = self.tensors().iter().map(|t| tape.leaf(t, trainable)).collect();
        BlockVars::from_vars(&v)
    }
}

/// Tape handles for one block's parameters, in [`BlockWeights::tensors`] order.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockVars {
    pub(crate) all: [Var; 9],
}

impl BlockVars {
    pub(crate) fn from_vars(v: &[Var]) -> Self {
        Self { all: v[..9].try_into().expect("nine block vars") }
    }

    /// Differentiable block over rows of `x` split into causal `segments`.
    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        positions: &[usize],
        segments: &[(usize, usize)],
        heads: usize,
        rope: &std::sync::Arc<RopeTable>,
    ) -> Result<Var> {
        let [attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down] = self.all;
        let eps = f64::from(NORM_EPS);
        let xn = tape.rmsnorm(x, attn_norm, eps)?;
        let q = tape.matmul(xn, wq)?;
        let k = tape.matmul(xn, wk)?;
        let v = tape.matmul(xn, wv)?;
        let q = tape.rope(q, heads, positions, rope)?;
        let k = tape.rope(k, heads, positions, rope)?;
        let a = tape.causal_attention(q, k, v, heads, segments)?;
        let o = tape.matmul(a, wo)?;
        let x = tape.add(x, o)?;
        let xn = tape.rmsnorm(x, mlp_norm, eps)?;
        let g = tape.matmul(xn, w_gate)?;
        let u = tape.matmul(xn, w_up)?;
        let g = tape.silu(g);
        let gu = tape.mul(g, u)?;
        let d = tape.matmul(gu, w_down)?;
        tape.add(x, d)
    }
}
