//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node in creation order, which is
//! already a topological order, so [`Tape::backward`] is a single reverse
//! sweep. Leaves hold accumulated gradients across sweeps; intermediate
//! gradients are rebuilt on every sweep.
//!
//! The tape is generic over the element type. Models train in `f32`;
//! [`gradient_check`] replays the same graph-building closure in `f64` so
//! that central differences are accurate enough to be a real oracle.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, usage_err, validation_err, Result};
use crate::tensor::kernels::{self, RopeTable, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Concat(usize, usize),
    Gather { table: usize, ids: Vec<usize> },
    RmsNorm { x: usize, w: usize, inv: Vec<T> },
    Rope { x: usize, heads: usize, positions: Vec<usize>, table: Arc<RopeTable> },
    Attention { q: usize, k: usize, v: usize, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<T> },
    Silu(usize),
    Softmax { x: usize, temperature: T },
    Square(usize),
    Sum(usize),
    Mean(usize),
    SmoothL1(usize, usize),
    SoftCrossEntropy { logits: usize, target: Vec<T> },
    CrossEntropy { logits: usize, labels: Vec<Option<u32>> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

impl<T> Node<T> {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
}

/// Recorded computation graph.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { shape, value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let value = t.data().iter().map(|&v| T::of(f64::from(v))).collect();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value,
            grad: None,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Node value converted to an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let data = n.value.iter().map(|x| x.f64() as f32).collect();
        Tensor::new(n.shape.clone(), data).expect("node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Leaf gradient as an `f32` tensor, zeros if nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let data = match &n.grad {
            Some(g) => g.iter().map(|x| x.f64() as f32).collect(),
            None => vec![0.0; n.value.len()],
        };
        Tensor::new(n.shape.clone(), data).expect("node shapes are valid")
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err!("{what} shape mismatch: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    /// `[.., k] x [k, m]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(dim_err!("matmul shape mismatch: {sa:?} x {sb:?}"));
        }
        let (k, m) = (sb[0], sb[1]);
        let n = self.nodes[a.0].value.len() / k;
        let mut out = vec![T::zero(); n * m];
        kernels::matmul(&self.nodes[a.0].value, n, k, &self.nodes[b.0].value, m, &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = m;
        Ok(self.push(shape, out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, op, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a `[m]` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let m = self.nodes[a.0].cols();
        if self.nodes[bias.0].value.len() != m {
            return Err(dim_err!(
                "bias of {} elements for rows of width {m}",
                self.nodes[bias.0].value.len()
            ));
        }
        let b = &self.nodes[bias.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a.0, bias.0), &[a.0, bias.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.nodes[a.0].value.iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a.0, s), &[a.0])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.rows() != nb.rows() {
            return Err(dim_err!("concat row mismatch: {:?} vs {:?}", na.shape, nb.shape));
        }
        let (ca, cb) = (na.cols(), nb.cols());
        let mut out = Vec::with_capacity(na.value.len() + nb.value.len());
        for r in 0..na.rows() {
            out.extend_from_slice(&na.value[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&nb.value[r * cb..(r + 1) * cb]);
        }
        let mut shape = na.shape.clone();
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.push(shape, out, Op::Concat(a.0, b.0), &[a.0, b.0]))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0];
        let (rows, c) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(usage_err!("gather index {id} out of range for {rows} rows"));
            }
            out.extend_from_slice(&t.value[id * c..(id + 1) * c]);
        }
        let ids = ids.to_vec();
        let n = ids.len();
        Ok(self.push(vec![n, c], out, Op::Gather { table: table.0, ids }, &[table.0]))
    }

    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let c = self.nodes[x.0].cols();
        if self.nodes[w.0].value.len() != c {
            return Err(dim_err!(
                "rmsnorm weight has {} elements, input last axis is {c}",
                self.nodes[w.0].value.len()
            ));
        }
        let mut out = self.nodes[x.0].value.clone();
        let wv = &self.nodes[w.0].value;
        let inv = out
            .chunks_mut(c)
            .map(|row| kernels::rmsnorm_in_place(row, wv, T::of(eps)))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::RmsNorm { x: x.0, w: w.0, inv }, &[x.0, w.0]))
    }

    /// Rotary position encoding per head; row `i` uses `positions[i]`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], table: &Arc<RopeTable>) -> Result<Var> {
        let n = &self.nodes[x.0];
        let c = n.cols();
        if n.rows() != positions.len() || c % heads != 0 {
            return Err(dim_err!(
                "rope on {:?} with {heads} heads and {} positions",
                n.shape,
                positions.len()
            ));
        }
        let hd = c / heads;
        let mut out = n.value.clone();
        for (row, &pos) in out.chunks_mut(c).zip(positions) {
            for h in row.chunks_mut(hd) {
                table.apply(h, pos, false);
            }
        }
        let op = Op::Rope { x: x.0, heads, positions: positions.to_vec(), table: Arc::clone(table) };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x.0]))
    }

    /// Multi-head causal self-attention. Rows are split into independent
    /// `(start, len)` segments; each row attends to itself and earlier rows of
    /// its own segment.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[(usize, usize)]) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, c) = (self.nodes[q.0].rows(), self.nodes[q.0].cols());
        if c % heads != 0 {
            return Err(dim_err!("width {c} not divisible by {heads} heads"));
        }
        let covered: usize = segments.iter().map(|s| s.1).sum();
        if covered != rows || segments.iter().any(|&(s, l)| s + l > rows) {
            return Err(dim_err!("segments cover {covered} of {rows} rows"));
        }
        let hd = c / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut out = vec![T::zero(); rows * c];
        let mut probs = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let off = h * hd;
                for i in 0..len {
                    let qi = &qv[(start + i) * c + off..(start + i) * c + off + hd];
                    let base = probs.len();
                    for j in 0..=i {
                        let kj = &kv[(start + j) * c + off..(start + j) * c + off + hd];
                        probs.push(kernels::dot(qi, kj) * scale);
                    }
                    kernels::softmax_in_place(&mut probs[base..], T::one());
                    let orow = &mut out[(start + i) * c + off..(start + i) * c + off + hd];
                    for j in 0..=i {
                        let vj = &vv[(start + j) * c + off..(start + j) * c + off + hd];
                        kernels::axpy(orow, probs[base + j], vj);
                    }
                }
            }
        }
        let op = Op::Attention { q: q.0, k: k.0, v: v.0, heads, segments: segments.to_vec(), probs };
        Ok(self.push(self.shape(q).to_vec(), out, op, &[q.0, k.0, v.0]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| kernels::silu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Silu(x.0), &[x.0])
    }

    /// Softmax along the last axis at a strictly positive temperature.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(usage_err!("differentiable softmax needs temperature > 0"));
        }
        let c = self.nodes[x.0].cols();
        let mut out = self.nodes[x.0].value.clone();
        let t = T::of(temperature);
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row, t);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x: x.0, temperature: t }, &[x.0]))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v * v).collect();
        self.push(self.shape(x).to_vec(), out, Op::Square(x.0), &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().fold(T::zero(), |a, &b| a + b);
        self.push(vec![1], vec![s], Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0].value;
        let s = n.iter().fold(T::zero(), |a, &b| a + b) / T::of(n.len() as f64);
        self.push(vec![1], vec![s], Op::Mean(x.0), &[x.0])
    }

    /// Mean Smooth-L1 with transition point 1.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "smooth_l1")?;
        let (p, t) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        let total = p.iter().zip(t).fold(T::zero(), |a, (&x, &y)| a + kernels::smooth_l1_elem(x - y));
        let loss = total / T::of(p.len() as f64);
        Ok(self.push(vec![1], vec![loss], Op::SmoothL1(pred.0, target.0), &[pred.0, target.0]))
    }

    /// Mean over rows of `-sum(target * log_softmax(logits))`. The target is
    /// data, not a node: no gradient flows into it.
    pub fn soft_cross_entropy(&mut self, target: &Tensor, logits: Var) -> Result<Var> {
        if target.shape() != self.shape(logits) {
            return Err(dim_err!(
                "soft_cross_entropy shape mismatch: {:?} vs {:?}",
                target.shape(),
                self.shape(logits)
            ));
        }
        crate::tensor::check_distribution_rows(target)?;
        let tv: Vec<T> = target.data().iter().map(|&v| T::of(f64::from(v))).collect();
        let node = &self.nodes[logits.0];
        let c = node.cols();
        let mut logp = vec![T::zero(); c];
        let mut total = T::zero();
        for (row, trow) in node.value.chunks(c).zip(tv.chunks(c)) {
            kernels::log_softmax(row, &mut logp);
            for (&t, &l) in trow.iter().zip(&logp) {
                total -= t * l;
            }
        }
        let loss = total / T::of(node.rows() as f64);
        Ok(self.push(vec![1], vec![loss], Op::SoftCrossEntropy { logits: logits.0, target: tv }, &[logits.0]))
    }

    /// Mean next-token cross-entropy over rows whose label is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<u32>]) -> Result<Var> {
        let node = &self.nodes[logits.0];
        let c = node.cols();
        if labels.len() != node.rows() {
            return Err(dim_err!("{} labels for {} rows", labels.len(), node.rows()));
        }
        let count = labels.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(usage_err!("cross_entropy with no labelled rows"));
        }
        let mut logp = vec![T::zero(); c];
        let mut total = T::zero();
        for (row, label) in node.value.chunks(c).zip(labels) {
            if let Some(l) = *label {
                let l = l as usize;
                if l >= c {
                    return Err(validation_err!("label {l} outside vocabulary of {c}"));
                }
                kernels::log_softmax(row, &mut logp);
                total -= logp[l];
            }
        }
        let loss = total / T::of(count as f64);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits: logits.0, labels: labels.to_vec() }, &[logits.0]))
    }

    fn add_grad(&mut self, idx: usize, contrib: &[T]) {
        let node = &mut self.nodes[idx];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn take_grad(&mut self, idx: usize) -> Vec<T> {
        let n = &mut self.nodes[idx];
        n.grad.take().unwrap_or_else(|| vec![T::zero(); n.value.len()])
    }

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(usage_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            self.add_grad(loss.0, &[T::one()]);
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            self.backprop_node(idx, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        // Temporarily move the op out so parent grads can be written freely.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let k = self.nodes[b].shape[0];
                let m = self.nodes[b].shape[1];
                let n = self.nodes[a].value.len() / k;
                if self.nodes[a].needs_grad {
                    let mut da = vec![T::zero(); n * k];
                    kernels::matmul_nt(g, n, m, &self.nodes[b].value, k, &mut da);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = self.take_grad(b);
                    kernels::matmul_tn_acc(&self.nodes[a].value, n, k, g, m, &mut db);
                    self.nodes[b].grad = Some(db);
                }
            }
            &Op::Add(a, b) => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            &Op::Sub(a, b) => {
                self.add_grad(a, g);
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                self.add_grad(b, &neg);
            }
            &Op::Mul(a, b) => {
                let da: Vec<T> = g.iter().zip(&self.nodes[b].value).map(|(&x, &y)| x * y).collect();
                let db: Vec<T> = g.iter().zip(&self.nodes[a].value).map(|(&x, &y)| x * y).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            &Op::AddRow(a, bias) => {
                self.add_grad(a, g);
                let m = self.nodes[bias].value.len();
                let mut db = vec![T::zero(); m];
                for row in g.chunks(m) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                self.add_grad(bias, &db);
            }
            &Op::Scale(a, s) => {
                let da: Vec<T> = g.iter().map(|&x| x * s).collect();
                self.add_grad(a, &da);
            }
            &Op::Concat(a, b) => {
                let (ca, cb) = (self.nodes[a].cols(), self.nodes[b].cols());
                let rows = self.nodes[a].rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if self.nodes[table].needs_grad {
                    let c = self.nodes[table].cols();
                    let mut dt = self.take_grad(table);
                    for (row, &id) in g.chunks(c).zip(ids) {
                        kernels::axpy(&mut dt[id * c..(id + 1) * c], T::one(), row);
                    }
                    self.nodes[table].grad = Some(dt);
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let (x, w) = (*x, *w);
                let c = self.nodes[x].cols();
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); c];
                let cf = T::of(c as f64);
                for (r, &ir) in inv.iter().enumerate() {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut proj = T::zero();
                    for j in 0..c {
                        let xhat = xr[j] * ir;
                        dw[j] += gr[j] * xhat;
                        proj += gr[j] * wv[j] * xhat;
                    }
                    proj /= cf;
                    for j in 0..c {
                        let xhat = xr[j] * ir;
                        dx[r * c + j] = ir * (gr[j] * wv[j] - xhat * proj);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
            }
            Op::Rope { x, heads, positions, table } => {
                let c = self.nodes[*x].cols();
                let hd = c / heads;
                let mut dx = g.to_vec();
                for (row, &pos) in dx.chunks_mut(c).zip(positions) {
                    for h in row.chunks_mut(hd) {
                        table.apply(h, pos, true);
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let c = self.nodes[q].cols();
                let hd = c / heads;
                let scale = T::one() / T::of(hd as f64).sqrt();
                let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); qv.len()];
                let mut dv = vec![T::zero(); qv.len()];
                let mut dp = Vec::new();
                let mut cursor = 0;
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let off = h * hd;
                        for i in 0..len {
                            let p = &probs[cursor..cursor + i + 1];
                            cursor += i + 1;
                            let ri = (start + i) * c + off;
                            let gi = &g[ri..ri + hd];
                            dp.clear();
                            let mut weighted = T::zero();
                            for (j, &pj) in p[..=i].iter().enumerate() {
                                let rj = (start + j) * c + off;
                                let d = kernels::dot(gi, &vv[rj..rj + hd]);
                                weighted += pj * d;
                                dp.push(d);
                                kernels::axpy(&mut dv[rj..rj + hd], p[j], gi);
                            }
                            for j in 0..=i {
                                let rj = (start + j) * c + off;
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                kernels::axpy(&mut dq[ri..ri + hd], ds, &kv[rj..rj + hd]);
                                kernels::axpy(&mut dk[rj..rj + hd], ds, &qv[ri..ri + hd]);
                            }
                        }
                    }
                }
                self.add_grad(q, &dq);
                self.add_grad(k, &dk);
                self.add_grad(v, &dv);
            }
            &Op::Silu(x) => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[x].value)
                    .map(|(&gv, &xv)| {
                        let s = T::one() / (T::one() + (-xv).exp());
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                self.add_grad(x, &dx);
            }
            &Op::Softmax { x, temperature } => {
                let c = self.nodes[x].cols();
                let y = &self.nodes[idx].value;
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s) / temperature;
                    }
                }
                self.add_grad(x, &dx);
            }
            &Op::Square(x) => {
                let two = T::of(2.0);
                let dx: Vec<T> = g.iter().zip(&self.nodes[x].value).map(|(&gv, &xv)| two * xv * gv).collect();
                self.add_grad(x, &dx);
            }
            &Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x].value.len()];
                self.add_grad(x, &dx);
            }
            &Op::Mean(x) => {
                let n = self.nodes[x].value.len();
                let dx = vec![g[0] / T::of(n as f64); n];
                self.add_grad(x, &dx);
            }
            &Op::SmoothL1(p, t) => {
                let n = T::of(self.nodes[p].value.len() as f64);
                let dp: Vec<T> = self.nodes[p]
                    .value
                    .iter()
                    .zip(&self.nodes[t].value)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        let s = if d.abs() < T::one() { d } else { d.signum() };
                        s * g[0] / n
                    })
                    .collect();
                if self.nodes[t].needs_grad {
                    let dt: Vec<T> = dp.iter().map(|&x| -x).collect();
                    self.add_grad(t, &dt);
                }
                self.add_grad(p, &dp);
            }
            Op::SoftCrossEntropy { logits, target } => {
                let node = &self.nodes[*logits];
                let (c, rows) = (node.cols(), node.rows());
                let scale = g[0] / T::of(rows as f64);
                let mut dx = node.value.clone();
                for (row, trow) in dx.chunks_mut(c).zip(target.chunks(c)) {
                    kernels::softmax_in_place(row, T::one());
                    let tsum = trow.iter().fold(T::zero(), |a, &b| a + b);
                    for (d, &t) in row.iter_mut().zip(trow) {
                        *d = (*d * tsum - t) * scale;
                    }
                }
                self.add_grad(*logits, &dx);
            }
            Op::CrossEntropy { logits, labels } => {
                let node = &self.nodes[*logits];
                let c = node.cols();
                let count = labels.iter().filter(|l| l.is_some()).count();
                let scale = g[0] / T::of(count as f64);
                let mut dx = node.value.clone();
                for (row, label) in dx.chunks_mut(c).zip(labels) {
                    match label {
                        Some(l) => {
                            kernels::softmax_in_place(row, T::one());
                            row[*l as usize] -= T::one();
                            for d in row.iter_mut() {
                                *d *= scale;
                            }
                        }
                        None => row.fill(T::zero()),
                    }
                }
                self.add_grad(*logits, &dx);
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Compares reverse-mode gradients with central differences.
///
/// `f` builds a scalar from leaves created for `params` (in order). Both the
/// reverse pass and the finite differences run in `f64`. At most
/// `max_coords_per_param` coordinates of each parameter are sampled
/// (deterministically). Returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check<F>(f: F, params: &[Tensor], epsilon: f64, max_coords_per_param: usize) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(usage_err!("epsilon {epsilon} outside [1e-5, 1e-2]"));
    }
    let eval = |ps: &[Tensor]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p, true)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(usage_err!("gradient_check function returned shape {:?}", tape.shape(out)));
        }
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = eval(params)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
        .collect();

    // Perturbations are applied on an f64 copy of the parameters.
    let base: Vec<Vec<f64>> = params.iter().map(|p| p.data().iter().map(|&x| f64::from(x)).collect()).collect();
    let eval64 = |pi: usize, ci: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let mut vars = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let mut vals = base[i].clone();
            if i == pi {
                vals[ci] += delta;
            }
            vars.push(tape.leaf_f64(p.shape(), vals, true));
        }
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords_per_param).into_vec()
        };
        for ci in coords {
            let numeric = (eval64(pi, ci, epsilon)? - eval64(pi, ci, -epsilon)?) / (2.0 * epsilon);
            let a = analytic[pi][ci];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

impl Tape<f64> {
    fn leaf_f64(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            grad: None,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }
}
