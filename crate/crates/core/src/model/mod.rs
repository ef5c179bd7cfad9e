//! Decoder-only target transformer.
//!
//! The model exposes its *feature*: the hidden state after the final
//! RMSNorm, immediately before the LM head, so `lm_head(feature)` is exactly
//! the next-token logit map.

mod block;
mod cache;
mod mask;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use block::BlockWeights;
pub(crate) use block::{normal as normal_tensor, BlockVars, BLOCK_TENSORS, NORM_EPS};
pub use cache::KVCache;
pub use mask::AttentionMask;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, usage_err, validation_err, Error, Result};
use crate::sampling::{check_distribution, Sampler};
use crate::tensor::kernels::{self, RopeTable, Scalar};
use crate::tensor::Tensor;

pub const ROPE_THETA: f32 = 10_000.0;
const INIT_STD: f32 = 0.02;

/// Shape and seed of a target model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub seed: u64,
    /// Extra blocks appended after the trained ones whose output projections
    /// are zero: they cost a full block of compute and memory traffic but
    /// leave the function unchanged.
    #[serde(default)]
    pub identity_layers: usize,
    #[serde(default)]
    pub identity_ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 256,
            max_positions: 512,
            seed: 0,
            identity_layers: 0,
            identity_ffn_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(validation_err!("{name} must be positive"));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(validation_err!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim,
                self.num_heads
            ));
        }
        if (self.hidden_dim / self.num_heads) % 2 != 0 {
            return Err(validation_err!("head dimension must be even for rotary encoding"));
        }
        if self.identity_layers > 0 && self.identity_ffn_dim == 0 {
            return Err(validation_err!("identity_ffn_dim must be positive when identity_layers > 0"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn total_layers(&self) -> usize {
        self.num_layers + self.identity_layers
    }

    pub(crate) fn rope(&self) -> Arc<RopeTable> {
        Arc::new(RopeTable::new(self.head_dim(), self.max_positions, ROPE_THETA))
    }
}

/// All parameters of the target model. Embedding and LM head are separate
/// tensors.
#[derive(Clone, Debug)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<BlockWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
    rope: Arc<RopeTable>,
}

impl PartialEq for TransformerWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embedding == other.embedding
            && self.layers == other.layers
            && self.final_norm == other.final_norm
            && self.lm_head == other.lm_head
    }
}

/// Per-token outputs of a target forward.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[n, hidden]` post-norm features.
    pub features: Tensor,
    /// `[n, vocab]` logits.
    pub logits: Tensor,
}

/// Seeded scaled-normal initialization. Residual output projections are
/// scaled by `1/sqrt(2 * layers)`.
pub fn init_target(config: &ModelConfig) -> Result<TransformerWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (v, h) = (config.vocab_size, config.hidden_dim);
    let out_std = INIT_STD / ((2 * config.num_layers) as f32).sqrt();
    let embedding = block::normal(&[v, h], INIT_STD, &mut rng);
    let mut layers = Vec::with_capacity(config.total_layers());
    for _ in 0..config.num_layers {
        layers.push(BlockWeights::init(h, config.ffn_dim, INIT_STD, out_std, false, &mut rng));
    }
    for _ in 0..config.identity_layers {
        layers.push(BlockWeights::init(h, config.identity_ffn_dim, INIT_STD, out_std, true, &mut rng));
    }
    let lm_head = block::normal(&[h, v], INIT_STD, &mut rng);
    Ok(TransformerWeights {
        config: config.clone(),
        embedding,
        layers,
        final_norm: Tensor::ones(&[h]),
        lm_head,
        rope: config.rope(),
    })
}

/// A fresh block sized like a target block, for heads stacked on a target.
pub(crate) fn block_init(hidden: usize, ffn: usize, rng: &mut ChaCha8Rng) -> BlockWeights {
    BlockWeights::init(hidden, ffn, INIT_STD, INIT_STD / 2f32.sqrt(), false, rng)
}

impl TransformerWeights {
    /// Assembles weights from named tensors, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: Tensor,
        layers: Vec<BlockWeights>,
        final_norm: Tensor,
        lm_head: Tensor,
    ) -> Result<Self> {
        config.validate()?;
        let w = Self { rope: config.rope(), config, embedding, layers, final_norm, lm_head };
        w.check_shapes()?;
        Ok(w)
    }

    /// Appends `count` function-preserving blocks with hidden FFN width
    /// `ffn`, turning a trained model into a costlier one with identical
    /// outputs.
    pub fn with_identity_layers(&self, count: usize, ffn: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.identity_layers += count;
        config.identity_ffn_dim = if config.identity_layers == count { ffn } else { config.identity_ffn_dim };
        if config.identity_ffn_dim != ffn {
            return Err(usage_err!("existing identity blocks use ffn {}, not {ffn}", config.identity_ffn_dim));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1d);
        let h = config.hidden_dim;
        let mut layers = self.layers.clone();
        for _ in 0..count {
            layers.push(BlockWeights::init(h, ffn, INIT_STD, INIT_STD, true, &mut rng));
        }
        Self::from_parts(config, self.embedding.clone(), layers, self.final_norm.clone(), self.lm_head.clone())
    }

    /// The model with its function-preserving blocks removed; it computes
    /// the same outputs at a fraction of the cost.
    pub fn without_identity_layers(&self) -> Result<Self> {
        let mut config = self.config.clone();
        config.identity_layers = 0;
        config.identity_ffn_dim = 0;
        let layers = self.layers[..config.num_layers].to_vec();
        Self::from_parts(config, self.embedding.clone(), layers, self.final_norm.clone(), self.lm_head.clone())
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (v, h) = (c.vocab_size, c.hidden_dim);
        let expect = |t: &Tensor, s: &[usize], what: &str| -> Result<()> {
            if t.shape() != s {
                return Err(dim_err!("{what}: expected {s:?}, got {:?}", t.shape()));
            }
            Ok(())
        };
        expect(&self.embedding, &[v, h], "embedding")?;
        expect(&self.final_norm, &[h], "final_norm")?;
        expect(&self.lm_head, &[h, v], "lm_head")?;
        if self.layers.len() != c.total_layers() {
            return Err(dim_err!("expected {} layers, got {}", c.total_layers(), self.layers.len()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let f = if i < c.num_layers { c.ffn_dim } else { c.identity_ffn_dim };
            let shapes: [&[usize]; 9] = [&[h], &[h, h], &[h, h], &[h, h], &[h, h], &[h], &[h, f], &[h, f], &[f, h]];
            for ((t, s), name) in l.tensors().iter().zip(shapes).zip(BLOCK_TENSORS) {
                expect(t, s, &format!("layer {i} {name}"))?;
            }
        }
        Ok(())
    }

    pub(crate) fn rope(&self) -> &Arc<RopeTable> {
        &self.rope
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable tensors in [`TransformerWeights::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Total parameter bytes as stored in `f32`.
    pub fn byte_size(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel() * 4).sum()
    }

    /// SHA-256 over the config and every tensor's bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn new_cache(&self) -> KVCache {
        let c = &self.config;
        KVCache::new(c.total_layers(), c.hidden_dim, c.max_positions)
    }

    /// Frozen embedding rows for `tokens`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let (v, h) = (self.config.vocab_size, self.config.hidden_dim);
        let mut out = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            if t as usize >= v {
                return Err(usage_err!("token {t} outside vocabulary of {v}"));
            }
            out.extend_from_slice(self.embedding.row(t as usize));
        }
        Ok(out)
    }

    /// Processes `tokens` at `positions`, appending their keys and values to
    /// `cache`. `mask` has one row per token and `cache.len() + n` columns.
    pub fn forward(
        &self,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut KVCache,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(usage_err!("forward needs at least one token"));
        }
        if positions.len() != n || mask.rows() != n {
            return Err(dim_err!(
                "{n} tokens, {} positions, {} mask rows",
                positions.len(),
                mask.rows()
            ));
        }
        mask.validate(cache.len())?;
        if let Some(&p) = positions.iter().find(|&&p| p >= c.max_positions) {
            return Err(Error::Capacity(format!("position {p} >= max_positions {}", c.max_positions)));
        }
        if cache.len() + n > cache.capacity() {
            return Err(Error::Capacity(format!(
                "cache holds {} of {} slots, cannot add {n}",
                cache.len(),
                cache.capacity()
            )));
        }
        if cache.num_layers() != self.layers.len() || cache.width() != c.hidden_dim {
            return Err(dim_err!("cache does not match the model"));
        }
        let mut x = self.embed(tokens)?;
        let past = cache.len();
        for (layer, kv) in self.layers.iter().zip(cache.layers.iter_mut()) {
            layer.forward(&mut x, n, positions, mask, past, kv, c.num_heads, &self.rope);
        }
        cache.commit(positions);
        for row in x.chunks_mut(c.hidden_dim) {
            kernels::rmsnorm_in_place(row, self.final_norm.data(), NORM_EPS);
        }
        let features = Tensor::new(vec![n, c.hidden_dim], x)?;
        let logits = self.lm_head(&features)?;
        Ok(ForwardOutput { features, logits })
    }

    /// Causal forward over `tokens` at consecutive positions after the cache.
    pub fn forward_causal(&self, tokens: &[u32], cache: &mut KVCache) -> Result<ForwardOutput> {
        let past = cache.len();
        let start = cache.positions().last().map_or(0, |p| p + 1);
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        self.forward(tokens, &positions, &AttentionMask::causal(past, tokens.len()), cache)
    }

    /// `features x lm_head`, no bias.
    pub fn lm_head(&self, features: &Tensor) -> Result<Tensor> {
        let h = self.config.hidden_dim;
        if features.cols() != h {
            return Err(dim_err!("feature width {} != hidden_dim {h}", features.cols()));
        }
        let n = features.numel() / h;
        let v = self.config.vocab_size;
        let mut out = vec![0.0; n * v];
        kernels::matmul_packed(features.data(), n, self.lm_head.packed(), &mut out);
        let mut shape = features.shape().to_vec();
        *shape.last_mut().unwrap() = v;
        Tensor::new(shape, out)
    }

    /// Logits for a single feature row.
    pub fn lm_head_row(&self, feature: &[f32]) -> Vec<f32> {
        let v = self.config.vocab_size;
        let mut out = vec![0.0; v];
        kernels::matmul_packed(feature, 1, self.lm_head.packed(), &mut out);
        out
    }

    /// Differentiable forward over packed sequences. Each segment
    /// `(start, len)` of `tokens` is an independent sequence at positions
    /// `0..len`. Returns the feature and logit nodes.
    pub(crate) fn forward_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &TargetVars,
        tokens: &[u32],
        segments: &[(usize, usize)],
    ) -> Result<(Var, Var)> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut positions = vec![0; tokens.len()];
        for &(s, l) in segments {
            for (i, p) in positions[s..s + l].iter_mut().enumerate() {
                *p = i;
            }
        }
        let mut x = tape.gather(vars.embedding, &ids)?;
        for b in &vars.layers {
            x = b.forward(tape, x, &positions, segments, self.config.num_heads, &self.rope)?;
        }
        let f = tape.rmsnorm(x, vars.final_norm, f64::from(NORM_EPS))?;
        let logits = tape.matmul(f, vars.lm_head)?;
        Ok((f, logits))
    }

    pub(crate) fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> TargetVars {
        let embedding = tape.leaf(&self.embedding, trainable);
        let layers = self.layers.iter().map(|l| l.bind(tape, trainable)).collect();
        let final_norm = tape.leaf(&self.final_norm, trainable);
        let lm_head = tape.leaf(&self.lm_head, trainable);
        TargetVars { embedding, layers, final_norm, lm_head }
    }
}

/// Tape handles for a bound target, in [`TransformerWeights::named_tensors`] order.
pub(crate) struct TargetVars {
    pub(crate) embedding: Var,
    pub(crate) layers: Vec<BlockVars>,
    pub(crate) final_norm: Var,
    pub(crate) lm_head: Var,
}

impl TargetVars {
    pub(crate) fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embedding];
        for l in &self.layers {
            v.extend(l.all);
        }
        v.push(self.final_norm);
        v.push(self.lm_head);
        v
    }
}

/// Draws a token from `dist`.
///
/// At temperature 0 this is the argmax (lowest index on ties) and no
/// randomness is consumed. Otherwise the distribution is sharpened or
/// flattened as `p^(1/T)` and sampled by inverse CDF with one variate.
pub fn sample_token(dist: &[f64], temperature: f64, sampler: &mut impl Sampler) -> Result<u32> {
    check_distribution(dist)?;
    if temperature < 0.0 {
        return Err(usage_err!("temperature must be non-negative, got {temperature}"));
    }
    if temperature == 0.0 {
        return Ok(kernels::argmax(dist) as u32);
    }
    if temperature == 1.0 {
        return Ok(sampler.categorical(dist) as u32);
    }
    let mut adj: Vec<f64> = dist.iter().map(|&p| p.powf(1.0 / temperature)).collect();
    let s: f64 = adj.iter().sum();
    for p in &mut adj {
        *p /= s;
    }
    Ok(sampler.categorical(&adj) as u32)
}

#[cfg(test)]
pub(crate) mod tests;
