//! Feature-level autoregression head.
//!
//! The head predicts the target's next feature from the feature sequence and
//! a token sequence. It owns an FC layer (fused width `2h` down to `h`, with
//! bias) and one decoder block shaped like a target block. The token
//! embedding and LM head are borrowed from the target at every call and never
//! trained.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, usage_err, Result};
use crate::model::{block_init, AttentionMask, BlockVars, BlockWeights, KVCache, TransformerWeights, BLOCK_TENSORS};
use crate::tensor::kernels::{self, RopeTable, Scalar};
use crate::tensor::Tensor;

/// Which streams the head sees at element `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftInputMode {
    /// `(f_i, t_{i+1})`: the token one step ahead of the feature.
    #[default]
    FeatureShiftedToken,
    /// `(f_i, t_i)`.
    FeatureUnshiftedToken,
    /// `t_i` alone.
    TokenOnly,
    /// `f_i` alone.
    FeatureOnly,
}

impl DraftInputMode {
    pub const ALL: [DraftInputMode; 4] = [
        DraftInputMode::FeatureShiftedToken,
        DraftInputMode::FeatureUnshiftedToken,
        DraftInputMode::TokenOnly,
        DraftInputMode::FeatureOnly,
    ];

    pub fn uses_feature(self) -> bool {
        !matches!(self, DraftInputMode::TokenOnly)
    }

    pub fn uses_token(self) -> bool {
        !matches!(self, DraftInputMode::FeatureOnly)
    }

    /// Feature and token are fused through the FC layer.
    pub fn fused(self) -> bool {
        self.uses_feature() && self.uses_token()
    }

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            DraftInputMode::FeatureShiftedToken => "shifted",
            DraftInputMode::FeatureUnshiftedToken => "unshifted",
            DraftInputMode::TokenOnly => "token",
            DraftInputMode::FeatureOnly => "feature",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.short_name() == s)
    }

    /// Token this mode reads from an element.
    pub fn token_of(self, e: &DraftElement) -> u32 {
        match self {
            DraftInputMode::FeatureShiftedToken => e.next_token,
            _ => e.token,
        }
    }
}

/// One step of the head's input sequence: feature `f_i` with both tokens
/// around it, `t_i` (the token the feature was computed at) and `t_{i+1}`
/// (the token sampled from that feature's distribution).
#[derive(Clone, Debug, PartialEq)]
pub struct DraftElement {
    pub feature: Vec<f32>,
    pub token: u32,
    pub next_token: u32,
}

/// Assembles the head input for `mode`.
///
/// `features` is `[n, h]`; `tokens` holds the mode's token stream (shifted or
/// unshifted is the caller's choice). Fused modes return `[n, 2h]` with the
/// feature first; single-stream modes return `[n, h]`.
pub fn ablation_input_builder(
    mode: DraftInputMode,
    embedding: &Tensor,
    features: Option<&Tensor>,
    tokens: Option<&[u32]>,
) -> Result<Tensor> {
    let h = embedding.cols();
    let feats = match (mode.uses_feature(), features) {
        (true, None) => return Err(usage_err!("{mode:?} needs a feature stream")),
        (true, Some(f)) => {
            if f.cols() != h {
                return Err(dim_err!("feature width {} != hidden {h}", f.cols()));
            }
            Some(f)
        }
        (false, _) => None,
    };
    let toks = match (mode.uses_token(), tokens) {
        (true, None) => return Err(usage_err!("{mode:?} needs a token stream")),
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    let n = feats.map(|f| f.rows()).or(toks.map(<[u32]>::len)).unwrap_or(0);
    if let (Some(f), Some(t)) = (feats, toks) {
        if f.rows() != t.len() {
            return Err(usage_err!("{} features but {} tokens", f.rows(), t.len()));
        }
    }
    if n == 0 {
        return Err(usage_err!("empty draft input"));
    }
    let vocab = embedding.rows();
    let embed = |t: u32| -> Result<&[f32]> {
        if t as usize >= vocab {
            return Err(usage_err!("token {t} outside vocabulary of {vocab}"));
        }
        Ok(embedding.row(t as usize))
    };
    let width = if mode.fused() { 2 * h } else { h };
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        if let Some(f) = feats {
            out.extend_from_slice(f.row(i));
        }
        if let Some(t) = toks {
            out.extend_from_slice(embed(t[i])?);
        }
    }
    Tensor::new(vec![n, width], out)
}

/// Trainable parameters of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftHeadWeights {
    pub mode: DraftInputMode,
    /// `[2h, h]` and `[h]`; present only for fused modes.
    pub fc: Option<(Tensor, Tensor)>,
    pub layer: BlockWeights,
}

/// A draft head bound to the target dimensions it was built for.
#[derive(Clone, Debug)]
pub struct DraftHead {
    pub weights: DraftHeadWeights,
    num_heads: usize,
    rope: Arc<RopeTable>,
}

impl PartialEq for DraftHead {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.num_heads == other.num_heads
    }
}

impl DraftHead {
    /// Seeded init sized to `target`. The FC weight uses std `1/sqrt(2h)` so
    /// the fused input keeps its scale; the block matches target init.
    pub fn init(target: &TransformerWeights, mode: DraftInputMode, seed: u64) -> Self {
        let c = &target.config;
        let h = c.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fc = mode.fused().then(|| {
            let w = crate::model::normal_tensor(&[2 * h, h], 1.0 / ((2 * h) as f32).sqrt(), &mut rng);
            (w, Tensor::zeros(&[h]))
        });
        let layer = block_init(h, c.ffn_dim, &mut rng);
        Self::from_weights(target, DraftHeadWeights { mode, fc, layer }).expect("fresh weights match target")
    }

    /// Wraps loaded weights, checking shapes against `target`.
    pub fn from_weights(target: &TransformerWeights, weights: DraftHeadWeights) -> Result<Self> {
        let c = &target.config;
        let h = c.hidden_dim;
        match (&weights.fc, weights.mode.fused()) {
            (Some((w, b)), true) => {
                if w.shape() != [2 * h, h] || b.shape() != [h] {
                    return Err(dim_err!("fc shapes {:?} / {:?} for hidden {h}", w.shape(), b.shape()));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(usage_err!("{:?} has no FC layer", weights.mode)),
            (None, true) => return Err(usage_err!("{:?} needs an FC layer", weights.mode)),
        }
        let l = &weights.layer;
        if l.wq.shape() != [h, h] || l.attn_norm.shape() != [h] || l.w_down.cols() != h {
            return Err(dim_err!("draft block does not match hidden {h}"));
        }
        Ok(Self { weights, num_heads: c.num_heads, rope: target.rope().clone() })
    }

    pub fn mode(&self) -> DraftInputMode {
        self.weights.mode
    }

    pub fn new_cache(&self, target: &TransformerWeights) -> KVCache {
        KVCache::new(1, target.config.hidden_dim, target.config.max_positions)
    }

    /// Every trainable tensor with its checkpoint name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.weights.fc {
            out.push(("fc.weight".to_string(), w));
            out.push(("fc.bias".to_string(), b));
        }
        for (name, t) in BLOCK_TENSORS.iter().zip(self.weights.layer.tensors()) {
            out.push((format!("layer.{name}"), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some((w, b)) = &mut self.weights.fc {
            out.push(w);
            out.push(b);
        }
        out.extend(self.weights.layer.tensors_mut());
        out
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Predicted next features for `elements`, appended to `cache` at
    /// `positions` under `mask`.
    pub fn forward_elements(
        &self,
        target: &TransformerWeights,
        elements: &[&DraftElement],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut KVCache,
    ) -> Result<Tensor> {
        let mode = self.mode();
        let h = target.config.hidden_dim;
        let feats = if mode.uses_feature() {
            let mut data = Vec::with_capacity(elements.len() * h);
            for e in elements {
                if e.feature.len() != h {
                    return Err(dim_err!("element feature width {} != {h}", e.feature.len()));
                }
                data.extend_from_slice(&e.feature);
            }
            Some(Tensor::new(vec![elements.len(), h], data)?)
        } else {
            None
        };
        let toks: Vec<u32> = elements.iter().map(|e| mode.token_of(e)).collect();
        self.forward(target, feats.as_ref(), Some(&toks), positions, mask, cache)
    }

    /// Draft forward over explicit streams; see [`ablation_input_builder`].
    pub fn forward(
        &self,
        target: &TransformerWeights,
        features: Option<&Tensor>,
        tokens: Option<&[u32]>,
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut KVCache,
    ) -> Result<Tensor> {
        let input = ablation_input_builder(self.mode(), &target.embedding, features, tokens)?;
        let n = input.rows();
        let h = target.config.hidden_dim;
        if positions.len() != n || mask.rows() != n {
            return Err(dim_err!("{n} inputs, {} positions, {} mask rows", positions.len(), mask.rows()));
        }
        mask.validate(cache.len())?;
        if cache.len() + n > cache.capacity() {
            return Err(crate::Error::Capacity(format!(
                "draft cache holds {} of {} slots, cannot add {n}",
                cache.len(),
                cache.capacity()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.rope.max_positions()) {
            return Err(crate::Error::Capacity(format!("draft position {p} out of range")));
        }
        let mut x = match &self.weights.fc {
            Some((w, b)) => {
                let mut x = vec![0.0; n * h];
                kernels::matmul_packed(input.data(), n, w.packed(), &mut x);
                for row in x.chunks_mut(h) {
                    for (v, &bv) in row.iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                x
            }
            None => input.into_data(),
        };
        let past = cache.len();
        self.weights
            .layer
            .forward(&mut x, n, positions, mask, past, &mut cache.layers[0], self.num_heads, &self.rope);
        cache.commit(positions);
        Tensor::new(vec![n, h], x)
    }

    /// Binds the trainable tensors onto `tape`.
    pub(crate) fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> HeadVars {
        let fc = self.weights.fc.as_ref().map(|(w, b)| (tape.leaf(w, true), tape.leaf(b, true)));
        let layer = self.weights.layer.bind(tape, true);
        HeadVars { fc, layer }
    }

    /// Differentiable head over packed sequences. `input` is the output of
    /// [`ablation_input_builder`]-style fusion already on the tape.
    pub(crate) fn forward_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &HeadVars,
        input: Var,
        positions: &[usize],
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let x = match vars.fc {
            Some((w, b)) => {
                let x = tape.matmul(input, w)?;
                tape.add_row(x, b)?
            }
            None => input,
        };
        vars.layer.forward(tape, x, positions, segments, self.num_heads, &self.rope)
    }
}

/// Tape handles for a bound head, in [`DraftHead::named_tensors`] order.
pub(crate) struct HeadVars {
    pub(crate) fc: Option<(Var, Var)>,
    pub(crate) layer: BlockVars,
}

impl HeadVars {
    pub(crate) fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        if let Some((w, b)) = self.fc {
            v.push(w);
            v.push(b);
        }
        v.extend(self.layer.all);
        v
    }
}

/// `softmax(lm_head(feature) / T)` in `f64`. At `T = 0` this is one-hot at
/// the argmax.
pub fn predict_distribution(target: &TransformerWeights, feature: &[f32], temperature: f64) -> Result<Vec<f64>> {
    if feature.len() != target.config.hidden_dim {
        return Err(dim_err!("feature width {} != {}", feature.len(), target.config.hidden_dim));
    }
    Ok(logits_to_dist(&target.lm_head_row(feature), temperature))
}

/// Temperature softmax of one logit row, computed in `f64`.
pub fn logits_to_dist(logits: &[f32], temperature: f64) -> Vec<f64> {
    let mut d: Vec<f64> = logits.iter().map(|&x| f64::from(x)).collect();
    kernels::softmax_in_place(&mut d, temperature);
    d
}
