//! Training for the toy target and for draft heads.
//!
//! The target learns next-token prediction on a byte corpus. A draft head
//! learns to predict the target's next feature from the feature sequence and
//! a token stream, with loss `smooth_l1(f_hat, f) + w_cls * CE(p, lm_head(f_hat))`
//! where `p` is the target's distribution at that position. Input features
//! get uniform noise; regression targets stay clean. The embedding and LM
//! head enter the graph as constants, so they never receive gradients.

pub mod corpus;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

pub use corpus::{decode_bytes, encode_bytes, ingest_corpus, Corpus};

use crate::autodiff::{gradient_check, Tape, Var};
use crate::draft_head::{ablation_input_builder, logits_to_dist, DraftElement, DraftHead, DraftInputMode, HeadVars};
use crate::error::{usage_err, validation_err, Error, Result};
use crate::model::{init_target, AttentionMask, BlockVars, ModelConfig, TransformerWeights};
use crate::optim::{adamw_step, clip_grad_norm, AdamW, OptimizerState};
use crate::tensor::kernels::{self, Scalar};
use crate::tensor::{self, Tensor};

/// Tokens shared by consecutive windows when a sequence is split.
pub const SPLIT_OVERLAP: usize = 16;

/// Prompt tokens kept before the target's own continuation in
/// [`DataMode::TargetGenerated`].
pub const GENERATED_PROMPT_LEN: usize = 16;

/// Where head-training sequences come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Teacher-forced features over the corpus as written.
    #[default]
    FixedDataset,
    /// Each window keeps its prompt and continues with the target's greedy
    /// output.
    TargetGenerated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub betas: (f32, f32),
    pub weight_decay: f32,
    pub grad_clip: f32,
    /// Half-width of the uniform noise added to input features.
    pub noise: f32,
    pub w_cls: f32,
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Window length; longer sequences are split.
    pub seq_len: usize,
    pub seed: u64,
    pub data_mode: DataMode,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            betas: (0.9, 0.95),
            weight_decay: 0.0,
            grad_clip: 0.5,
            noise: 0.1,
            w_cls: 0.1,
            epochs: 1,
            batch_size: 8,
            seq_len: 128,
            seed: 0,
            data_mode: DataMode::FixedDataset,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.betas.0, self.betas.1, self.weight_decay, self.grad_clip, self.noise, self.w_cls];
        if finite.iter().any(|x| !x.is_finite()) {
            return Err(validation_err!("training hyperparameters must be finite"));
        }
        if self.lr <= 0.0 || self.grad_clip <= 0.0 {
            return Err(validation_err!("lr and grad_clip must be positive"));
        }
        if self.w_cls < 0.0 || self.noise < 0.0 || self.weight_decay < 0.0 {
            return Err(validation_err!("w_cls, noise and weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(validation_err!("betas must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(validation_err!("epochs and batch_size must be at least 1"));
        }
        if self.seq_len < SPLIT_OVERLAP + 2 {
            return Err(validation_err!("seq_len must be at least {}", SPLIT_OVERLAP + 2));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamW {
        AdamW { lr: self.lr, betas: self.betas, weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

/// One optimizer step of a training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub step: usize,
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainCurve {
    pub const CSV_HEADER: &'static str = "epoch,step,l_reg,l_cls,l_total";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.l_reg, r.l_cls, r.l_total);
        }
        s
    }

    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.epoch == e).map(|r| r.l_total).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }

    /// Mean total loss over the first and last `k` steps.
    pub fn first_last(&self, k: usize) -> (f64, f64) {
        let n = self.rows.len();
        let k = k.clamp(1, n.max(1));
        let mean = |r: &[CurveRow]| r.iter().map(|x| x.l_total).sum::<f64>() / r.len().max(1) as f64;
        (mean(&self.rows[..k.min(n)]), mean(&self.rows[n.saturating_sub(k)..]))
    }
}

/// A slice of a corpus sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub tokens: Vec<u32>,
    /// Offset of the first token in the source sequence.
    pub offset: usize,
}

/// Splits `seq` into windows of at most `max_len` tokens, consecutive
/// windows sharing [`SPLIT_OVERLAP`] tokens.
pub fn split_windows(seq: &[u32], max_len: usize) -> Vec<Window> {
    assert!(max_len > SPLIT_OVERLAP, "window must exceed the overlap");
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_len).min(seq.len());
        out.push(Window { tokens: seq[start..end].to_vec(), offset: start });
        if end == seq.len() {
            return out;
        }
        start = end - SPLIT_OVERLAP;
    }
}

/// Window-relative index of the first target not already used by the
/// previous window, when a window of length `len` supervises indices
/// `1..len - tail`.
fn first_fresh(prev: Option<&Window>, cur: &Window, tail: usize) -> usize {
    match prev {
        None => 1,
        Some(p) => (p.offset + p.tokens.len() - tail).saturating_sub(cur.offset).max(1),
    }
}

fn windows_of(corpus: &Corpus, max_len: usize, tail: usize) -> Vec<(Window, usize)> {
    let mut out = Vec::new();
    for seq in &corpus.sequences {
        let ws = split_windows(seq, max_len);
        for (i, w) in ws.iter().enumerate() {
            let fresh = first_fresh(i.checked_sub(1).map(|j| &ws[j]), w, tail);
            out.push((w.clone(), fresh));
        }
    }
    out
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss became {loss} at step {step}")));
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    order
}

/// Trains a fresh target of shape `model` with next-token cross-entropy.
pub fn train_target_toy(corpus: &Corpus, model: &ModelConfig, cfg: &TrainConfig) -> Result<(TransformerWeights, TrainCurve)> {
    cfg.validate()?;
    let mut w = init_target(model)?;
    if model.identity_layers > 0 {
        return Err(usage_err!("train the base model, then add identity layers"));
    }
    let max_len = cfg.seq_len.min(model.max_positions);
    let windows: Vec<(Window, usize)> = windows_of(corpus, max_len, 0).into_iter().filter(|(w, _)| w.tokens.len() >= 2).collect();
    if windows.is_empty() {
        return Err(usage_err!("corpus has no sequence of two or more tokens"));
    }
    if let Some(&t) = corpus.sequences.iter().flatten().find(|&&t| t as usize >= model.vocab_size) {
        return Err(validation_err!("token {t} outside vocabulary of {}", model.vocab_size));
    }
    let opt = cfg.adamw();
    let mut state = OptimizerState::new();
    let mut curve = TrainCurve::default();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for batch in shuffled(windows.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut tokens = Vec::new();
            let mut labels = Vec::new();
            let mut segments = Vec::new();
            for &b in batch {
                let (win, fresh) = &windows[b];
                let t = &win.tokens;
                segments.push((tokens.len(), t.len()));
                tokens.extend_from_slice(t);
                for j in 0..t.len() {
                    labels.push((j + 1 < t.len() && j + 1 >= *fresh).then(|| t[j + 1]));
                }
            }
            let mut tape = Tape::<f32>::new();
            let vars = w.bind(&mut tape, true);
            let (_, logits) = w.forward_tape(&mut tape, &vars, &tokens, &segments)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let l = f64::from(tape.scalar(loss));
            check_finite(l, step)?;
            tape.backward(loss)?;
            let mut grads: Vec<Tensor> = vars.all().into_iter().map(|v| tape.grad_tensor(v)).collect();
            drop(tape);
            clip_grad_norm(&mut grads, cfg.grad_clip)?;
            adamw_step(&mut w.tensors_mut(), &grads, &mut state, &opt)?;
            curve.rows.push(CurveRow { epoch, step, l_reg: 0.0, l_cls: l, l_total: l });
            step += 1;
        }
    }
    Ok((w, curve))
}

/// Mean next-token cross-entropy (nats) of `target` over `corpus`.
pub fn evaluate_target(target: &TransformerWeights, corpus: &Corpus) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (win, fresh) in windows_of(corpus, target.config.max_positions, 0) {
        let out = target.forward_causal(&win.tokens, &mut target.new_cache())?;
        let v = target.config.vocab_size;
        let mut logp = vec![0.0f32; v];
        for j in fresh.saturating_sub(1)..win.tokens.len() - 1 {
            kernels::log_softmax(out.logits.row(j), &mut logp);
            total -= f64::from(logp[win.tokens[j + 1] as usize]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(usage_err!("evaluation corpus has no predictable tokens"));
    }
    Ok(total / count as f64)
}

/// Mean entropy (nats) of the target's next-token distributions over
/// `corpus`.
pub fn mean_entropy(target: &TransformerWeights, corpus: &Corpus) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (win, _) in windows_of(corpus, target.config.max_positions, 0) {
        let out = target.forward_causal(&win.tokens, &mut target.new_cache())?;
        for j in 0..win.tokens.len() {
            let p = logits_to_dist(out.logits.row(j), 1.0);
            total -= p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Teacher-forced target features for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub tokens: Vec<u32>,
    /// `[n, hidden]`: row `i` is the feature computed at token `i`.
    pub features: Tensor,
    /// First supervised index not covered by the previous window.
    pub fresh: usize,
}

/// One supervised example: `(F_{1:i}, T_{2:i+1})` in, `f_{i+1}` and
/// `p_{i+2}` out (1-based indices).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub features: Tensor,
    pub shifted_tokens: Vec<u32>,
    pub target_feature: Vec<f32>,
    pub target_dist: Vec<f32>,
}

impl FeatureSequence {
    /// Training positions: `n - 2` for a length-`n` window.
    pub fn num_positions(&self) -> usize {
        self.tokens.len().saturating_sub(2)
    }

    /// Every supervised example, materialized (for inspection and tests).
    pub fn pairs(&self, target: &TransformerWeights) -> Result<Vec<TrainingPair>> {
        let h = self.features.cols();
        (1..=self.num_positions())
            .map(|i| {
                let f_next = self.features.row(i).to_vec();
                let logits = target.lm_head_row(&f_next);
                let mut p = logits.clone();
                kernels::softmax_in_place(&mut p, 1.0);
                Ok(TrainingPair {
                    features: Tensor::new(vec![i, h], self.features.data()[..i * h].to_vec())?,
                    shifted_tokens: self.tokens[1..=i].to_vec(),
                    target_feature: f_next,
                    target_dist: p,
                })
            })
            .collect()
    }
}

fn greedy_continuation(target: &TransformerWeights, prompt: &[u32], total: usize) -> Result<Vec<u32>> {
    let mut cache = target.new_cache();
    let mut out = prompt.to_vec();
    let mut logits = target.forward_causal(prompt, &mut cache)?.logits;
    while out.len() < total {
        let next = kernels::argmax(logits.row(logits.rows() - 1)) as u32;
        out.push(next);
        if out.len() < total {
            logits = target.forward_causal(&[next], &mut cache)?.logits;
        }
    }
    Ok(out)
}

/// Runs the target over every window of `corpus` and keeps its features.
pub fn collect_training_pairs(
    target: &TransformerWeights,
    corpus: &Corpus,
    mode: DataMode,
    seq_len: usize,
) -> Result<Vec<FeatureSequence>> {
    let max_len = seq_len.min(target.config.max_positions);
    if max_len <= SPLIT_OVERLAP + 1 {
        return Err(usage_err!("seq_len {seq_len} leaves no room beyond the split overlap"));
    }
    let mut out = Vec::new();
    for (win, fresh) in windows_of(corpus, max_len, 1) {
        if win.tokens.len() < 3 {
            continue;
        }
        let tokens = match mode {
            DataMode::FixedDataset => win.tokens,
            DataMode::TargetGenerated => {
                let keep = GENERATED_PROMPT_LEN.min(win.tokens.len() - 1);
                greedy_continuation(target, &win.tokens[..keep], win.tokens.len())?
            }
        };
        let features = target.forward_causal(&tokens, &mut target.new_cache())?.features;
        out.push(FeatureSequence { tokens, features, fresh });
    }
    if out.is_empty() {
        return Err(usage_err!("corpus has no sequence of three or more tokens"));
    }
    Ok(out)
}

/// Adds i.i.d. `U(-magnitude, magnitude)` noise to every element.
pub fn augment_features(features: &Tensor, magnitude: f32, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if magnitude.is_nan() || magnitude < 0.0 {
        return Err(usage_err!("noise magnitude must be non-negative, got {magnitude}"));
    }
    if magnitude == 0.0 {
        return Ok(features.clone());
    }
    let u = Uniform::new_inclusive(-magnitude, magnitude).map_err(|e| usage_err!("{e}"))?;
    let data = features.data().iter().map(|&x| x + u.sample(rng)).collect();
    Tensor::new(features.shape().to_vec(), data)
}

/// `smooth_l1(pred, target) + w_cls * CE(p, pred x lm_head)`.
pub fn combined_loss(pred: &Tensor, target: &Tensor, p: &Tensor, lm_head: &Tensor, w_cls: f32) -> Result<f32> {
    let reg = tensor::smooth_l1(pred, target)?;
    let logits = tensor::matmul(pred, lm_head)?;
    let cls = tensor::soft_cross_entropy(p, &logits)?;
    Ok(reg + w_cls * cls)
}

/// Differentiable [`combined_loss`]; returns `(total, reg, cls)`.
pub fn combined_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    p: &Tensor,
    lm_head: Var,
    w_cls: f64,
) -> Result<(Var, Var, Var)> {
    let reg = tape.smooth_l1(pred, target)?;
    let logits = tape.matmul(pred, lm_head)?;
    let cls = tape.soft_cross_entropy(p, logits)?;
    let weighted = tape.scale(cls, w_cls);
    let total = tape.add(reg, weighted)?;
    Ok((total, reg, cls))
}

/// Head inputs and targets for a batch of windows.
struct HeadBatch {
    input: Tensor,
    positions: Vec<usize>,
    segments: Vec<(usize, usize)>,
    /// Rows that contribute to the loss.
    rows: Vec<usize>,
    target: Tensor,
    dist: Tensor,
}

fn head_batch(
    target: &TransformerWeights,
    seqs: &[&FeatureSequence],
    mode: DraftInputMode,
    noise: f32,
    rng: &mut ChaCha8Rng,
) -> Result<HeadBatch> {
    let h = target.config.hidden_dim;
    let (mut feats, mut toks, mut positions, mut segments, mut rows, mut tgt) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in seqs {
        let m = s.num_positions();
        let start = positions.len();
        segments.push((start, m));
        feats.extend_from_slice(&s.features.data()[..m * h]);
        match mode {
            DraftInputMode::FeatureShiftedToken => toks.extend_from_slice(&s.tokens[1..=m]),
            _ => toks.extend_from_slice(&s.tokens[..m]),
        }
        positions.extend(0..m);
        for i in 0..m {
            if i + 1 >= s.fresh {
                rows.push(start + i);
                tgt.extend_from_slice(s.features.row(i + 1));
            }
        }
    }
    let n = positions.len();
    let feats = augment_features(&Tensor::new(vec![n, h], feats)?, noise, rng)?;
    let input = ablation_input_builder(mode, &target.embedding, Some(&feats), Some(&toks))?;
    let target_t = Tensor::new(vec![rows.len(), h], tgt)?;
    let dist = tensor::softmax(&target.lm_head(&target_t)?, 1.0)?;
    Ok(HeadBatch { input, positions, segments, rows, target: target_t, dist })
}

/// Loss of `head` on a batch, built on `tape` with the head's parameters
/// bound to `vars`.
fn head_loss<T: Scalar>(
    tape: &mut Tape<T>,
    target: &TransformerWeights,
    head: &DraftHead,
    vars: &HeadVars,
    batch: &HeadBatch,
    w_cls: f64,
) -> Result<(Var, Var, Var)> {
    let input = tape.constant(&batch.input);
    let pred = head.forward_tape(tape, vars, input, &batch.positions, &batch.segments)?;
    let pred = tape.gather(pred, &batch.rows)?;
    let tgt = tape.constant(&batch.target);
    let lm = tape.constant(&target.lm_head);
    combined_loss_tape(tape, pred, tgt, &batch.dist, lm, w_cls)
}

/// Trains a head of `mode` on precomputed features.
pub fn train_draft_head_on(
    target: &TransformerWeights,
    data: &[FeatureSequence],
    mode: DraftInputMode,
    cfg: &TrainConfig,
) -> Result<(DraftHead, TrainCurve)> {
    cfg.validate()?;
    let usable: Vec<&FeatureSequence> = data.iter().filter(|s| s.num_positions() > 0).collect();
    if usable.is_empty() {
        return Err(usage_err!("no training positions"));
    }
    let mut head = DraftHead::init(target, mode, cfg.seed);
    let opt = cfg.adamw();
    let mut state = OptimizerState::new();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut curve = TrainCurve::default();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for idx in shuffled(usable.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let seqs: Vec<&FeatureSequence> = idx.iter().map(|&i| usable[i]).collect();
            let batch = head_batch(target, &seqs, mode, cfg.noise, &mut noise_rng)?;
            if batch.rows.is_empty() {
                continue;
            }
            let mut tape = Tape::<f32>::new();
            let vars = head.bind(&mut tape);
            let params = vars.all();
            let (total, reg, cls) = head_loss(&mut tape, target, &head, &vars, &batch, f64::from(cfg.w_cls))?;
            let row = CurveRow {
                epoch,
                step,
                l_reg: f64::from(tape.scalar(reg)),
                l_cls: f64::from(tape.scalar(cls)),
                l_total: f64::from(tape.scalar(total)),
            };
            check_finite(row.l_total, step)?;
            tape.backward(total)?;
            let mut grads: Vec<Tensor> = params.iter().map(|&v| tape.grad_tensor(v)).collect();
            drop(tape);
            clip_grad_norm(&mut grads, cfg.grad_clip)?;
            adamw_step(&mut head.tensors_mut(), &grads, &mut state, &opt)?;
            curve.rows.push(row);
            step += 1;
        }
    }
    Ok((head, curve))
}

/// Collects features from `corpus` and trains a head of `mode`.
pub fn train_draft_head(
    target: &TransformerWeights,
    corpus: &Corpus,
    mode: DraftInputMode,
    cfg: &TrainConfig,
) -> Result<(DraftHead, TrainCurve)> {
    cfg.validate()?;
    let data = collect_training_pairs(target, corpus, cfg.data_mode, cfg.seq_len)?;
    train_draft_head_on(target, &data, mode, cfg)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the combined loss with respect to every head parameter, on
/// the first `max_positions` positions of `seq` (no noise).
pub fn check_combined_loss_gradients(
    target: &TransformerWeights,
    head: &DraftHead,
    seq: &FeatureSequence,
    max_positions: usize,
    w_cls: f32,
    coords_per_param: usize,
) -> Result<f64> {
    let n = (max_positions + 2).min(seq.tokens.len());
    let h = seq.features.cols();
    let short = FeatureSequence {
        tokens: seq.tokens[..n].to_vec(),
        features: Tensor::new(vec![n, h], seq.features.data()[..n * h].to_vec())?,
        fresh: 1,
    };
    let batch = head_batch(target, &[&short], head.mode(), 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params: Vec<Tensor> = head.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    gradient_check(
        |tape, vars| {
            let (fc, layer) = if head.mode().fused() { (Some((vars[0], vars[1])), &vars[2..]) } else { (None, vars) };
            let vars = HeadVars { fc, layer: BlockVars::from_vars(layer) };
            Ok(head_loss(tape, target, head, &vars, &batch, f64::from(w_cls))?.0)
        },
        &params,
        1e-5,
        coords_per_param,
    )
}

/// Draft-head loss on `data` without noise, averaged over windows.
pub fn evaluate_head(target: &TransformerWeights, head: &DraftHead, data: &[FeatureSequence], w_cls: f32) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in data.iter().filter(|s| s.num_positions() > 0) {
        let m = s.num_positions();
        let positions: Vec<usize> = (0..m).collect();
        let batch = head_batch(target, &[s], head.mode(), 0.0, &mut rng)?;
        let elements: Vec<DraftElement> = (0..m)
            .map(|i| DraftElement {
                feature: s.features.row(i).to_vec(),
                token: s.tokens[i],
                next_token: s.tokens[i + 1],
            })
            .collect();
        let refs: Vec<&DraftElement> = elements.iter().collect();
        let pred = head.forward_elements(target, &refs, &positions, &AttentionMask::causal(0, m), &mut head.new_cache(target))?;
        let h = pred.cols();
        let sel: Vec<f32> = batch.rows.iter().flat_map(|&r| pred.row(r).to_vec()).collect();
        let pred = Tensor::new(vec![batch.rows.len(), h], sel)?;
        total += f64::from(combined_loss(&pred, &batch.target, &batch.dist, &target.lm_head, w_cls)?);
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests;
