//! Generation loop: vanilla decoding, chain speculation and tree speculation.
//!
//! Every mode starts with a prefill round that runs the prompt through the
//! target and samples one token. Speculative rounds then draft from the
//! current root token, verify the root plus all draft tokens in one target
//! forward, keep the target cache entries of the accepted path, and hand the
//! accepted tokens' true features to the draft model as pending elements.

use std::cell::Cell;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::draft_head::{logits_to_dist, DraftElement};
use crate::drafting::{build_chain_draft, build_tree_draft, DraftModel, DraftState, DraftTree, TreeTopology};
use crate::error::{usage_err, validation_err, Result};
use crate::model::{AttentionMask, ForwardOutput, KVCache, TransformerWeights};
use crate::sampling::{argmax, RngSampler, Sampler};
use crate::verification::{AcceptanceOutcome, AcceptanceRule, Verifier};

/// Decoding strategy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Vanilla,
    Chain { gamma: usize },
    Tree(TreeTopology),
}

impl DecodeMode {
    /// Target slots one round may add beyond the root.
    fn lookahead(&self) -> usize {
        match self {
            DecodeMode::Vanilla => 0,
            DecodeMode::Chain { gamma } => *gamma,
            DecodeMode::Tree(t) => t.budget,
        }
    }

    /// Draft forwards one speculative round must take.
    pub fn draft_forwards_per_round(&self) -> usize {
        match self {
            DecodeMode::Vanilla => 0,
            DecodeMode::Chain { gamma } => *gamma,
            DecodeMode::Tree(t) => t.depth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DecodeMode::Vanilla => Ok(()),
            DecodeMode::Chain { gamma } if *gamma == 0 => Err(validation_err!("gamma must be at least 1")),
            DecodeMode::Chain { .. } => Ok(()),
            DecodeMode::Tree(t) => t.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub mode: DecodeMode,
    /// 0 is greedy.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub rule: AcceptanceRule,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { mode: DecodeMode::Vanilla, temperature: 0.0, max_new_tokens: 64, seed: 0, rule: AcceptanceRule::Exact }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(usage_err!("temperature must be finite and non-negative, got {}", self.temperature));
        }
        if self.max_new_tokens == 0 {
            return Err(usage_err!("max_new_tokens must be at least 1"));
        }
        self.mode.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundKind {
    Prefill,
    Vanilla,
    Chain,
    Tree,
}

/// Bookkeeping for one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub kind: RoundKind,
    /// Draft tokens offered for verification.
    pub offered: usize,
    /// Draft tokens accepted; the round emits `accepted + 1` tokens.
    pub accepted: usize,
    pub target_forwards: usize,
    pub draft_forwards: usize,
    /// Accept/reject decision per examined candidate.
    pub trace: Vec<bool>,
}

impl RoundRecord {
    pub fn emitted(&self) -> usize {
        self.accepted + 1
    }

    pub fn is_verify(&self) -> bool {
        matches!(self.kind, RoundKind::Chain | RoundKind::Tree)
    }
}

/// Output of a generation call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// New tokens, at most `max_new_tokens`.
    pub tokens: Vec<u32>,
    pub rounds: Vec<RoundRecord>,
    /// Emitted tokens cut off by `max_new_tokens`.
    pub dropped: usize,
    /// Generation stopped early because another round would not fit in
    /// `max_positions`.
    pub capacity_exhausted: bool,
    pub elapsed_secs: f64,
}

/// Target and draft forwards summed over all rounds.
pub fn count_forwards(rounds: &[RoundRecord]) -> (usize, usize) {
    rounds.iter().fold((0, 0), |(t, d), r| (t + r.target_forwards, d + r.draft_forwards))
}

/// Draft model wrapper that counts forwards.
struct Counted<'a, D> {
    inner: &'a D,
    forwards: Cell<usize>,
}

impl<D: DraftModel> DraftModel for Counted<'_, D> {
    type Cache = D::Cache;

    fn new_cache(&self, target: &TransformerWeights) -> D::Cache {
        self.inner.new_cache(target)
    }

    fn cache_len(&self, cache: &D::Cache) -> usize {
        self.inner.cache_len(cache)
    }

    fn truncate(&self, cache: &mut D::Cache, len: usize) {
        self.inner.truncate(cache, len)
    }

    fn step(
        &self,
        target: &TransformerWeights,
        elements: &[&DraftElement],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut D::Cache,
    ) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        self.forwards.set(self.forwards.get() + 1);
        self.inner.step(target, elements, positions, mask, cache)
    }
}

/// Resumable decoding state. Cloning forks the stream, e.g. to rerun the
/// same prefix under different seeds.
#[derive(Clone, Debug)]
pub struct Session<C> {
    pub target_cache: KVCache,
    pub draft: DraftState<C>,
    /// Prompt followed by every emitted token.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub rounds: Vec<RoundRecord>,
    pub sampler: RngSampler,
}

impl<C> Session<C> {
    /// Tokens emitted after the prompt.
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn reseed(&mut self, seed: u64) {
        self.sampler = RngSampler::seed_from_u64(seed);
    }
}

/// Target model, draft model and decoding parameters.
pub struct Engine<'a, D> {
    pub target: &'a TransformerWeights,
    pub drafter: &'a D,
    pub params: GenerationParams,
}

impl<'a, D: DraftModel> Engine<'a, D> {
    pub fn new(target: &'a TransformerWeights, drafter: &'a D, params: GenerationParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { target, drafter, params })
    }

    fn dist(&self, logits: &[f32]) -> Vec<f64> {
        logits_to_dist(logits, self.params.temperature)
    }

    fn pick(&self, logits: &[f32], sampler: &mut impl Sampler) -> u32 {
        if self.params.temperature == 0.0 {
            argmax(&self.dist(logits)) as u32
        } else {
            sampler.categorical(&self.dist(logits)) as u32
        }
    }

    /// Runs the prompt through the target and samples the first new token.
    pub fn prefill(&self, prompt: &[u32]) -> Result<Session<D::Cache>> {
        if prompt.is_empty() {
            return Err(usage_err!("prompt must hold at least one token"));
        }
        let mut sampler = RngSampler::seed_from_u64(self.params.seed);
        let mut cache = self.target.new_cache();
        let out = self.target.forward_causal(prompt, &mut cache)?;
        let n = prompt.len();
        let first = self.pick(out.logits.row(n - 1), &mut sampler);
        let pending = (0..n)
            .map(|i| DraftElement {
                feature: out.features.row(i).to_vec(),
                token: prompt[i],
                next_token: if i + 1 < n { prompt[i + 1] } else { first },
            })
            .collect();
        let mut tokens = prompt.to_vec();
        tokens.push(first);
        let draft = DraftState { committed: 0, pending, root: first, cache: self.drafter.new_cache(self.target) };
        let record = RoundRecord {
            kind: RoundKind::Prefill,
            offered: 0,
            accepted: 0,
            target_forwards: 1,
            draft_forwards: 0,
            trace: vec![],
        };
        Ok(Session { target_cache: cache, draft, tokens, prompt_len: n, rounds: vec![record], sampler })
    }

    /// Whether another round fits in the position and cache budget.
    pub fn can_step(&self, s: &Session<D::Cache>) -> bool {
        let need = s.draft.root_position() + 1 + self.params.mode.lookahead();
        need <= self.target.config.max_positions && need <= s.target_cache.capacity()
    }

    /// One round in the configured mode. Returns the emitted tokens.
    pub fn step(&self, s: &mut Session<D::Cache>) -> Result<Vec<u32>> {
        if !self.can_step(s) {
            return Err(crate::Error::Capacity(format!(
                "round at position {} would exceed max_positions {}",
                s.draft.root_position(),
                self.target.config.max_positions
            )));
        }
        let (emitted, record) = match &self.params.mode {
            DecodeMode::Vanilla => self.vanilla_round(s)?,
            DecodeMode::Chain { gamma } => self.chain_round(s, *gamma)?,
            DecodeMode::Tree(t) => self.tree_round(s, t)?,
        };
        let want = self.params.mode.draft_forwards_per_round();
        if record.target_forwards != 1 || record.draft_forwards != want {
            return Err(validation_err!(
                "round used {} target and {} draft forwards, expected 1 and {want}",
                record.target_forwards,
                record.draft_forwards
            ));
        }
        s.tokens.extend(&emitted);
        s.rounds.push(record);
        Ok(emitted)
    }

    fn vanilla_round(&self, s: &mut Session<D::Cache>) -> Result<(Vec<u32>, RoundRecord)> {
        let root = s.draft.root;
        let out = self.target.forward_causal(&[root], &mut s.target_cache)?;
        let next = self.pick(out.logits.row(0), &mut s.sampler);
        s.draft.pending.push(DraftElement { feature: out.features.row(0).to_vec(), token: root, next_token: next });
        s.draft.root = next;
        let record = RoundRecord {
            kind: RoundKind::Vanilla,
            offered: 0,
            accepted: 0,
            target_forwards: 1,
            draft_forwards: 0,
            trace: vec![],
        };
        Ok((vec![next], record))
    }

    /// Runs `[root] + tokens` through the target. `parents[i]` is the draft
    /// index of token `i`'s parent (`None` for the root).
    fn verify_forward(
        &self,
        s: &mut Session<D::Cache>,
        tokens: &[u32],
        parents: &[Option<usize>],
        depths: &[usize],
    ) -> Result<ForwardOutput> {
        let p = s.draft.root_position();
        if s.target_cache.len() != p {
            return Err(validation_err!("target cache holds {} slots, root sits at {p}", s.target_cache.len()));
        }
        let n = tokens.len();
        let mut all = Vec::with_capacity(n + 1);
        all.push(s.draft.root);
        all.extend_from_slice(tokens);
        let mut positions = vec![p];
        positions.extend(depths.iter().map(|d| p + d));
        let mut mask = AttentionMask::empty(n + 1, p + n + 1);
        for j in 0..=p {
            mask.set(0, j, true);
        }
        for i in 0..n {
            for j in 0..=p {
                mask.set(i + 1, j, true);
            }
            let mut cur = Some(i);
            let mut hops = 0;
            while let Some(c) = cur {
                if hops > n {
                    return Err(validation_err!("draft parents form a cycle"));
                }
                mask.set(i + 1, p + 1 + c, true);
                cur = parents[c];
                hops += 1;
            }
        }
        self.target.forward(&all, &positions, &mask, &mut s.target_cache)
    }

    /// Keeps the accepted path in the target cache and queues its true
    /// features for the draft model.
    fn commit(&self, s: &mut Session<D::Cache>, out: &ForwardOutput, draft_tokens: &[u32], outcome: &AcceptanceOutcome) -> Result<()> {
        let p = s.draft.root_position();
        let mut keep: Vec<usize> = (0..=p).collect();
        keep.extend(outcome.path.iter().map(|&i| p + 1 + i));
        s.target_cache.prune(&keep)?;
        let mut rows = vec![0];
        rows.extend(outcome.path.iter().map(|&i| i + 1));
        let mut toks = vec![s.draft.root];
        toks.extend(outcome.path.iter().map(|&i| draft_tokens[i]));
        toks.push(outcome.bonus);
        for (k, &r) in rows.iter().enumerate() {
            s.draft.pending.push(DraftElement {
                feature: out.features.row(r).to_vec(),
                token: toks[k],
                next_token: toks[k + 1],
            });
        }
        s.draft.root = outcome.bonus;
        Ok(())
    }

    fn verifier(&self) -> Verifier {
        Verifier::for_temperature(self.params.temperature).with_rule(self.params.rule)
    }

    fn chain_round(&self, s: &mut Session<D::Cache>, gamma: usize) -> Result<(Vec<u32>, RoundRecord)> {
        let counted = Counted { inner: self.drafter, forwards: Cell::new(0) };
        let t = self.params.temperature;
        let draft = build_chain_draft(self.target, &counted, &mut s.draft, gamma, t, &mut s.sampler)?;
        let parents: Vec<Option<usize>> = (0..gamma).map(|i| i.checked_sub(1)).collect();
        let depths: Vec<usize> = (1..=gamma).collect();
        let out = self.verify_forward(s, &draft.tokens, &parents, &depths)?;
        let p: Vec<Vec<f64>> = (0..=gamma).map(|i| self.dist(out.logits.row(i))).collect();
        let outcome = self.verifier().verify_chain(&p, &draft.dists, &draft.tokens, &mut s.sampler)?;
        self.commit(s, &out, &draft.tokens, &outcome)?;
        let record = RoundRecord {
            kind: RoundKind::Chain,
            offered: gamma,
            accepted: outcome.accepted.len(),
            target_forwards: 1,
            draft_forwards: counted.forwards.get(),
            trace: outcome.trace.clone(),
        };
        Ok((outcome.emitted(), record))
    }

    fn tree_round(&self, s: &mut Session<D::Cache>, topology: &TreeTopology) -> Result<(Vec<u32>, RoundRecord)> {
        let counted = Counted { inner: self.drafter, forwards: Cell::new(0) };
        let t = self.params.temperature;
        let (tree, _) = build_tree_draft(self.target, &counted, &mut s.draft, topology, t, &mut s.sampler)?;
        let outcome = self.verify_drafted_tree(s, &tree)?;
        let record = RoundRecord {
            kind: RoundKind::Tree,
            offered: tree.len(),
            accepted: outcome.accepted.len(),
            target_forwards: 1,
            draft_forwards: counted.forwards.get(),
            trace: outcome.trace.clone(),
        };
        Ok((outcome.emitted(), record))
    }

    fn verify_drafted_tree(&self, s: &mut Session<D::Cache>, tree: &DraftTree) -> Result<AcceptanceOutcome> {
        let tokens: Vec<u32> = tree.nodes.iter().map(|n| n.token).collect();
        let parents: Vec<Option<usize>> = tree.nodes.iter().map(|n| n.parent).collect();
        let depths: Vec<usize> = tree.nodes.iter().map(|n| n.depth).collect();
        let out = self.verify_forward(s, &tokens, &parents, &depths)?;
        let dists: Vec<Vec<f64>> = (0..=tree.len()).map(|i| self.dist(out.logits.row(i))).collect();
        let outcome = self.verifier().verify_tree(tree, &dists, &mut s.sampler)?;
        self.commit(s, &out, &tokens, &outcome)?;
        Ok(outcome)
    }

    /// Steps until `max_new_tokens` are emitted or capacity runs out.
    pub fn run(&self, s: &mut Session<D::Cache>) -> Result<()> {
        while s.generated().len() < self.params.max_new_tokens {
            if !self.can_step(s) {
                break;
            }
            self.step(s)?;
        }
        Ok(())
    }

    /// Prefill plus decoding rounds.
    pub fn generate(&self, prompt: &[u32]) -> Result<Generation> {
        let start = Instant::now();
        let mut s = self.prefill(prompt)?;
        self.run(&mut s)?;
        let mut g = self.finish(&s);
        g.elapsed_secs = start.elapsed().as_secs_f64();
        Ok(g)
    }

    /// Summarizes a session, truncating to `max_new_tokens`.
    pub fn finish(&self, s: &Session<D::Cache>) -> Generation {
        let all = s.generated();
        let keep = all.len().min(self.params.max_new_tokens);
        Generation {
            tokens: all[..keep].to_vec(),
            rounds: s.rounds.clone(),
            dropped: all.len() - keep,
            capacity_exhausted: all.len() < self.params.max_new_tokens,
            elapsed_secs: 0.0,
        }
    }
}

/// Convenience wrapper around [`Engine::generate`].
pub fn generate<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    prompt: &[u32],
    params: &GenerationParams,
) -> Result<Generation> {
    Engine::new(target, drafter, params.clone())?.generate(prompt)
}
