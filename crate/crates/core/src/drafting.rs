//! Chain and tree drafting.
//!
//! A draft model proposes tokens ahead of the target. Each draft forward
//! takes [`DraftElement`]s and returns, per element, the predicted next
//! feature and its logits. Chain drafting runs one forward per token; tree
//! drafting runs one forward per depth, expanding every node of that depth
//! together under a tree attention mask.

use serde::{Deserialize, Serialize};

use crate::draft_head::{logits_to_dist, DraftElement, DraftHead};
use crate::error::{usage_err, validation_err, Result};
use crate::model::{AttentionMask, KVCache, TransformerWeights};
use crate::sampling::Sampler;
use crate::tensor::kernels;

/// Anything that can extend a draft: the trained head, or the target itself
/// as a perfect oracle.
pub trait DraftModel {
    type Cache: Clone;

    fn new_cache(&self, target: &TransformerWeights) -> Self::Cache;

    /// Number of elements held.
    fn cache_len(&self, cache: &Self::Cache) -> usize;

    fn truncate(&self, cache: &mut Self::Cache, len: usize);

    /// One draft forward. Element `k` sits at `positions[k]`; `mask` has
    /// `cache_len + elements.len()` columns. Returns per element the
    /// predicted feature and its logits.
    fn step(
        &self,
        target: &TransformerWeights,
        elements: &[&DraftElement],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut Self::Cache,
    ) -> Result<Vec<(Vec<f32>, Vec<f32>)>>;
}

impl DraftModel for DraftHead {
    type Cache = KVCache;

    fn new_cache(&self, target: &TransformerWeights) -> KVCache {
        DraftHead::new_cache(self, target)
    }

    fn cache_len(&self, cache: &KVCache) -> usize {
        cache.len()
    }

    fn truncate(&self, cache: &mut KVCache, len: usize) {
        cache.truncate(len);
    }

    fn step(
        &self,
        target: &TransformerWeights,
        elements: &[&DraftElement],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut KVCache,
    ) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        let feats = self.forward_elements(target, elements, positions, mask, cache)?;
        Ok((0..feats.rows())
            .map(|i| {
                let f = feats.row(i).to_vec();
                let l = target.lm_head_row(&f);
                (f, l)
            })
            .collect())
    }
}

/// Uses the target model as its own draft, so every draft distribution is
/// exactly the target's.
///
/// Element `(f_i, t_i, t_{i+1})` is served by running the target on
/// `t_{i+1}`, whose output is the true `f_{i+1}`. The cache therefore holds
/// one extra slot for the very first token, added on the first call.
#[derive(Clone, Copy, Debug, Default)]
pub struct TargetOracle;

impl DraftModel for TargetOracle {
    type Cache = KVCache;

    fn new_cache(&self, target: &TransformerWeights) -> KVCache {
        target.new_cache()
    }

    fn cache_len(&self, cache: &KVCache) -> usize {
        cache.len().saturating_sub(1)
    }

    fn truncate(&self, cache: &mut KVCache, len: usize) {
        cache.truncate(if len == 0 { 0 } else { len + 1 });
    }

    fn step(
        &self,
        target: &TransformerWeights,
        elements: &[&DraftElement],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut KVCache,
    ) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        oracle_step(target, elements, positions, mask, cache)
    }
}

/// [`TargetOracle`] served by a separate model. Exact when `model` computes
/// the target's outputs, e.g. [`TransformerWeights::without_identity_layers`]
/// of a target with identity blocks: a perfect draft at little cost.
#[derive(Clone, Debug)]
pub struct ModelOracle {
    pub model: TransformerWeights,
}

impl DraftModel for ModelOracle {
    type Cache = KVCache;

    fn new_cache(&self, _target: &TransformerWeights) -> KVCache {
        self.model.new_cache()
    }

    fn cache_len(&self, cache: &KVCache) -> usize {
        TargetOracle.cache_len(cache)
    }

    fn truncate(&self, cache: &mut KVCache, len: usize) {
        TargetOracle.truncate(cache, len);
    }

    fn step(
        &self,
        _target: &TransformerWeights,
        elements: &[&DraftElement],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut KVCache,
    ) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
        oracle_step(&self.model, elements, positions, mask, cache)
    }
}

fn oracle_step(
    model: &TransformerWeights,
    elements: &[&DraftElement],
    positions: &[usize],
    mask: &AttentionMask,
    cache: &mut KVCache,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let n = elements.len();
    let prime = cache.is_empty();
    let lead = usize::from(prime);
    let mut toks = Vec::with_capacity(n + 1);
    let mut pos = Vec::with_capacity(n + 1);
    if prime {
        if positions.first() != Some(&0) {
            return Err(usage_err!("oracle must start at position 0"));
        }
        toks.push(elements[0].token);
        pos.push(0);
    }
    toks.extend(elements.iter().map(|e| e.next_token));
    pos.extend(positions.iter().map(|p| p + 1));
    // Element column j maps to oracle slot j + 1; slot 0 is the first token
    // and always visible.
    let past = cache.len();
    let m = AttentionMask::from_fn(n + lead, past + n + lead, |i, j| {
        if j == 0 || (prime && i == 0) {
            return j == 0;
        }
        mask.get(i - lead, j - 1)
    });
    let out = model.forward(&toks, &pos, &m, cache)?;
    Ok((lead..n + lead).map(|i| (out.features.row(i).to_vec(), out.logits.row(i).to_vec())).collect())
}

/// Per-depth branching plus a total node budget.
///
/// Depth 1 gets `k_1` children of the root. At each deeper level the
/// highest-ranked node of the previous level gets `k_d` children and the
/// next-ranked nodes one child each, as far as the budget allows while
/// reserving one node for every remaining level. Nodes rank in verification
/// order: by their parent's rank, then by sibling index. The first node of
/// every level therefore extends the first node of the level above, so the
/// top path is exactly the chain draft of the same depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeTopology {
    pub branching: Vec<usize>,
    pub budget: usize,
}

impl Default for TreeTopology {
    fn default() -> Self {
        Self { branching: vec![4, 2, 1], budget: 10 }
    }
}

impl TreeTopology {
    pub fn new(branching: Vec<usize>, budget: usize) -> Result<Self> {
        let t = Self { branching, budget };
        t.validate()?;
        Ok(t)
    }

    /// Degenerate tree with one node per level.
    pub fn chain(gamma: usize) -> Self {
        Self { branching: vec![1; gamma], budget: gamma }
    }

    pub fn depth(&self) -> usize {
        self.branching.len()
    }

    /// Largest budget the branching can fill.
    pub fn max_budget(&self) -> usize {
        let mut prev = 0;
        let mut total = 0;
        for (d, &k) in self.branching.iter().enumerate() {
            let n = if d == 0 { k } else { k + prev - 1 };
            total += n;
            prev = n;
        }
        total
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching.is_empty() {
            return Err(validation_err!("tree branching must list at least one level"));
        }
        if self.branching.contains(&0) {
            return Err(validation_err!("every branching factor must be at least 1"));
        }
        let m = self.depth();
        if self.budget < m || self.budget > self.max_budget() {
            return Err(validation_err!(
                "budget {} outside [{m}, {}] for branching {:?}",
                self.budget,
                self.max_budget(),
                self.branching
            ));
        }
        Ok(())
    }

    /// Node count at each depth.
    pub fn level_sizes(&self) -> Vec<usize> {
        let m = self.depth();
        let mut used = 0;
        let mut prev = 0;
        let mut out = Vec::with_capacity(m);
        for (d, &k) in self.branching.iter().enumerate() {
            let want = if d == 0 { k } else { k + prev - 1 };
            let n = want.min(self.budget - used - (m - d - 1));
            out.push(n);
            used += n;
            prev = n;
        }
        out
    }

    /// Children per ranked parent when level `d` (0-based, `d >= 1`) holds
    /// `count` nodes.
    fn children_per_rank(&self, d: usize, count: usize) -> Vec<usize> {
        let k = self.branching[d];
        let mut out = vec![count.min(k)];
        out.extend(std::iter::repeat_n(1, count.saturating_sub(k)));
        out
    }
}

/// One proposed token.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftNode {
    pub parent: Option<usize>,
    pub token: u32,
    /// Probability of `token` under the parent's draft distribution.
    pub prob: f64,
    /// Draft output that produced the parent's distribution, i.e. the
    /// feature paired with this node's token when it is expanded.
    pub feature: Vec<f32>,
    pub depth: usize,
    /// Draft distribution the children were drawn from; set once expanded.
    pub child_dist: Option<Vec<f64>>,
}

/// Draft tree below a root token that has not yet been through the target.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftTree {
    /// Target slots before the root.
    pub prefix_len: usize,
    pub root_token: u32,
    /// Draft distribution for the root's children.
    pub root_dist: Vec<f64>,
    /// Nodes in creation order: parents before children, siblings in
    /// generation order.
    pub nodes: Vec<DraftNode>,
}

impl DraftTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Children of `parent` (`None` for the root) in generation order.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].parent == parent).collect()
    }

    /// Distribution the children of `parent` were drawn from.
    pub fn child_dist(&self, parent: Option<usize>) -> Option<&[f64]> {
        match parent {
            None => Some(&self.root_dist),
            Some(i) => self.nodes[i].child_dist.as_deref(),
        }
    }

    /// `i` followed by its ancestors up to depth 1. Fails on cycles or
    /// dangling parents.
    pub fn ancestors(&self, i: usize) -> Result<Vec<usize>> {
        let mut out = vec![i];
        let mut cur = self.nodes[i].parent;
        while let Some(p) = cur {
            if p >= self.nodes.len() || out.len() > self.nodes.len() {
                return Err(validation_err!("node {i} has a cyclic or dangling parent chain"));
            }
            out.push(p);
            cur = self.nodes[p].parent;
        }
        Ok(out)
    }
}

/// Mask over `prefix_len` visible slots followed by one slot per node: node
/// `i` sees every prefix slot and exactly its ancestors and itself.
pub fn tree_attention_mask(tree: &DraftTree, prefix_len: usize) -> Result<AttentionMask> {
    let n = tree.len();
    let mut m = AttentionMask::empty(n, prefix_len + n);
    for i in 0..n {
        for j in 0..prefix_len {
            m.set(i, j, true);
        }
        for a in tree.ancestors(i)? {
            m.set(i, prefix_len + a, true);
        }
    }
    Ok(m)
}

/// Flattened tree ready for one target forward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearTree {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    /// Node index of each entry.
    pub order: Vec<usize>,
    pub parents: Vec<Option<usize>>,
}

/// Parents-before-children order (creation order) with positions
/// `prefix_len + depth - 1`.
pub fn linearize_tree(tree: &DraftTree, prefix_len: usize) -> LinearTree {
    LinearTree {
        tokens: tree.nodes.iter().map(|n| n.token).collect(),
        positions: tree.nodes.iter().map(|n| prefix_len + n.depth - 1).collect(),
        order: (0..tree.len()).collect(),
        parents: tree.nodes.iter().map(|n| n.parent).collect(),
    }
}

/// Draft side of a generation stream.
#[derive(Clone, Debug)]
pub struct DraftState<C> {
    /// Elements in the draft cache that carry true target features.
    pub committed: usize,
    /// True-feature elements not yet fed to the draft model.
    pub pending: Vec<DraftElement>,
    /// Last emitted token; not yet processed by the target.
    pub root: u32,
    pub cache: C,
}

impl<C> DraftState<C> {
    /// Position of the root token (equals the target cache length).
    pub fn root_position(&self) -> usize {
        self.committed + self.pending.len()
    }
}

/// Chain draft: tokens, the full draft distribution each was drawn from, and
/// the predicted feature behind each distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainDraft {
    pub tokens: Vec<u32>,
    pub dists: Vec<Vec<f64>>,
    pub features: Vec<Vec<f32>>,
    pub forwards: usize,
}

/// Draft distribution at `temperature`. At zero temperature the unscaled
/// softmax is kept so ranking and stored probabilities stay informative.
fn draft_dist(logits: &[f32], temperature: f64) -> Vec<f64> {
    logits_to_dist(logits, if temperature == 0.0 { 1.0 } else { temperature })
}

fn pick_one(dist: &[f64], temperature: f64, sampler: &mut impl Sampler) -> u32 {
    if temperature == 0.0 {
        kernels::argmax(dist) as u32
    } else {
        sampler.categorical(dist) as u32
    }
}

/// `k` candidates from `dist`: i.i.d. draws when sampling, the top-`k`
/// distinct tokens (lowest index on ties) when greedy.
fn pick_many(dist: &[f64], k: usize, temperature: f64, sampler: &mut impl Sampler) -> Vec<u32> {
    if temperature == 0.0 {
        let mut idx: Vec<usize> = (0..dist.len()).collect();
        idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx.into_iter().map(|i| i as u32).collect()
    } else {
        (0..k).map(|_| sampler.categorical(dist) as u32).collect()
    }
}

/// Feeds the pending true-feature elements and returns the last output.
fn catch_up<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    state: &mut DraftState<D::Cache>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if state.pending.is_empty() {
        return Err(usage_err!("drafting needs at least one pending element; run prefill first"));
    }
    drafter.truncate(&mut state.cache, state.committed);
    let n = state.pending.len();
    let refs: Vec<&DraftElement> = state.pending.iter().collect();
    let positions: Vec<usize> = (state.committed..state.committed + n).collect();
    let mask = AttentionMask::causal(state.committed, n);
    let mut out = drafter.step(target, &refs, &positions, &mask, &mut state.cache)?;
    state.committed += n;
    state.pending.clear();
    Ok(out.pop().expect("non-empty step output"))
}

/// Drafts `gamma` tokens one forward at a time.
pub fn build_chain_draft<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    state: &mut DraftState<D::Cache>,
    gamma: usize,
    temperature: f64,
    sampler: &mut impl Sampler,
) -> Result<ChainDraft> {
    if gamma == 0 {
        return Err(usage_err!("gamma must be at least 1"));
    }
    let root_pos = state.root_position();
    let (mut feat, mut logits) = catch_up(target, drafter, state)?;
    let mut draft = ChainDraft { tokens: vec![], dists: vec![], features: vec![], forwards: 1 };
    let mut prev = state.root;
    for step in 0..gamma {
        let q = draft_dist(&logits, temperature);
        let tok = pick_one(&q, temperature, sampler);
        draft.tokens.push(tok);
        draft.dists.push(q);
        draft.features.push(feat.clone());
        if step + 1 == gamma {
            break;
        }
        let e = DraftElement { feature: feat, token: prev, next_token: tok };
        let past = drafter.cache_len(&state.cache);
        let mut out = drafter.step(target, &[&e], &[root_pos + step], &AttentionMask::causal(past, 1), &mut state.cache)?;
        draft.forwards += 1;
        (feat, logits) = out.pop().expect("one output");
        prev = tok;
    }
    Ok(draft)
}

/// Drafts a tree with one forward per level of `topology`.
pub fn build_tree_draft<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    state: &mut DraftState<D::Cache>,
    topology: &TreeTopology,
    temperature: f64,
    sampler: &mut impl Sampler,
) -> Result<(DraftTree, usize)> {
    topology.validate()?;
    let root_pos = state.root_position();
    let sizes = topology.level_sizes();
    let (feat, logits) = catch_up(target, drafter, state)?;
    let committed = state.committed;
    let q = draft_dist(&logits, temperature);
    let mut tree = DraftTree { prefix_len: root_pos, root_token: state.root, root_dist: q.clone(), nodes: vec![] };
    for tok in pick_many(&q, sizes[0], temperature, sampler) {
        tree.nodes.push(DraftNode {
            parent: None,
            token: tok,
            prob: q[tok as usize],
            feature: feat.clone(),
            depth: 1,
            child_dist: None,
        });
    }
    let mut forwards = 1;
    // Draft-cache slot of every expanded node.
    let mut slot: Vec<Option<usize>> = vec![None; topology.budget];
    // Each level is held in rank order, which is also creation order.
    let mut level: Vec<usize> = (0..tree.len()).collect();
    for (d, &count) in sizes.iter().enumerate().skip(1) {
        let per_rank = topology.children_per_rank(d, count);
        let parents: Vec<(usize, usize)> = level.iter().copied().zip(per_rank).collect();

        let past = drafter.cache_len(&state.cache);
        let rows = parents.len();
        let mut mask = AttentionMask::empty(rows, past + rows);
        let mut elements = Vec::with_capacity(rows);
        let mut positions = Vec::with_capacity(rows);
        for (r, &(node, _)) in parents.iter().enumerate() {
            for j in 0..committed {
                mask.set(r, j, true);
            }
            for a in tree.ancestors(node)?.into_iter().skip(1) {
                let s = slot[a].expect("ancestors are expanded");
                mask.set(r, s, true);
            }
            mask.set(r, past + r, true);
            slot[node] = Some(past + r);
            let n = &tree.nodes[node];
            let prev = n.parent.map_or(tree.root_token, |p| tree.nodes[p].token);
            elements.push(DraftElement { feature: n.feature.clone(), token: prev, next_token: n.token });
            positions.push(root_pos + n.depth - 1);
        }
        let refs: Vec<&DraftElement> = elements.iter().collect();
        let out = drafter.step(target, &refs, &positions, &mask, &mut state.cache)?;
        forwards += 1;

        let mut next_level = Vec::new();
        let mut children_of = vec![Vec::new(); rows];
        for (r, ((node, k), (f, l))) in parents.iter().zip(out).enumerate() {
            let q = draft_dist(&l, temperature);
            children_of[r] = pick_many(&q, *k, temperature, sampler).into_iter().map(|t| (t, q[t as usize])).collect();
            tree.nodes[*node].child_dist = Some(q);
            for &(t, p) in &children_of[r] {
                tree.nodes.push(DraftNode {
                    parent: Some(*node),
                    token: t,
                    prob: p,
                    feature: f.clone(),
                    depth: d + 1,
                    child_dist: None,
                });
                next_level.push(tree.len() - 1);
            }
        }
        level = next_level;
    }
    Ok((tree, forwards))
}
