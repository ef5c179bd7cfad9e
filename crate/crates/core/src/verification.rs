//! Lossless acceptance of draft tokens.
//!
//! Chain verification scans draft tokens in order, accepting each with
//! probability `min(1, p/q)` and resampling from the normalized residual
//! `max(0, p - q)` at the first rejection. Tree verification applies the same
//! rule recursively: siblings drawn i.i.d. from one draft distribution are
//! tried in order against a working target distribution that is replaced by
//! its residual after every rejection.
//!
//! At temperature 0 both reduce to greedy matching against the target argmax
//! and consume no randomness.

use serde::{Deserialize, Serialize};

use crate::drafting::DraftTree;
use crate::error::{usage_err, Result};
use crate::sampling::{argmax, Sampler};

/// Acceptance rule. [`AcceptanceRule::UnclampedRatio`] is a deliberately
/// broken variant kept as a negative control for the statistical audit: it
/// builds the residual as `max(0, p - q * (p/q))` without clamping the ratio
/// at 1, which leaves nothing, so rejected positions fall back to sampling
/// from `p` itself and the output law drifts toward the draft.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    #[default]
    Exact,
    UnclampedRatio,
}

/// How draft tokens are judged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verifier {
    /// Greedy matching against the target argmax (temperature 0).
    pub greedy: bool,
    pub rule: AcceptanceRule,
}

impl Verifier {
    pub fn greedy() -> Self {
        Self { greedy: true, rule: AcceptanceRule::Exact }
    }

    pub fn sampling() -> Self {
        Self { greedy: false, rule: AcceptanceRule::Exact }
    }

    pub fn for_temperature(temperature: f64) -> Self {
        if temperature == 0.0 {
            Self::greedy()
        } else {
            Self::sampling()
        }
    }

    pub fn with_rule(self, rule: AcceptanceRule) -> Self {
        Self { rule, ..self }
    }
}

/// Result of verifying one draft.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceOutcome {
    pub accepted: Vec<u32>,
    pub bonus: u32,
    /// Accepted node indices, root to leaf (tree drafts; draft indices for chains).
    pub path: Vec<usize>,
    /// Accept/reject decision for every candidate examined.
    pub trace: Vec<bool>,
    /// Draft tokens offered.
    pub offered: usize,
}

impl AcceptanceOutcome {
    /// Accepted tokens followed by the bonus token.
    pub fn emitted(&self) -> Vec<u32> {
        let mut v = self.accepted.clone();
        v.push(self.bonus);
        v
    }
}

/// `min(1, p(token) / q(token))`.
pub fn acceptance_probability(p: &[f64], q: &[f64], token: usize) -> Result<f64> {
    check_pair(p, q)?;
    if token >= q.len() {
        return Err(usage_err!("token {token} outside support of size {}", q.len()));
    }
    if q[token] <= 0.0 {
        return Err(usage_err!("draft proposed token {token} with zero draft probability"));
    }
    Ok((p[token] / q[token]).min(1.0))
}

/// Normalized `max(0, p - q)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Residual {
    Dist(Vec<f64>),
    /// Nothing is left (`p <= q` everywhere, i.e. `p == q`): acceptance was
    /// certain and no resampling is needed.
    AcceptCertain,
}

pub fn residual_distribution(p: &[f64], q: &[f64]) -> Residual {
    let mut r: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| (a - b).max(0.0)).collect();
    let s: f64 = r.iter().sum();
    if s <= 0.0 {
        return Residual::AcceptCertain;
    }
    for x in &mut r {
        *x /= s;
    }
    Residual::Dist(r)
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(usage_err!("target support {} != draft support {}", p.len(), q.len()));
    }
    Ok(())
}

impl Verifier {
    /// One accept/reject decision. Returns the replacement distribution on
    /// rejection.
    fn judge(&self, p: &[f64], q: &[f64], token: usize, sampler: &mut impl Sampler) -> Result<Option<Vec<f64>>> {
        if p == q {
            return Ok(None);
        }
        let ratio = match self.rule {
            AcceptanceRule::Exact => acceptance_probability(p, q, token)?,
            AcceptanceRule::UnclampedRatio => {
                check_pair(p, q)?;
                if q[token] <= 0.0 {
                    return Err(usage_err!("draft proposed token {token} with zero draft probability"));
                }
                p[token] / q[token]
            }
        };
        if sampler.accept(ratio) {
            return Ok(None);
        }
        let next = match self.rule {
            AcceptanceRule::Exact => match residual_distribution(p, q) {
                Residual::Dist(r) => r,
                // Only reachable through rounding; p is then the residual.
                Residual::AcceptCertain => p.to_vec(),
            },
            AcceptanceRule::UnclampedRatio => {
                let leftover: Vec<f64> = p
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| if b > 0.0 { (a - b * (a / b)).max(0.0) } else { a })
                    .collect();
                match residual_distribution(&leftover, &vec![0.0; p.len()]) {
                    Residual::Dist(r) => r,
                    Residual::AcceptCertain => p.to_vec(),
                }
            }
        };
        Ok(Some(next))
    }

    fn draw(&self, dist: &[f64], sampler: &mut impl Sampler) -> u32 {
        if self.greedy {
            argmax(dist) as u32
        } else {
            sampler.categorical(dist) as u32
        }
    }

    /// Verifies a chain draft. `p` holds `gamma + 1` target distributions
    /// (the last is for the bonus position); `q` and `tokens` hold `gamma`.
    pub fn verify_chain(
        &self,
        p: &[Vec<f64>],
        q: &[Vec<f64>],
        tokens: &[u32],
        sampler: &mut impl Sampler,
    ) -> Result<AcceptanceOutcome> {
        let gamma = tokens.len();
        if q.len() != gamma || p.len() != gamma + 1 {
            return Err(usage_err!(
                "chain verification needs gamma+1 target and gamma draft rows; got {}, {}, {gamma}",
                p.len(),
                q.len()
            ));
        }
        let mut out = AcceptanceOutcome { offered: gamma, ..Default::default() };
        for i in 0..gamma {
            let t = tokens[i];
            if self.greedy {
                let best = argmax(&p[i]) as u32;
                let ok = best == t;
                out.trace.push(ok);
                if !ok {
                    out.bonus = best;
                    return Ok(out);
                }
            } else {
                match self.judge(&p[i], &q[i], t as usize, sampler)? {
                    None => out.trace.push(true),
                    Some(r) => {
                        out.trace.push(false);
                        out.bonus = sampler.categorical(&r) as u32;
                        return Ok(out);
                    }
                }
            }
            out.accepted.push(t);
            out.path.push(i);
        }
        out.bonus = self.draw(&p[gamma], sampler);
        Ok(out)
    }

    /// Verifies a tree draft. `target_dists[0]` is the target distribution
    /// after the root token and `target_dists[i + 1]` after node `i`.
    pub fn verify_tree(
        &self,
        tree: &DraftTree,
        target_dists: &[Vec<f64>],
        sampler: &mut impl Sampler,
    ) -> Result<AcceptanceOutcome> {
        if target_dists.len() != tree.len() + 1 {
            return Err(usage_err!(
                "tree of {} nodes needs {} target distributions, got {}",
                tree.len(),
                tree.len() + 1,
                target_dists.len()
            ));
        }
        let mut out = AcceptanceOutcome { offered: tree.len(), ..Default::default() };
        let mut parent: Option<usize> = None;
        let mut p = target_dists[0].clone();
        'descend: loop {
            let children = tree.children(parent);
            if children.is_empty() {
                break;
            }
            if self.greedy {
                let best = argmax(&p) as u32;
                for &c in &children {
                    let ok = tree.nodes[c].token == best;
                    out.trace.push(ok);
                    if ok {
                        out.accepted.push(best);
                        out.path.push(c);
                        parent = Some(c);
                        p = target_dists[c + 1].clone();
                        continue 'descend;
                    }
                }
                break;
            }
            let q = tree
                .child_dist(parent)
                .ok_or_else(|| usage_err!("expanded node {parent:?} has no draft distribution"))?
                .to_vec();
            for &c in &children {
                let t = tree.nodes[c].token;
                match self.judge(&p, &q, t as usize, sampler)? {
                    None => {
                        out.trace.push(true);
                        out.accepted.push(t);
                        out.path.push(c);
                        parent = Some(c);
                        p = target_dists[c + 1].clone();
                        continue 'descend;
                    }
                    Some(r) => {
                        out.trace.push(false);
                        p = r;
                    }
                }
            }
            break;
        }
        out.bonus = self.draw(&p, sampler);
        Ok(out)
    }
}

/// Chain verification with the exact sampling rule.
pub fn verify_chain(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    tokens: &[u32],
    sampler: &mut impl Sampler,
) -> Result<AcceptanceOutcome> {
    Verifier::sampling().verify_chain(p, q, tokens, sampler)
}

/// Tree verification with the exact sampling rule.
pub fn verify_tree(tree: &DraftTree, target_dists: &[Vec<f64>], sampler: &mut impl Sampler) -> Result<AcceptanceOutcome> {
    Verifier::sampling().verify_tree(tree, target_dists, sampler)
}
