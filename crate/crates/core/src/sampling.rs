//! Randomness contract shared by drafting, verification and decoding.
//!
//! Every random decision goes through a [`Sampler`], and each call consumes
//! exactly one uniform variate. Production code uses [`RngSampler`]; tests can
//! substitute a sampler that enumerates every branch with its probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{validation_err, Result};

/// Tolerance on `|sum - 1|` for a row to count as a distribution.
pub const DIST_TOLERANCE: f64 = 1e-4;

pub trait Sampler {
    /// Returns `true` with probability `prob` (clamped to `[0, 1]`).
    fn accept(&mut self, prob: f64) -> bool;

    /// Draws an index from `dist`, which must be non-negative and sum to 1.
    fn categorical(&mut self, dist: &[f64]) -> usize;
}

/// Seeded sampler backed by ChaCha8.
#[derive(Clone, Debug)]
pub struct RngSampler {
    rng: ChaCha8Rng,
}

impl RngSampler {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// One uniform variate in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl Sampler for RngSampler {
    fn accept(&mut self, prob: f64) -> bool {
        self.uniform() < prob
    }

    fn categorical(&mut self, dist: &[f64]) -> usize {
        let u = self.uniform();
        inverse_cdf(dist, u)
    }
}

/// Smallest index whose cumulative mass exceeds `u`.
///
/// Bins are half-open, `[F(i-1), F(i))`. If rounding leaves `u` beyond the
/// final cumulative sum, the last index with positive mass is returned.
pub fn inverse_cdf(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Rejects negative or non-finite entries and sums off by more than
/// [`DIST_TOLERANCE`].
pub fn check_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(validation_err!("empty distribution"));
    }
    if let Some(bad) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(validation_err!("distribution has entry {bad}"));
    }
    let s: f64 = dist.iter().sum();
    if (s - 1.0).abs() > DIST_TOLERANCE {
        return Err(validation_err!("distribution sums to {s}"));
    }
    Ok(())
}

/// `f32` probabilities to `f64`, renormalized so the sum is 1 to within `f64`
/// rounding.
pub fn to_f64_dist(p: &[f32]) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|&x| f64::from(x)).collect();
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        for x in &mut out {
            *x /= s;
        }
    }
    out
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(p: &[f64]) -> usize {
    crate::tensor::kernels::argmax(p)
}
