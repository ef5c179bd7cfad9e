//! Evaluation metrics: acceptance length, n-alpha acceptance rates, total
//! variation, the statistical losslessness audit, and walltime speedup.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::draft_head::{logits_to_dist, DraftElement};
use crate::drafting::DraftModel;
use crate::engine::{count_forwards, DecodeMode, Engine, Generation, GenerationParams, RoundKind};
use crate::error::{usage_err, validation_err, Result};
use crate::model::{AttentionMask, TransformerWeights};
use crate::sampling::{argmax, check_distribution, RngSampler, Sampler};
use crate::training::{split_windows, Corpus};
use crate::verification::{acceptance_probability, AcceptanceRule};

/// Largest `n` reported in alpha tables.
pub const MAX_ALPHA_N: usize = 4;

/// Average acceptance length over the verification rounds of some runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tau {
    /// Mean of `accepted + 1` (bonus token included).
    pub with_bonus: f64,
    /// Mean of `accepted`.
    pub accepted_only: f64,
    pub rounds: usize,
}

/// Acceptance length over every chain or tree round in `runs`.
pub fn compute_tau(runs: &[Generation]) -> Result<Tau> {
    let (mut sum, mut rounds) = (0usize, 0usize);
    for r in runs.iter().flat_map(|g| &g.rounds).filter(|r| r.is_verify()) {
        sum += r.accepted;
        rounds += 1;
    }
    if rounds == 0 {
        return Err(usage_err!("no verification rounds to average"));
    }
    let b = sum as f64 / rounds as f64;
    Ok(Tau { with_bonus: b + 1.0, accepted_only: b, rounds })
}

/// Checks the forward counters of one run against its mode: one target
/// forward per round and the mode's draft forwards per speculative round.
pub fn check_counters(run: &Generation, mode: &DecodeMode) -> Result<()> {
    let (target, draft) = count_forwards(&run.rounds);
    let verify = run.rounds.iter().filter(|r| r.is_verify()).count();
    let prefill = run.rounds.iter().filter(|r| r.kind == RoundKind::Prefill).count();
    if prefill != 1 || target != run.rounds.len() {
        return Err(validation_err!("{target} target forwards over {} rounds ({prefill} prefill)", run.rounds.len()));
    }
    let want = mode.draft_forwards_per_round() * verify;
    if draft != want {
        return Err(validation_err!("{draft} draft forwards over {verify} rounds, expected {want}"));
    }
    let emitted: usize = run.rounds.iter().map(|r| r.emitted()).sum();
    if emitted != run.tokens.len() + run.dropped {
        return Err(validation_err!("rounds emitted {emitted} tokens, run holds {}", run.tokens.len() + run.dropped));
    }
    Ok(())
}

/// `0.5 * sum |a - b|`.
pub fn total_variation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(usage_err!("supports differ: {} vs {} outcomes", a.len(), b.len()));
    }
    Ok(0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaOptions {
    /// Temperature of both the target and the draft distributions.
    pub temperature: f64,
    /// Evaluation positions sampled from the corpus (all if fewer).
    pub positions: usize,
    /// Minimum tokens before an evaluated position.
    pub min_prefix: usize,
    pub seed: u64,
}

impl Default for AlphaOptions {
    fn default() -> Self {
        Self { temperature: 0.0, positions: 2000, min_prefix: 32, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaReport {
    pub n: usize,
    pub alpha: f64,
    pub accepted: usize,
    pub trials: usize,
    /// Corpus positions skipped for lack of context.
    pub skipped: usize,
}

/// n-alpha for every `n` in `0..=max_n` on the same positions.
///
/// At an evaluated position `k` the draft model sees true features up to
/// element `k - n - 1`; the last `n` elements carry features the draft model
/// itself predicted, with the true tokens. It then drafts one token for
/// position `k + 1`, which is accepted or rejected against the target's
/// distribution by the usual rule (argmax match at temperature 0).
pub fn compute_alpha_table<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    eval: &Corpus,
    max_n: usize,
    opts: &AlphaOptions,
) -> Result<Vec<AlphaReport>> {
    if max_n > MAX_ALPHA_N {
        return Err(usage_err!("n must be at most {MAX_ALPHA_N}, got {max_n}"));
    }
    if !(opts.temperature >= 0.0 && opts.temperature.is_finite()) {
        return Err(usage_err!("temperature must be finite and non-negative"));
    }
    let first_valid = opts.min_prefix.max(max_n + 1);
    let windows: Vec<Vec<u32>> = eval
        .sequences
        .iter()
        .flat_map(|s| split_windows(s, target.config.max_positions))
        .map(|w| w.tokens)
        .collect();
    let mut candidates = Vec::new();
    let mut skipped = 0;
    for (w, toks) in windows.iter().enumerate() {
        for k in 1..toks.len() {
            if k >= first_valid {
                candidates.push((w, k));
            } else {
                skipped += 1;
            }
        }
    }
    if candidates.is_empty() {
        return Err(usage_err!("no corpus position has {first_valid} tokens of context"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(opts.positions.max(1));
    let mut by_window: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (w, k) in candidates {
        by_window.entry(w).or_default().insert(k);
    }
    let mut sampler = RngSampler::seed_from_u64(opts.seed.wrapping_add(1));
    let mut accepted = vec![0usize; max_n + 1];
    let mut trials = 0;
    for (w, ks) in by_window {
        let toks = &windows[w];
        let len = toks.len();
        let out = target.forward_causal(toks, &mut target.new_cache())?;
        let elements: Vec<DraftElement> = (0..len - 1)
            .map(|i| DraftElement { feature: out.features.row(i).to_vec(), token: toks[i], next_token: toks[i + 1] })
            .collect();
        let refs: Vec<&DraftElement> = elements.iter().collect();
        let mut base = drafter.new_cache(target);
        let positions: Vec<usize> = (0..len - 1).collect();
        let outs = drafter.step(target, &refs, &positions, &AttentionMask::causal(0, len - 1), &mut base)?;
        for k in ks {
            let p_logits = out.logits.row(k);
            for (n, acc) in accepted.iter_mut().enumerate() {
                let q_logits = if n == 0 {
                    outs[k - 1].1.clone()
                } else {
                    let start = k - n;
                    let mut cache = base.clone();
                    drafter.truncate(&mut cache, start);
                    let mut feat = outs[start - 1].0.clone();
                    let mut logits = Vec::new();
                    for i in start..k {
                        let e = DraftElement { feature: feat, token: toks[i], next_token: toks[i + 1] };
                        let mut o = drafter.step(target, &[&e], &[i], &AttentionMask::causal(i, 1), &mut cache)?;
                        (feat, logits) = o.pop().expect("one output");
                    }
                    logits
                };
                if judge_one(p_logits, &q_logits, opts.temperature, &mut sampler)? {
                    *acc += 1;
                }
            }
            trials += 1;
        }
    }
    Ok(accepted
        .into_iter()
        .enumerate()
        .map(|(n, a)| AlphaReport { n, alpha: a as f64 / trials as f64, accepted: a, trials, skipped })
        .collect())
}

/// n-alpha for a single `n`.
pub fn compute_alpha_n<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    eval: &Corpus,
    n: usize,
    opts: &AlphaOptions,
) -> Result<AlphaReport> {
    let table = compute_alpha_table(target, drafter, eval, n, opts)?;
    Ok(table[n])
}

/// Drafts one token from `q_logits` and checks it against `p_logits`.
fn judge_one(p_logits: &[f32], q_logits: &[f32], temperature: f64, sampler: &mut impl Sampler) -> Result<bool> {
    if temperature == 0.0 {
        let p = logits_to_dist(p_logits, 0.0);
        let q = logits_to_dist(q_logits, 1.0);
        return Ok(argmax(&q) == argmax(&p));
    }
    let p = logits_to_dist(p_logits, temperature);
    let q = logits_to_dist(q_logits, temperature);
    let x = sampler.categorical(&q);
    Ok(sampler.accept(acceptance_probability(&p, &q, x)?))
}

/// Goodness of fit of observed counts against a distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub label: String,
    pub samples: usize,
    pub tvd: f64,
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson chi-square of `counts` against `expected` probabilities. Bins
/// with expected count below 5 are pooled into one bin (dropped if the
/// pool itself stays below 5).
pub fn chi_square(counts: &[usize], expected: &[f64]) -> Result<(f64, usize, f64)> {
    if counts.len() != expected.len() {
        return Err(usage_err!("supports differ: {} vs {} outcomes", counts.len(), expected.len()));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(usage_err!("no samples"));
    }
    let nf = n as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut pool_o, mut pool_e) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(expected) {
        let e = p * nf;
        if e >= 5.0 {
            bins.push((c as f64, e));
        } else {
            pool_o += c as f64;
            pool_e += e;
        }
    }
    if pool_e >= 5.0 {
        bins.push((pool_o, pool_e));
    } else if pool_o > 0.0 && pool_e > 0.0 {
        // Too little mass to test on its own; fold into the smallest bin.
        if let Some(b) = bins.iter_mut().min_by(|a, b| a.1.total_cmp(&b.1)) {
            b.0 += pool_o;
            b.1 += pool_e;
        }
    } else if pool_o > 0.0 {
        // Outcomes the distribution forbids.
        return Ok((f64::INFINITY, bins.len().max(1), 0.0));
    }
    if bins.len() < 2 {
        return Ok((0.0, 0, 1.0));
    }
    let stat: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let df = bins.len() - 1;
    let dist = ChiSquared::new(df as f64).map_err(|e| usage_err!("{e}"))?;
    Ok((stat, df, dist.sf(stat)))
}

fn fit(label: String, counts: &[usize], expected: &[f64]) -> Result<FitReport> {
    let samples: usize = counts.iter().sum();
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / samples.max(1) as f64).collect();
    let tvd = total_variation(&empirical, expected)?;
    let (chi2, df, p_value) = chi_square(counts, expected)?;
    Ok(FitReport { label, samples, tvd, chi2, df, p_value })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Trials in total, split evenly over prompts.
    pub trials: usize,
    pub temperature: f64,
    pub mode: DecodeMode,
    pub rule: AcceptanceRule,
    pub seed: u64,
    /// Family-wise significance level (Bonferroni-corrected per test).
    pub alpha_level: f64,
    pub tvd_threshold: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            trials: 100_000,
            temperature: 1.0,
            mode: DecodeMode::Chain { gamma: 4 },
            rule: AcceptanceRule::Exact,
            seed: 0,
            alpha_level: 1e-3,
            tvd_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub options: AuditOptions,
    /// Per-test p-value threshold after Bonferroni correction.
    pub p_threshold: f64,
    pub fits: Vec<FitReport>,
    pub passed: bool,
}

impl AuditReport {
    pub fn worst_tvd(&self) -> f64 {
        self.fits.iter().map(|f| f.tvd).fold(0.0, f64::max)
    }

    pub fn min_p_value(&self) -> f64 {
        self.fits.iter().map(|f| f.p_value).fold(1.0, f64::min)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "lossless audit: {} trials, T={}, {:?}, rule {:?}\nthresholds: TVD < {}, p > {:.3e} (Bonferroni over {} tests)\n",
            self.options.trials,
            self.options.temperature,
            self.options.mode,
            self.options.rule,
            self.options.tvd_threshold,
            self.p_threshold,
            self.fits.len()
        );
        let _ = writeln!(s, "{:<28} {:>8} {:>8} {:>10} {:>4} {:>10}", "context", "samples", "TVD", "chi2", "df", "p");
        for f in &self.fits {
            let _ = writeln!(
                s,
                "{:<28} {:>8} {:>8.5} {:>10.2} {:>4} {:>10.3e}",
                f.label, f.samples, f.tvd, f.chi2, f.df, f.p_value
            );
        }
        let _ = writeln!(s, "result: {}", if self.passed { "PASS" } else { "FAIL" });
        s
    }
}

/// Compares the tokens speculative decoding emits with the target's own
/// conditionals.
///
/// For each prompt the first token is fixed by one prefill, giving a context
/// `c`. Every trial forks that session under a fresh seed and runs decoding
/// rounds until two tokens are out. The first token is tested against
/// `p(. | c)`; the second, among trials whose first token is the most likely
/// one `a`, against `p(. | c, a)`.
pub fn lossless_audit<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    prompts: &[Vec<u32>],
    opts: &AuditOptions,
) -> Result<AuditReport> {
    if opts.temperature.is_nan() || opts.temperature <= 0.0 {
        return Err(usage_err!("the audit needs a positive temperature"));
    }
    if prompts.is_empty() || opts.trials < prompts.len() {
        return Err(usage_err!("need at least one prompt and one trial per prompt"));
    }
    let params = GenerationParams {
        mode: opts.mode.clone(),
        temperature: opts.temperature,
        max_new_tokens: 3,
        seed: opts.seed,
        rule: opts.rule,
    };
    let engine = Engine::new(target, drafter, params)?;
    let v = target.config.vocab_size;
    let per_prompt = opts.trials / prompts.len();
    let mut fits = Vec::new();
    for (pi, prompt) in prompts.iter().enumerate() {
        let base = engine.prefill(prompt)?;
        let ctx = base.tokens.clone();
        let law = |toks: &[u32]| -> Result<Vec<f64>> {
            let out = target.forward_causal(toks, &mut target.new_cache())?;
            let d = logits_to_dist(out.logits.row(toks.len() - 1), opts.temperature);
            check_distribution(&d)?;
            Ok(d)
        };
        let p1 = law(&ctx)?;
        let a = argmax(&p1) as u32;
        let p2 = law(&[ctx.as_slice(), &[a]].concat())?;
        let mut first = vec![0usize; v];
        let mut second = vec![0usize; v];
        for t in 0..per_prompt {
            let mut s = base.clone();
            s.reseed(opts.seed ^ ((pi as u64) << 40) ^ (t as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            while s.tokens.len() < ctx.len() + 2 {
                engine.step(&mut s)?;
            }
            let x1 = s.tokens[ctx.len()];
            first[x1 as usize] += 1;
            if x1 == a {
                second[s.tokens[ctx.len() + 1] as usize] += 1;
            }
        }
        fits.push(fit(format!("prompt {pi} first token"), &first, &p1)?);
        if second.iter().sum::<usize>() > 0 {
            fits.push(fit(format!("prompt {pi} second | first={a}"), &second, &p2)?);
        }
    }
    let p_threshold = opts.alpha_level / fits.len() as f64;
    let passed = fits.iter().all(|f| f.tvd < opts.tvd_threshold && f.p_value > p_threshold);
    Ok(AuditReport { options: opts.clone(), p_threshold, fits, passed })
}

/// One decoding configuration to time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub label: String,
    pub params: GenerationParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { warmup: 2, repetitions: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub label: String,
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub prompts: usize,
    pub seeds: Vec<u64>,
    /// Wall time over all prompts, per timed repetition.
    pub walltimes: Vec<f64>,
    pub median_secs: f64,
    /// Vanilla median over this record's median at the same temperature.
    pub speedup: f64,
    pub tau: Option<Tau>,
    /// 0-alpha upward, when measured for this temperature.
    pub alpha: Vec<f64>,
    pub tokens: usize,
    pub target_forwards: usize,
    pub draft_forwards: usize,
}

pub const BENCH_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub target_fingerprint: String,
    pub draft_id: String,
    pub options: BenchOptions,
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    /// Aligned text table: mode, temperature, speedup, τ, 0-α..4-α.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>4} {:>8} {:>6}", "mode", "T", "Speedup", "τ");
        for n in 0..=MAX_ALPHA_N {
            let _ = write!(s, " {:>6}", format!("{n}-α"));
        }
        s.push('\n');
        for r in &self.records {
            let tau = r.tau.map_or("-".to_string(), |t| format!("{:.2}", t.with_bonus));
            let _ = write!(s, "{:<16} {:>4} {:>7.2}x {:>6}", r.label, r.temperature, r.speedup, tau);
            for n in 0..=MAX_ALPHA_N {
                let a = r.alpha.get(n).map_or("-".to_string(), |a| format!("{a:.2}"));
                let _ = write!(s, " {a:>6}");
            }
            s.push('\n');
        }
        s
    }

    /// Fills `alpha` on every speculative record at `temperature`.
    pub fn attach_alpha(&mut self, temperature: f64, alpha: &[AlphaReport]) {
        for r in &mut self.records {
            if r.temperature == temperature && r.mode != DecodeMode::Vanilla {
                r.alpha = alpha.iter().map(|a| a.alpha).collect();
            }
        }
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs one repetition of `case` over all prompts and returns its total
/// wall time with the generations.
fn run_case<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    prompts: &[Vec<u32>],
    seeds: &[u64],
    case: &BenchCase,
) -> Result<(f64, Vec<Generation>)> {
    let mut total = 0.0;
    let mut runs = Vec::with_capacity(prompts.len());
    for (prompt, &seed) in prompts.iter().zip(seeds) {
        let params = GenerationParams { seed, ..case.params.clone() };
        let g = Engine::new(target, drafter, params)?.generate(prompt)?;
        check_counters(&g, &case.params.mode)?;
        total += g.elapsed_secs;
        runs.push(g);
    }
    Ok((total, runs))
}

fn record(case: &BenchCase, prompts: usize, seeds: Vec<u64>, walltimes: Vec<f64>, runs: &[Generation]) -> BenchRecord {
    let (target_forwards, draft_forwards) =
        runs.iter().map(|g| count_forwards(&g.rounds)).fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
    let tau = match case.params.mode {
        DecodeMode::Vanilla => None,
        _ => compute_tau(runs).ok(),
    };
    BenchRecord {
        label: case.label.clone(),
        mode: case.params.mode.clone(),
        temperature: case.params.temperature,
        max_new_tokens: case.params.max_new_tokens,
        prompts,
        seeds,
        median_secs: median(&walltimes),
        walltimes,
        speedup: 1.0,
        tau,
        alpha: Vec::new(),
        tokens: runs.iter().map(|g| g.tokens.len()).sum(),
        target_forwards,
        draft_forwards,
    }
}

/// Times every case on the same prompts, after `warmup` untimed
/// repetitions, and reports speedups over vanilla decoding at the same
/// temperature and token budget (timed automatically if absent).
pub fn speedup_benchmark<D: DraftModel>(
    target: &TransformerWeights,
    drafter: &D,
    draft_id: &str,
    prompts: &[Vec<u32>],
    cases: &[BenchCase],
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if prompts.is_empty() || cases.is_empty() || opts.repetitions == 0 {
        return Err(usage_err!("need prompts, cases and at least one repetition"));
    }
    let mut all: Vec<BenchCase> = Vec::new();
    for c in cases {
        let has_baseline = |v: &[BenchCase]| {
            v.iter().any(|b| {
                b.params.mode == DecodeMode::Vanilla
                    && b.params.temperature == c.params.temperature
                    && b.params.max_new_tokens == c.params.max_new_tokens
            })
        };
        if !has_baseline(cases) && !has_baseline(&all) {
            all.push(BenchCase {
                label: "vanilla".into(),
                params: GenerationParams { mode: DecodeMode::Vanilla, ..c.params.clone() },
            });
        }
        all.push(c.clone());
    }
    // Repetitions are interleaved across cases so that slow periods on a
    // shared machine hit every case alike.
    let seeds: Vec<Vec<u64>> = all
        .iter()
        .map(|c| (0..prompts.len() as u64).map(|i| c.params.seed.wrapping_add(i)).collect())
        .collect();
    let mut walltimes = vec![Vec::with_capacity(opts.repetitions); all.len()];
    let mut runs: Vec<Vec<Generation>> = (0..all.len()).map(|_| Vec::new()).collect();
    for rep in 0..opts.warmup + opts.repetitions {
        for (i, case) in all.iter().enumerate() {
            let (total, these) = run_case(target, drafter, prompts, &seeds[i], case)?;
            if rep >= opts.warmup {
                walltimes[i].push(total);
                runs[i] = these;
            }
        }
    }
    let mut records: Vec<BenchRecord> = all
        .iter()
        .zip(seeds)
        .zip(walltimes)
        .zip(&runs)
        .map(|(((case, seeds), walltimes), runs)| record(case, prompts.len(), seeds, walltimes, runs))
        .collect();
    let baselines: Vec<(f64, usize, f64)> = records
        .iter()
        .filter(|r| r.mode == DecodeMode::Vanilla)
        .map(|r| (r.temperature, r.max_new_tokens, r.median_secs))
        .collect();
    for r in &mut records {
        let base = baselines
            .iter()
            .find(|b| b.0 == r.temperature && b.1 == r.max_new_tokens)
            .expect("baseline added above");
        r.speedup = base.2 / r.median_secs.max(f64::MIN_POSITIVE);
    }
    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        target_fingerprint: target.fingerprint(),
        draft_id: draft_id.to_string(),
        options: *opts,
        records,
    })
}
