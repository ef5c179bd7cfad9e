//! The `specdec` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use specdec_core::bench_metrics::{
    self, compute_alpha_table, compute_tau, lossless_audit, speedup_benchmark, AlphaOptions, AlphaReport, AuditOptions,
    AuditReport, BenchCase, BenchOptions, BenchReport, Tau, MAX_ALPHA_N,
};
use specdec_core::checkpoint::{self, write_atomic};
use specdec_core::draft_head::{DraftElement, DraftHead, DraftInputMode};
use specdec_core::drafting::{DraftModel, ModelOracle};
use specdec_core::engine::{count_forwards, DecodeMode, Engine, GenerationParams, RoundRecord};
use specdec_core::model::{AttentionMask, KVCache, TransformerWeights};
use specdec_core::training::corpus::{self, decode_bytes, encode_bytes, ingest_corpus, Corpus};
use specdec_core::training::{self, evaluate_head, evaluate_target, mean_entropy};
use specdec_core::verification::AcceptanceRule;

use crate::config::{EngineConfig, ModeName};
use crate::error::{CliError, CliResult};

/// Fails with a config error unless `path` exists.
fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} file {} does not exist", path.display())))
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(specdec_core::Error::from)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn load_corpus(cfg: &EngineConfig) -> CliResult<(Corpus, Corpus)> {
    require(&cfg.paths.corpus, "corpus")?;
    let c = ingest_corpus(&cfg.paths.corpus, cfg.model.vocab_size)?;
    Ok(c.split(cfg.corpus.eval_fraction)?)
}

fn load_target(cfg: &EngineConfig) -> CliResult<TransformerWeights> {
    require(&cfg.paths.target, "target checkpoint")?;
    Ok(checkpoint::load_target(&cfg.paths.target)?)
}

/// The draft model used by generate, bench, audit and alpha-table.
#[allow(clippy::large_enum_variant)]
pub enum Drafter {
    Head(DraftHead),
    /// A perfect draft: the target without its identity blocks.
    Oracle(ModelOracle),
}

impl Drafter {
    pub fn load(cfg: &EngineConfig, target: &TransformerWeights, oracle: bool) -> CliResult<Self> {
        if oracle {
            return Ok(Drafter::Oracle(ModelOracle { model: target.without_identity_layers()? }));
        }
        require(&cfg.paths.draft, "draft checkpoint")?;
        Ok(Drafter::Head(checkpoint::load_draft_head(&cfg.paths.draft, target)?))
    }

    pub fn id(&self, cfg: &EngineConfig) -> String {
        match self {
            Drafter::Head(h) => format!("{} ({:?})", cfg.paths.draft.display(), h.mode()),
            Drafter::Oracle(_) => "oracle".into(),
        }
    }
}

impl DraftModel for Drafter {
    type Cache = KVCache;

    fn new_cache(&self, target: &TransformerWeights) -> KVCache {
        match self {
            Drafter::Head(h) => DraftModel::new_cache(h, target),
            Drafter::Oracle(o) => o.new_cache(target),
        }
    }

    fn cache_len(&self, cache: &KVCache) -> usize {
        match self {
            Drafter::Head(h) => h.cache_len(cache),
            Drafter::Oracle(o) => o.cache_len(cache),
        }
    }

    fn truncate(&self, cache: &mut KVCache, len: usize) {
        match self {
            Drafter::Head(h) => h.truncate(cache, len),
            Drafter::Oracle(o) => o.truncate(cache, len),
        }
    }

    fn step(
        &self,
        target: &TransformerWeights,
        elements: &[&DraftElement],
        positions: &[usize],
        mask: &AttentionMask,
        cache: &mut KVCache,
    ) -> specdec_core::Result<Vec<(Vec<f32>, Vec<f32>)>> {
        match self {
            Drafter::Head(h) => h.step(target, elements, positions, mask, cache),
            Drafter::Oracle(o) => o.step(target, elements, positions, mask, cache),
        }
    }
}

/// First `len` tokens of the first `count` held-out sequences long enough
/// to provide them.
pub fn eval_prompts(eval: &Corpus, count: usize, len: usize) -> CliResult<Vec<Vec<u32>>> {
    let prompts: Vec<Vec<u32>> =
        eval.sequences.iter().filter(|s| s.len() >= len).take(count).map(|s| s[..len].to_vec()).collect();
    if prompts.len() < count {
        return Err(CliError::Config(format!(
            "held-out split has only {} sequences of at least {len} tokens, {count} requested",
            prompts.len()
        )));
    }
    Ok(prompts)
}

fn mode_label(mode: &DecodeMode) -> String {
    match mode {
        DecodeMode::Vanilla => "vanilla".into(),
        DecodeMode::Chain { gamma } => format!("chain{gamma}"),
        DecodeMode::Tree(t) => {
            let b: Vec<String> = t.branching.iter().map(ToString::to_string).collect();
            format!("tree{}/{}", b.join(","), t.budget)
        }
    }
}

/// Writes a synthetic-grammar corpus; returns its path.
pub fn make_corpus(cfg: &EngineConfig, out: Option<PathBuf>, seed: u64, size: usize) -> CliResult<String> {
    let path = out.unwrap_or_else(|| cfg.paths.corpus.clone());
    if size == 0 {
        return Err(CliError::Config("corpus size must be positive".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let docs = corpus::synthetic_documents(seed, size);
    let text = corpus::corpus_jsonl(&docs);
    let parsed = Corpus::parse(&text, &path.display().to_string(), cfg.model.vocab_size)?;
    write_atomic(&path, text.as_bytes())?;
    Ok(format!(
        "wrote {} sequences, {} tokens to {}",
        parsed.sequences.len(),
        parsed.num_tokens(),
        path.display()
    ))
}

/// Trains the target on the corpus, appends any configured identity blocks
/// and saves the checkpoint and loss curve.
pub fn train_target(cfg: &EngineConfig) -> CliResult<String> {
    let (train, eval) = load_corpus(cfg)?;
    ensure_dir(&cfg.paths.out_dir)?;
    let mut base_cfg = cfg.model.clone();
    base_cfg.identity_layers = 0;
    base_cfg.identity_ffn_dim = 0;
    let (base, curve) = training::train_target_toy(&train, &base_cfg, &cfg.target_training)?;
    let ce = evaluate_target(&base, &eval)?;
    let entropy = mean_entropy(&base, &eval)?;
    let target = match cfg.model.identity_layers {
        0 => base,
        n => base.with_identity_layers(n, cfg.model.identity_ffn_dim)?,
    };
    let curve_path = cfg.paths.out_dir.join("target_curve.csv");
    write_atomic(&curve_path, curve.to_csv().as_bytes())?;
    checkpoint::save_target(&cfg.paths.target, &target)?;
    let means: Vec<String> = curve.epoch_means().iter().map(|m| format!("{m:.4}")).collect();
    Ok(format!(
        "target: {:.1} MB in {} layers ({} identity), epoch mean loss [{}]\nheld-out cross-entropy {ce:.4} nats, mean entropy {entropy:.4} nats\nwrote {} and {}",
        target.byte_size() as f64 / 1e6,
        target.config.total_layers(),
        target.config.identity_layers,
        means.join(", "),
        cfg.paths.target.display(),
        curve_path.display()
    ))
}

/// Trains a draft head of the configured input variant.
///
/// Features come from the target without its identity blocks, which are
/// bit-identical and far cheaper; the checkpoint is bound to the full
/// target's fingerprint.
pub fn train_draft(cfg: &EngineConfig) -> CliResult<String> {
    let target = load_target(cfg)?;
    let (train, eval) = load_corpus(cfg)?;
    ensure_dir(&cfg.paths.out_dir)?;
    let base = target.without_identity_layers()?;
    let mode = DraftInputMode::from(cfg.draft_input);
    let tc = &cfg.draft_training;
    let data = training::collect_training_pairs(&base, &train, tc.data_mode, tc.seq_len)?;
    let (head, curve) = training::train_draft_head_on(&base, &data, mode, tc)?;
    let held = training::collect_training_pairs(&base, &eval, training::DataMode::FixedDataset, tc.seq_len)?;
    let loss = evaluate_head(&base, &head, &held, tc.w_cls)?;
    let head = DraftHead::from_weights(&target, head.weights)?;
    let curve_path = cfg.paths.out_dir.join("draft_curve.csv");
    write_atomic(&curve_path, curve.to_csv().as_bytes())?;
    checkpoint::save_draft_head(&cfg.paths.draft, &head, &target)?;
    let (first, last) = curve.first_last(10);
    Ok(format!(
        "draft head {mode:?}: {} params, {:?} data, loss {first:.4} -> {last:.4}, held-out loss {loss:.4}\nwrote {} and {}",
        head.num_params(),
        tc.data_mode,
        cfg.paths.draft.display(),
        curve_path.display()
    ))
}

/// Per-generation record written by `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub target_fingerprint: String,
    pub draft: String,
    pub params: GenerationParams,
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    pub text: String,
    pub rounds: Vec<RoundRecord>,
    pub tau: Option<Tau>,
    pub target_forwards: usize,
    pub draft_forwards: usize,
    pub capacity_exhausted: bool,
    pub elapsed_secs: f64,
}

/// Prompt given as UTF-8 text or as explicit token ids.
#[derive(Clone, Debug)]
pub enum Prompt {
    Text(String),
    Tokens(Vec<u32>),
}

/// Decodes one prompt; returns the run log and its path.
pub fn generate(cfg: &EngineConfig, prompt: &Prompt, oracle: bool, runlog: Option<PathBuf>) -> CliResult<(RunLog, PathBuf)> {
    let params = cfg.generation_params()?;
    let target = load_target(cfg)?;
    let drafter = Drafter::load(cfg, &target, oracle)?;
    let tokens = match prompt {
        Prompt::Text(s) => encode_bytes(s),
        Prompt::Tokens(t) => t.clone(),
    };
    let g = Engine::new(&target, &drafter, params.clone())?.generate(&tokens)?;
    bench_metrics::check_counters(&g, &params.mode)?;
    let (target_forwards, draft_forwards) = count_forwards(&g.rounds);
    let tau = match params.mode {
        DecodeMode::Vanilla => None,
        _ => compute_tau(std::slice::from_ref(&g)).ok(),
    };
    let log = RunLog {
        target_fingerprint: target.fingerprint(),
        draft: drafter.id(cfg),
        params,
        text: decode_bytes(&g.tokens),
        prompt: tokens,
        tokens: g.tokens,
        rounds: g.rounds,
        tau,
        target_forwards,
        draft_forwards,
        capacity_exhausted: g.capacity_exhausted,
        elapsed_secs: g.elapsed_secs,
    };
    let path = runlog.unwrap_or_else(|| cfg.paths.out_dir.join("runlog.json"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_json(&path, &log)?;
    Ok((log, path))
}

fn bench_cases(cfg: &EngineConfig, modes: &[ModeName], temperatures: &[f64]) -> Vec<BenchCase> {
    let mut cases = Vec::new();
    for &temperature in temperatures {
        for &m in modes {
            let mode = cfg.decode_mode(m);
            cases.push(BenchCase {
                label: mode_label(&mode),
                params: GenerationParams {
                    mode,
                    temperature,
                    max_new_tokens: cfg.generation.max_new_tokens,
                    seed: cfg.generation.seed,
                    rule: AcceptanceRule::Exact,
                },
            });
        }
    }
    cases
}

fn bench_options(cfg: &EngineConfig) -> BenchOptions {
    BenchOptions { warmup: cfg.bench.warmup, repetitions: cfg.bench.repetitions }
}

/// Times every configured mode against vanilla decoding; writes
/// `bench.json` and returns the report with its path.
pub fn bench(cfg: &EngineConfig, oracle: bool) -> CliResult<(BenchReport, PathBuf)> {
    let target = load_target(cfg)?;
    let drafter = Drafter::load(cfg, &target, oracle)?;
    let (_, eval) = load_corpus(cfg)?;
    ensure_dir(&cfg.paths.out_dir)?;
    let prompts = eval_prompts(&eval, cfg.bench.prompts, cfg.bench.prompt_len)?;
    let cases = bench_cases(cfg, &cfg.bench.modes, &cfg.bench.temperatures);
    let report = speedup_benchmark(&target, &drafter, &drafter.id(cfg), &prompts, &cases, &bench_options(cfg))?;
    let path = cfg.paths.out_dir.join("bench.json");
    write_json(&path, &report)?;
    Ok((report, path))
}

/// Runs the statistical lossless audit; writes `audit.json`. A failed
/// audit is returned as [`CliError::AuditFailed`] after the report is
/// written and printed by the caller.
pub fn audit(cfg: &EngineConfig, mutant: bool) -> CliResult<(AuditReport, PathBuf)> {
    let target = load_target(cfg)?;
    let drafter = Drafter::load(cfg, &target, false)?;
    let (_, eval) = load_corpus(cfg)?;
    ensure_dir(&cfg.paths.out_dir)?;
    let a = &cfg.audit;
    let prompts = eval_prompts(&eval, a.prompts, cfg.bench.prompt_len)?;
    let opts = AuditOptions {
        trials: a.trials,
        temperature: a.temperature,
        mode: cfg.decode_mode(a.mode),
        rule: if mutant { AcceptanceRule::UnclampedRatio } else { AcceptanceRule::Exact },
        seed: a.seed,
        alpha_level: a.alpha_level,
        tvd_threshold: a.tvd_threshold,
    };
    let report = lossless_audit(&target, &drafter, &prompts, &opts)?;
    let path = cfg.paths.out_dir.join(if mutant { "audit_mutant.json" } else { "audit.json" });
    write_json(&path, &report)?;
    Ok((report, path))
}

/// n-α at every configured temperature, with speedup and τ of the
/// configured chain depth; writes `alpha_table.json`.
pub fn alpha_table(cfg: &EngineConfig) -> CliResult<(BenchReport, AlphaRows, PathBuf)> {
    let target = load_target(cfg)?;
    let drafter = Drafter::load(cfg, &target, false)?;
    let (_, eval) = load_corpus(cfg)?;
    ensure_dir(&cfg.paths.out_dir)?;
    // Identity blocks leave every feature and logit unchanged.
    let base = target.without_identity_layers()?;
    let mut alphas = Vec::new();
    for &temperature in &cfg.alpha.temperatures {
        let opts = AlphaOptions {
            temperature,
            positions: cfg.alpha.positions,
            min_prefix: cfg.alpha.min_prefix,
            seed: cfg.alpha.seed,
        };
        alphas.push((temperature, compute_alpha_table(&base, &drafter, &eval, MAX_ALPHA_N, &opts)?));
    }
    let prompts = eval_prompts(&eval, cfg.bench.prompts, cfg.bench.prompt_len)?;
    let cases = bench_cases(cfg, &[ModeName::Chain], &cfg.alpha.temperatures);
    let mut report = speedup_benchmark(&target, &drafter, &drafter.id(cfg), &prompts, &cases, &bench_options(cfg))?;
    for (t, a) in &alphas {
        report.attach_alpha(*t, a);
    }
    let path = cfg.paths.out_dir.join("alpha_table.json");
    write_json(&path, &AlphaTable { report: report.clone(), alpha: alphas.clone() })?;
    Ok((report, alphas, path))
}

/// n-α reports per temperature.
pub type AlphaRows = Vec<(f64, Vec<AlphaReport>)>;

/// JSON written by `alpha-table`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub report: BenchReport,
    /// Per temperature, the raw α counts behind the table.
    pub alpha: AlphaRows,
}

/// Accept counts behind an α row.
pub fn alpha_counts(alpha: &[AlphaReport]) -> String {
    let mut s = String::new();
    for a in alpha {
        let _ = write!(s, " {}-α {}/{} (skipped {})", a.n, a.accepted, a.trials, a.skipped);
    }
    s
}
