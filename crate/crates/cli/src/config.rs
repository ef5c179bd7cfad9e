//! Strict JSON engine configuration and command-line overrides.
//!
//! Precedence, highest first: command-line flags, the config file, built-in
//! defaults. Unknown keys anywhere in the file are rejected before any model
//! is loaded.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use specdec_core::draft_head::DraftInputMode;
use specdec_core::drafting::TreeTopology;
use specdec_core::engine::{DecodeMode, GenerationParams};
use specdec_core::model::ModelConfig;
use specdec_core::training::{DataMode, TrainConfig};
use specdec_core::verification::AcceptanceRule;

use crate::error::{CliError, CliResult};

/// Draft-head input variant, as named on the command line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DraftInput {
    /// Feature plus the token one step ahead.
    #[default]
    Shifted,
    /// Feature plus the token at the same step.
    Unshifted,
    /// Token only.
    Token,
    /// Feature only.
    Feature,
}

impl From<DraftInput> for DraftInputMode {
    fn from(d: DraftInput) -> Self {
        match d {
            DraftInput::Shifted => DraftInputMode::FeatureShiftedToken,
            DraftInput::Unshifted => DraftInputMode::FeatureUnshiftedToken,
            DraftInput::Token => DraftInputMode::TokenOnly,
            DraftInput::Feature => DraftInputMode::FeatureOnly,
        }
    }
}

/// Decoding strategy, as named on the command line.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Vanilla,
    Chain,
    #[default]
    Tree,
}

/// Where the training data for the draft head comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataName {
    /// Teacher-forced features over the corpus.
    #[default]
    Fixed,
    /// Features over the target's own greedy continuations.
    Generated,
}

impl From<DataName> for DataMode {
    fn from(d: DataName) -> Self {
        match d {
            DataName::Fixed => DataMode::FixedDataset,
            DataName::Generated => DataMode::TargetGenerated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Seed of the synthetic grammar used by `make-corpus`.
    pub seed: u64,
    /// Minimum token count written by `make-corpus`.
    pub size: usize,
    /// Fraction of sequences held out for evaluation, bench and audit prompts.
    pub eval_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { seed: 0, size: 100_000, eval_fraction: 0.1 }
    }
}

/// Artifact locations, relative to the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub target: PathBuf,
    pub draft: PathBuf,
    /// Curves, run logs and reports.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "artifacts/corpus.jsonl".into(),
            target: "artifacts/target.eglc".into(),
            draft: "artifacts/draft.eglc".into(),
            out_dir: "artifacts".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub mode: ModeName,
    pub gamma: usize,
    /// 0 is greedy.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { mode: ModeName::Tree, gamma: 4, temperature: 0.0, max_new_tokens: 128, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Held-out sequences used as prompts.
    pub prompts: usize,
    pub prompt_len: usize,
    pub modes: Vec<ModeName>,
    pub temperatures: Vec<f64>,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            prompts: 10,
            prompt_len: 16,
            modes: vec![ModeName::Chain, ModeName::Tree],
            temperatures: vec![0.0, 1.0],
            warmup: 2,
            repetitions: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub trials: usize,
    pub temperature: f64,
    pub mode: ModeName,
    pub prompts: usize,
    pub seed: u64,
    /// Family-wise significance level before Bonferroni correction.
    pub alpha_level: f64,
    pub tvd_threshold: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            trials: 100_000,
            temperature: 1.0,
            mode: ModeName::Tree,
            prompts: 1,
            seed: 0,
            alpha_level: 1e-3,
            tvd_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaConfig {
    /// Sampled positions per `n`.
    pub positions: usize,
    pub min_prefix: usize,
    pub temperatures: Vec<f64>,
    pub seed: u64,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self { positions: 2000, min_prefix: 32, temperatures: vec![0.0, 1.0], seed: 0 }
    }
}

/// Everything a command may need.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub paths: PathsConfig,
    pub target_training: TrainConfig,
    pub draft_training: TrainConfig,
    pub draft_input: DraftInput,
    pub generation: GenerationConfig,
    pub tree: TreeTopology,
    pub bench: BenchConfig,
    pub audit: AuditConfig,
    pub alpha: AlphaConfig,
}

impl EngineConfig {
    /// Parses a config file strictly.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.model.validate()?;
        self.target_training.validate()?;
        self.draft_training.validate()?;
        self.tree.validate()?;
        if !(0.0..1.0).contains(&self.corpus.eval_fraction) || self.corpus.eval_fraction == 0.0 {
            return bad(format!("corpus.eval_fraction must be in (0, 1), got {}", self.corpus.eval_fraction));
        }
        if self.bench.prompts == 0 || self.bench.prompt_len == 0 || self.bench.repetitions == 0 {
            return bad("bench.prompts, bench.prompt_len and bench.repetitions must be positive".into());
        }
        if self.bench.modes.is_empty() || self.bench.temperatures.is_empty() {
            return bad("bench.modes and bench.temperatures must not be empty".into());
        }
        if self.alpha.temperatures.is_empty() {
            return bad("alpha.temperatures must not be empty".into());
        }
        if self.audit.prompts == 0 {
            return bad("audit.prompts must be positive".into());
        }
        for &t in self.bench.temperatures.iter().chain(&self.alpha.temperatures) {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("temperature {t} must be finite and non-negative"));
            }
        }
        self.generation_params()?.validate()?;
        Ok(())
    }

    /// The decode mode `name` with this config's gamma and tree.
    pub fn decode_mode(&self, name: ModeName) -> DecodeMode {
        match name {
            ModeName::Vanilla => DecodeMode::Vanilla,
            ModeName::Chain => DecodeMode::Chain { gamma: self.generation.gamma },
            ModeName::Tree => DecodeMode::Tree(self.tree.clone()),
        }
    }

    pub fn generation_params(&self) -> CliResult<GenerationParams> {
        let g = &self.generation;
        Ok(GenerationParams {
            mode: self.decode_mode(g.mode),
            temperature: g.temperature,
            max_new_tokens: g.max_new_tokens,
            seed: g.seed,
            rule: AcceptanceRule::Exact,
        })
    }

    /// Applies command-line overrides, then revalidates.
    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = &o.$flag { $field = v.clone(); })*
            };
        }
        set! {
            corpus => self.paths.corpus,
            target => self.paths.target,
            draft => self.paths.draft,
            out_dir => self.paths.out_dir,
            mode => self.generation.mode,
            gamma => self.generation.gamma,
            temperature => self.generation.temperature,
            max_new_tokens => self.generation.max_new_tokens,
            seed => self.generation.seed,
            branching => self.tree.branching,
            budget => self.tree.budget,
            draft_input => self.draft_input,
            trials => self.audit.trials,
            positions => self.alpha.positions,
            prompts => self.bench.prompts,
            repetitions => self.bench.repetitions,
        }
        if o.chain {
            self.generation.mode = ModeName::Chain;
        }
        if o.tree {
            self.generation.mode = ModeName::Tree;
        }
        if let Some(d) = o.draft_data {
            self.draft_training.data_mode = d.into();
        }
        if let Some(e) = o.epochs {
            self.target_training.epochs = e;
            self.draft_training.epochs = e;
        }
        if let Some(s) = o.max_steps {
            self.target_training.max_steps = Some(s);
            self.draft_training.max_steps = Some(s);
        }
        self.validate()
    }
}

/// Flags that override config values. They apply to every command that
/// reads the corresponding setting.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Strict JSON engine config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// JSON-lines corpus.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Target checkpoint.
    #[arg(long, global = true)]
    pub target: Option<PathBuf>,
    /// Draft-head checkpoint.
    #[arg(long, global = true)]
    pub draft: Option<PathBuf>,
    /// Directory for curves, reports and run logs.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Decoding strategy.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeName>,
    /// Shorthand for `--mode chain`.
    #[arg(long, global = true, conflicts_with_all = ["mode", "tree"])]
    pub chain: bool,
    /// Shorthand for `--mode tree`.
    #[arg(long, global = true, conflicts_with = "mode")]
    pub tree: bool,
    /// Chain draft length.
    #[arg(long, global = true)]
    pub gamma: Option<usize>,
    /// Tree branching per depth, e.g. `4,2,1`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub branching: Option<Vec<usize>>,
    /// Tree node budget.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Sampling temperature; 0 is greedy.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Tokens to generate per prompt.
    #[arg(long, global = true)]
    pub max_new_tokens: Option<usize>,
    /// Generation seed; the corpus seed for `make-corpus`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Draft-head input variant.
    #[arg(long, global = true, value_enum)]
    pub draft_input: Option<DraftInput>,
    /// Draft-head training data.
    #[arg(long, global = true, value_enum)]
    pub draft_data: Option<DataName>,
    /// Training epochs for both target and draft.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Optimizer-step cap for both target and draft.
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    /// Audit trials.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Alpha-table positions per `n`.
    #[arg(long, global = true)]
    pub positions: Option<usize>,
    /// Bench prompt count.
    #[arg(long, global = true)]
    pub prompts: Option<usize>,
    /// Bench repetitions.
    #[arg(long, global = true)]
    pub repetitions: Option<usize>,
}

impl Overrides {
    /// Loads the config file (or defaults) and applies these overrides.
    pub fn resolve(&self) -> CliResult<EngineConfig> {
        let mut cfg = match &self.config {
            Some(p) => EngineConfig::load(p)?,
            None => EngineConfig::default(),
        };
        cfg.apply(self)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = EngineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(EngineConfig::parse(&text).unwrap(), cfg);
        assert_eq!(EngineConfig::parse("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"tree": {"branching": [2], "budget": 2, "depth": 3}}"#,
            r#"{"model": {"vocab_size": 256, "hidden_dim": 128, "num_layers": 1, "num_heads": 4, "ffn_dim": 8, "max_positions": 64, "seed": 0, "extra": 0}}"#,
            r#"{"draft_training": {"learning_rate": 0.1}}"#,
        ] {
            assert!(matches!(EngineConfig::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            r#"{"tree": {"branching": [2, 2], "budget": 9}}"#,
            r#"{"generation": {"temperature": -1}}"#,
            r#"{"corpus": {"eval_fraction": 1.5}}"#,
            r#"{"bench": {"modes": []}}"#,
            r#"{"draft_input": "both"}"#,
        ] {
            assert!(EngineConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = EngineConfig::parse(r#"{"generation": {"mode": "vanilla", "gamma": 2}, "tree": {"branching": [2, 1], "budget": 3}}"#).unwrap();
        let o = Overrides {
            chain: true,
            gamma: Some(5),
            branching: Some(vec![3, 1]),
            budget: Some(4),
            draft_input: Some(DraftInput::Token),
            epochs: Some(7),
            ..Overrides::default()
        };
        cfg.apply(&o).unwrap();
        assert_eq!(cfg.generation.mode, ModeName::Chain);
        assert_eq!(cfg.decode_mode(cfg.generation.mode), DecodeMode::Chain { gamma: 5 });
        assert_eq!(cfg.tree, TreeTopology { branching: vec![3, 1], budget: 4 });
        assert_eq!(DraftInputMode::from(cfg.draft_input), DraftInputMode::TokenOnly);
        assert_eq!((cfg.target_training.epochs, cfg.draft_training.epochs), (7, 7));
        let bad = Overrides { budget: Some(99), ..Overrides::default() };
        assert!(cfg.apply(&bad).is_err());
    }
}
