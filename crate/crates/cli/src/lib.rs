//! The `specdec` command-line driver: corpus generation, training,
//! generation, benchmarks, the lossless audit and alpha tables.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Prompt;
use crate::config::Overrides;
use crate::error::{CliError, CliResult, EXIT_OK, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "specdec", version, about = "Feature-level speculative decoding on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic-grammar JSONL corpus.
    MakeCorpus {
        /// Output path; `paths.corpus` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Minimum number of tokens.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the target model.
    TrainTarget,
    /// Train a draft head against the target checkpoint.
    TrainDraft,
    /// Decode one prompt and write a run log.
    Generate {
        /// Prompt text, byte-tokenized.
        #[arg(long, conflicts_with = "tokens")]
        prompt: Option<String>,
        /// Prompt as comma-separated token ids.
        #[arg(long, value_delimiter = ',')]
        tokens: Option<Vec<u32>>,
        /// Draft with the target minus its identity blocks instead of the head.
        #[arg(long)]
        oracle: bool,
        /// Run-log path; `<out_dir>/runlog.json` when omitted.
        #[arg(long)]
        runlog: Option<PathBuf>,
    },
    /// Time speculative decoding against vanilla decoding.
    Bench {
        /// Draft with the target minus its identity blocks instead of the head.
        #[arg(long)]
        oracle: bool,
    },
    /// Test that sampled outputs follow the target distribution.
    Audit {
        /// Use the deliberately broken acceptance rule.
        #[arg(long)]
        mutant: bool,
    },
    /// Measure n-α and report them with speedup and τ.
    AlphaTable,
}

fn execute(cli: Cli) -> CliResult<String> {
    let o = &cli.overrides;
    let cfg = o.resolve()?;
    match cli.command {
        Command::MakeCorpus { out, size } => {
            commands::make_corpus(&cfg, out, o.seed.unwrap_or(cfg.corpus.seed), size.unwrap_or(cfg.corpus.size))
        }
        Command::TrainTarget => commands::train_target(&cfg),
        Command::TrainDraft => commands::train_draft(&cfg),
        Command::Generate { prompt, tokens, oracle, runlog } => {
            let prompt = match (prompt, tokens) {
                (Some(p), _) => Prompt::Text(p),
                (None, Some(t)) => Prompt::Tokens(t),
                (None, None) => return Err(CliError::Config("generate needs --prompt or --tokens".into())),
            };
            let (log, path) = commands::generate(&cfg, &prompt, oracle, runlog)?;
            let tau = log.tau.map_or("-".into(), |t| format!("{:.2}", t.with_bonus));
            Ok(format!(
                "{}\n\n{} tokens, {} target forwards, {} draft forwards, τ {tau}, {:.3}s\nwrote {}",
                log.text,
                log.tokens.len(),
                log.target_forwards,
                log.draft_forwards,
                log.elapsed_secs,
                path.display()
            ))
        }
        Command::Bench { oracle } => {
            let (report, path) = commands::bench(&cfg, oracle)?;
            Ok(format!("{}wrote {}", report.to_table(), path.display()))
        }
        Command::Audit { mutant } => {
            let (report, path) = commands::audit(&cfg, mutant)?;
            println!("{}wrote {}", report.to_text(), path.display());
            if report.passed {
                Ok(String::new())
            } else {
                Err(CliError::AuditFailed { tvd: report.worst_tvd(), p_value: report.min_p_value() })
            }
        }
        Command::AlphaTable => {
            let (report, alphas, path) = commands::alpha_table(&cfg)?;
            let mut s = report.to_table();
            for (t, a) in &alphas {
                s.push_str(&format!("T={t}:{}\n", commands::alpha_counts(a)));
            }
            Ok(format!("{s}wrote {}", path.display()))
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
