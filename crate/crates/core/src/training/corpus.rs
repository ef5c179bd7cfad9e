//! Token corpora: JSON-lines ingestion, the byte tokenizer, and a seeded
//! synthetic grammar used as toy training data.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage_err, validation_err, Error, Result};

/// Tokenizer id recorded for byte-level text.
pub const BYTE_TOKENIZER: &str = "byte";

/// UTF-8 bytes as token ids.
pub fn encode_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`encode_bytes`]; ids above 255 and invalid UTF-8 become U+FFFD.
pub fn decode_bytes(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| u8::try_from(t).unwrap_or(0xff)).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Ordered, validated token sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
    pub source: String,
    pub tokenizer: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    tokens: Option<Vec<u32>>,
    text: Option<String>,
}

impl Corpus {
    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Parses JSON lines of `{"tokens": [..]}` or `{"text": ".."}`. Blank
    /// lines are skipped; line numbers in errors are 1-based.
    pub fn parse(text: &str, source: &str, vocab_size: usize) -> Result<Self> {
        let mut sequences = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { what: "corpus line", line, msg };
            let parsed: Line = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            let tokens = match parsed {
                Line { tokens: Some(t), text: None } => t,
                Line { tokens: None, text: Some(s) } => encode_bytes(&s),
                _ => return Err(bad("expected exactly one of \"tokens\" or \"text\"".into())),
            };
            if tokens.is_empty() {
                return Err(bad("empty sequence".into()));
            }
            if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(validation_err!("line {line}: token {t} >= vocab_size {vocab_size}"));
            }
            sequences.push(tokens);
        }
        if sequences.is_empty() {
            return Err(usage_err!("corpus {source} is empty"));
        }
        Ok(Self { sequences, source: source.to_string(), tokenizer: BYTE_TOKENIZER.to_string() })
    }

    /// Splits off the last `fraction` of sequences (at least one) for
    /// evaluation.
    pub fn split(&self, fraction: f64) -> Result<(Corpus, Corpus)> {
        let n = self.sequences.len();
        if n < 2 || !(0.0..1.0).contains(&fraction) {
            return Err(usage_err!("cannot hold out {fraction} of {n} sequences"));
        }
        let held = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        let part = |seqs: &[Vec<u32>], tag: &str| Corpus {
            sequences: seqs.to_vec(),
            source: format!("{}#{tag}", self.source),
            tokenizer: self.tokenizer.clone(),
        };
        Ok((part(&self.sequences[..n - held], "train"), part(&self.sequences[n - held..], "eval")))
    }
}

/// Reads and validates a JSON-lines corpus.
pub fn ingest_corpus(path: &Path, vocab_size: usize) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::parse(&text, &path.display().to_string(), vocab_size)
}

const DETS: [&str; 4] = ["the", "a", "every", "that"];
const ADJS: [&str; 8] = ["old", "small", "red", "quiet", "happy", "green", "brave", "tired"];
const NOUNS: [&str; 12] =
    ["cat", "dog", "fox", "bird", "king", "child", "robot", "farmer", "river", "garden", "storm", "lamp"];
const TRANSITIVE: [&str; 8] = ["sees", "finds", "likes", "follows", "paints", "carries", "watches", "builds"];
const INTRANSITIVE: [&str; 6] = ["sleeps", "sings", "waits", "runs", "smiles", "falls"];
const ADVERBS: [&str; 5] = ["slowly", "often", "never", "quietly", "again"];
const PREPOSITIONS: [&str; 4] = ["near", "under", "behind", "beside"];

/// Zipf-weighted word choice.
fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    let w: Vec<f64> = (0..words.len()).map(|r| 1.0 / (r + 1) as f64).collect();
    words[WeightedIndex::new(&w).expect("positive weights").sample(rng)]
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    out.push(pick(rng, &DETS));
    if rng.random_bool(0.4) {
        out.push(pick(rng, &ADJS));
    }
    out.push(pick(rng, &NOUNS));
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut w = Vec::new();
    match WeightedIndex::new([4.0, 3.0, 2.0, 1.0]).expect("positive weights").sample(rng) {
        0 => {
            noun_phrase(rng, &mut w);
            w.push(pick(rng, &TRANSITIVE));
            noun_phrase(rng, &mut w);
        }
        1 => {
            noun_phrase(rng, &mut w);
            w.push(pick(rng, &INTRANSITIVE));
            if rng.random_bool(0.5) {
                w.push(pick(rng, &ADVERBS));
            }
        }
        2 => {
            noun_phrase(rng, &mut w);
            w.push(pick(rng, &INTRANSITIVE));
            w.push(pick(rng, &PREPOSITIONS));
            noun_phrase(rng, &mut w);
        }
        _ => {
            w.push("when");
            noun_phrase(rng, &mut w);
            w.push(pick(rng, &INTRANSITIVE));
            w.push(",");
            noun_phrase(rng, &mut w);
            w.push(pick(rng, &TRANSITIVE));
            noun_phrase(rng, &mut w);
        }
    }
    let mut s = w.join(" ").replace(" ,", ",");
    s.push('.');
    s
}

/// Documents from a seeded probabilistic grammar, at least `min_tokens`
/// bytes in total. Each document holds four to eight sentences.
pub fn synthetic_documents(seed: u64, min_tokens: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut total = 0;
    while total < min_tokens {
        let n = rng.random_range(4..=8);
        let doc = (0..n).map(|_| sentence(&mut rng)).collect::<Vec<_>>().join(" ");
        total += doc.len();
        docs.push(doc);
    }
    docs
}

/// One `{"text": ..}` object per line.
pub fn corpus_jsonl(docs: &[String]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::json!({ "text": d }).to_string());
        out.push('\n');
    }
    out
}
