//! Binary checkpoint container shared by target models and draft heads.
//!
//! Layout: the magic bytes `EGLC`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then every tensor
//! as raw little-endian `f32` values at the byte offsets the header lists
//! (relative to the start of the payload).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::draft_head::{DraftHead, DraftHeadWeights, DraftInputMode};
use crate::error::{Error, Result};
use crate::model::{BlockWeights, ModelConfig, TransformerWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EGLC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Target,
    DraftHead,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    /// Target config (for heads, the target the head was trained against).
    pub config: ModelConfig,
    pub draft_input_mode: Option<DraftInputMode>,
    /// Fingerprint of the target a head was trained against.
    pub target_fingerprint: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Serializes a header and named tensors.
pub fn encode(
    kind: CheckpointKind,
    config: &ModelConfig,
    mode: Option<DraftInputMode>,
    target_fingerprint: Option<String>,
    tensors: &[(String, &Tensor)],
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += 4 * t.numel() as u64;
    }
    let header = CheckpointHeader {
        kind,
        config: config.clone(),
        draft_input_mode: mode,
        target_fingerprint,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container into its header and tensors (in header order).
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(format_err("missing EGLC magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| format_err("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    let payload = &bytes[body..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut expected = 0u64;
    for e in &header.tensors {
        if e.offset != expected {
            return Err(format_err(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > payload.len() {
            return Err(format_err(format!("tensor {} runs past the payload", e.name)));
        }
        let data = payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
        expected = end as u64;
    }
    if expected as usize != payload.len() {
        return Err(format_err(format!("{} trailing payload bytes", payload.len() - expected as usize)));
    }
    Ok((header, tensors))
}

/// Writes `bytes` via a temporary sibling so a failed write leaves no
/// partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    res.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_names(header: &CheckpointHeader, expected: &[String]) -> Result<()> {
    let got: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(format_err(format!("unexpected tensor list {got:?}")));
    }
    Ok(())
}

pub fn encode_target(w: &TransformerWeights) -> Result<Vec<u8>> {
    encode(CheckpointKind::Target, &w.config, None, None, &w.named_tensors())
}

pub fn decode_target(bytes: &[u8]) -> Result<TransformerWeights> {
    let (header, tensors) = decode(bytes)?;
    if header.kind != CheckpointKind::Target {
        return Err(format_err("not a target checkpoint"));
    }
    let config = header.config.clone();
    config.validate()?;
    let mut names = vec!["embedding".to_string()];
    for i in 0..config.total_layers() {
        names.extend(crate::model::BLOCK_TENSORS.iter().map(|n| format!("layers.{i}.{n}")));
    }
    names.push("final_norm".into());
    names.push("lm_head".into());
    check_names(&header, &names)?;
    let mut it = tensors.into_iter();
    let embedding = it.next().expect("checked");
    let layers = (0..config.total_layers()).map(|_| BlockWeights::from_tensors(it.by_ref().take(9).collect())).collect();
    let final_norm = it.next().expect("checked");
    let lm_head = it.next().expect("checked");
    TransformerWeights::from_parts(config, embedding, layers, final_norm, lm_head)
}

pub fn save_target(path: &Path, w: &TransformerWeights) -> Result<()> {
    write_atomic(path, &encode_target(w)?)
}

pub fn load_target(path: &Path) -> Result<TransformerWeights> {
    decode_target(&read(path)?)
}

/// Encodes a head together with the config and fingerprint of `target`.
pub fn encode_draft_head(head: &DraftHead, target: &TransformerWeights) -> Result<Vec<u8>> {
    encode(
        CheckpointKind::DraftHead,
        &target.config,
        Some(head.mode()),
        Some(target.fingerprint()),
        &head.named_tensors(),
    )
}

/// Decodes a head for `target`. Fails unless the head was trained against
/// a target with the same fingerprint.
pub fn decode_draft_head(bytes: &[u8], target: &TransformerWeights) -> Result<DraftHead> {
    let (header, tensors) = decode(bytes)?;
    if header.kind != CheckpointKind::DraftHead {
        return Err(format_err("not a draft-head checkpoint"));
    }
    let mode = header.draft_input_mode.ok_or_else(|| format_err("draft-head checkpoint lacks draft_input_mode"))?;
    let fp = target.fingerprint();
    if header.target_fingerprint.as_deref() != Some(fp.as_str()) {
        return Err(Error::Validation(format!(
            "draft head was trained against target {:?}, loaded target is {fp}",
            header.target_fingerprint
        )));
    }
    let mut names = Vec::new();
    if mode.fused() {
        names.push("fc.weight".to_string());
        names.push("fc.bias".to_string());
    }
    names.extend(crate::model::BLOCK_TENSORS.iter().map(|n| format!("layer.{n}")));
    check_names(&header, &names)?;
    let mut it = tensors.into_iter();
    let fc = if mode.fused() { Some((it.next().expect("checked"), it.next().expect("checked"))) } else { None };
    let layer = BlockWeights::from_tensors(it.collect());
    DraftHead::from_weights(target, DraftHeadWeights { mode, fc, layer })
}

pub fn save_draft_head(path: &Path, head: &DraftHead, target: &TransformerWeights) -> Result<()> {
    write_atomic(path, &encode_draft_head(head, target)?)
}

pub fn load_draft_head(path: &Path, target: &TransformerWeights) -> Result<DraftHead> {
    decode_draft_head(&read(path)?, target)
}

/// Reads only the header of a checkpoint file.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(decode(&read(path)?)?.0)
}
