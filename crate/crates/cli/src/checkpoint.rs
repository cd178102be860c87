//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PTQCKPT\0"
//! version  u32
//! mlen     u64      manifest length in bytes
//! manifest mlen bytes of JSON (see `Manifest`)
//! payload  f32 values, each tensor at its manifest offset
//! ```
//!
//! Tensor entries are named `param/<name>`, and when optimizer state is
//! stored, `adam_m/<name>` and `adam_v/<name>`.

use std::collections::HashMap;
use std::path::Path;

use ptq_core::model::parameter_layout;
use ptq_core::train::{OptimizerState, TrainConfig};
use ptq_core::{ModelConfig, Parameters, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

pub const MAGIC: &[u8; 8] = b"PTQCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub run_id: String,
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Step count of the stored optimizer state, if any.
    pub optimizer_step: Option<u64>,
    pub diverged_at: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub diverged_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Parameters,
    pub optimizer: Option<OptimizerState>,
}

fn groups<'a>(params: &'a Parameters, state: Option<&'a OptimizerState>) -> Vec<(&'static str, &'a Parameters)> {
    let mut g = vec![("param", params)];
    if let Some(s) = state {
        g.push(("adam_m", &s.m));
        g.push(("adam_v", &s.v));
    }
    g
}

pub fn encode_checkpoint(params: &Parameters, state: Option<&OptimizerState>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    params.check_matches(&meta.model)?;
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (prefix, p) in groups(params, state) {
        if prefix != "param" {
            p.check_matches(&meta.model)?;
        }
        for (name, t) in p.named_tensors() {
            tensors.push(TensorEntry {
                name: format!("{prefix}/{name}"),
                shape: [t.rows(), t.cols()],
                offset: payload.len() as u64,
            });
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
    }
    let manifest = Manifest {
        version: VERSION,
        run_id: meta.run_id.clone(),
        step: meta.step,
        model: meta.model.clone(),
        train: meta.train.clone(),
        optimizer_step: state.map(|s| s.step),
        diverged_at: meta.diverged_at,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Format(msg.into()))
}

/// Parse the header and manifest, returning the manifest and the payload.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return format_err(format!("file is {} bytes, shorter than the header", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return format_err("bad magic bytes");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(LabError::Version { found: version, expected: VERSION });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = HEADER_LEN as u64 + mlen;
    if end > bytes.len() as u64 {
        return format_err("manifest extends past end of file");
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..end as usize])
        .map_err(|e| LabError::Format(format!("unreadable manifest: {e}")))?;
    if manifest.version != version {
        return format_err(format!("manifest version {} disagrees with header {version}", manifest.version));
    }
    Ok((manifest, &bytes[end as usize..]))
}

fn read_group(
    prefix: &str,
    cfg: &ModelConfig,
    entries: &HashMap<&str, &TensorEntry>,
    payload: &[u8],
) -> Result<Parameters> {
    let mut p = Parameters::zeros(cfg);
    for ((name, _), t) in parameter_layout(cfg).into_iter().zip(p.tensors_mut()) {
        let full = format!("{prefix}/{name}");
        let Some(e) = entries.get(full.as_str()) else {
            return format_err(format!("manifest is missing tensor {full}"));
        };
        if e.shape != [t.rows(), t.cols()] {
            return format_err(format!("tensor {full} has shape {:?}, model implies {:?}", e.shape, t.shape()));
        }
        let len = (t.len() * 4) as u64;
        let start = e.offset;
        if start.checked_add(len).is_none_or(|end| end > payload.len() as u64) {
            return format_err(format!("tensor {full} extends past end of payload"));
        }
        let raw = &payload[start as usize..(start + len) as usize];
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        *t = Tensor::from_vec(e.shape[0], e.shape[1], values)?;
    }
    Ok(p)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (m, payload) = decode_manifest(bytes)?;
    m.model.validate()?;
    let mut entries = HashMap::new();
    for e in &m.tensors {
        if entries.insert(e.name.as_str(), e).is_some() {
            return format_err(format!("tensor {} listed twice", e.name));
        }
    }
    let mut prefixes = vec!["param"];
    if m.optimizer_step.is_some() {
        prefixes.extend(["adam_m", "adam_v"]);
    }
    let layout = parameter_layout(&m.model);
    let known: std::collections::HashSet<String> =
        prefixes.iter().flat_map(|p| layout.iter().map(move |(n, _)| format!("{p}/{n}"))).collect();
    if let Some(extra) = m.tensors.iter().find(|e| !known.contains(&e.name)) {
        return format_err(format!("unexpected tensor {}", extra.name));
    }
    let params = read_group("param", &m.model, &entries, payload)?;
    let optimizer = match m.optimizer_step {
        Some(step) => Some(OptimizerState {
            m: read_group("adam_m", &m.model, &entries, payload)?,
            v: read_group("adam_v", &m.model, &entries, payload)?,
            step,
        }),
        None => None,
    };
    let used: u64 = m.tensors.iter().map(|e| (e.shape[0] * e.shape[1] * 4) as u64).sum();
    if used != payload.len() as u64 {
        return format_err(format!("payload is {} bytes, manifest describes {used}", payload.len()));
    }
    let meta = CheckpointMeta { run_id: m.run_id, step: m.step, model: m.model, train: m.train, diverged_at: m.diverged_at };
    Ok(Checkpoint { meta, params, optimizer })
}

pub fn save_checkpoint(
    params: &Parameters,
    state: Option<&OptimizerState>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let bytes = encode_checkpoint(params, state, meta)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}
