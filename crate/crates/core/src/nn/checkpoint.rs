//! Checkpoint format: a directory holding
//!
//! - `manifest.json` — ordered parameter/optimizer entries (name, shape,
//!   byte offset) plus the dtype tag,
//! - `params.bin` — little-endian f32 parameter payload,
//! - `optstate.bin` — little-endian f32 Adam moments (m then v per entry).
//!
//! Entries are written in name order, so save → load → save reproduces the
//! original files byte for byte.

use super::optim::{AdamSlot, AdamState};
use super::tensor::{ParamStore, Tensor};
use super::NnError;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTSTATE_FILE: &str = "optstate.bin";
const SCHEMA: &str = "mmrf-ckpt/1";
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Update count for this slot (bias correction).
    pub t: u64,
    /// Byte offset of the first-moment block in `optstate.bin`; the
    /// second-moment block follows immediately after it.
    pub offset: u64,
}

/// The parsed `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub dtype: String,
    pub params: Vec<ParamEntry>,
    pub opt: Vec<OptEntry>,
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn tensor_from_bytes(shape: &[usize], bytes: &[u8]) -> Tensor {
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Writes `store` and `opt` under `dir` (created if missing).
pub fn save_checkpoint(dir: &Path, store: &ParamStore, opt: &AdamState) -> Result<(), NnError> {
    fs::create_dir_all(dir)?;

    let mut params = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend(tensor_bytes(t));
    }

    let mut opt_entries = Vec::new();
    let mut opt_payload: Vec<u8> = Vec::new();
    for (name, slot) in opt.iter() {
        opt_entries.push(OptEntry {
            name: name.clone(),
            shape: slot.m.shape().to_vec(),
            t: slot.t,
            offset: opt_payload.len() as u64,
        });
        opt_payload.extend(tensor_bytes(&slot.m));
        opt_payload.extend(tensor_bytes(&slot.v));
    }

    let meta = CheckpointMeta {
        schema: SCHEMA.to_string(),
        dtype: DTYPE.to_string(),
        params,
        opt: opt_entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&meta)?)?;
    fs::write(dir.join(PARAMS_FILE), payload)?;
    fs::write(dir.join(OPTSTATE_FILE), opt_payload)?;
    Ok(())
}

/// Reads a checkpoint directory back into a store and optimizer state.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, AdamState), NnError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(NnError::Checkpoint(format!("missing {}", manifest_path.display())));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if meta.schema != SCHEMA {
        return Err(NnError::Checkpoint(format!(
            "unknown schema `{}` (expected `{SCHEMA}`)",
            meta.schema
        )));
    }
    if meta.dtype != DTYPE {
        return Err(NnError::Checkpoint(format!(
            "unknown dtype `{}` (expected `{DTYPE}`)",
            meta.dtype
        )));
    }

    let payload = fs::read(dir.join(PARAMS_FILE))?;
    let expected: usize =
        meta.params.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(NnError::Checkpoint(format!(
            "params.bin is {} bytes, manifest expects {expected}",
            payload.len()
        )));
    }
    let mut store = ParamStore::new();
    for e in &meta.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(NnError::Checkpoint(format!(
                "entry `{}` overruns params.bin ({} > {})",
                e.name,
                end,
                payload.len()
            )));
        }
        store.insert(&e.name, tensor_from_bytes(&e.shape, &payload[start..end]))?;
    }

    let opt_payload = fs::read(dir.join(OPTSTATE_FILE))?;
    let opt_expected: usize =
        meta.opt.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
    if opt_payload.len() != opt_expected {
        return Err(NnError::Checkpoint(format!(
            "optstate.bin is {} bytes, manifest expects {opt_expected}",
            opt_payload.len()
        )));
    }
    let mut opt = AdamState::new();
    for e in &meta.opt {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let mid = start + n * 4;
        let end = mid + n * 4;
        if end > opt_payload.len() {
            return Err(NnError::Checkpoint(format!(
                "opt entry `{}` overruns optstate.bin ({} > {})",
                e.name,
                end,
                opt_payload.len()
            )));
        }
        opt.insert_slot(
            e.name.clone(),
            AdamSlot {
                t: e.t,
                m: tensor_from_bytes(&e.shape, &opt_payload[start..mid]),
                v: tensor_from_bytes(&e.shape, &opt_payload[mid..end]),
            },
        );
    }
    Ok((store, opt))
}

/// Reads only the manifest (for listing without loading payloads).
pub fn read_manifest(dir: &Path) -> Result<CheckpointMeta, NnError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(NnError::Checkpoint(format!("missing {}", manifest_path.display())));
    }
    Ok(serde_json::from_slice(&fs::read(&manifest_path)?)?)
}
