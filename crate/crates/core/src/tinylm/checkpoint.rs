//! Versioned binary checkpoint container.
//!
//! Layout: the magic `TLM1`, a little-endian u64 header length, a JSON
//! header (format version, model config, provenance), then every
//! parameter array as little-endian f64 in the declared flattening order
//! of [`ParamSet`]. Optimizer moments are not stored; a loaded model
//! starts with fresh moments. Identical state produces identical bytes.

use super::{ModelConfig, ModelState, ParamSet};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TLM1";

/// Provenance recorded in the header so every artifact identifies the
/// run that produced it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    seed: u64,
    model: ModelConfig,
}

pub fn save_checkpoint(state: &ModelState, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = Header {
        version: 1,
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        model: state.config.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header_bytes.len() + 16 + 8 * state.params.flat_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    state.params.for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::BadCheckpoint(format!(
            "{}: missing TLM1 magic",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let body_start = 12 + header_len;
    if bytes.len() < body_start {
        return Err(Error::BadCheckpoint(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body_start])?;
    if header.version != 1 {
        return Err(Error::BadCheckpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut state = super::init_model(&header.model, crate::rng::RngStream::from_seed(0))?;
    let n = state.params.flat_len();
    if bytes.len() != body_start + 8 * n {
        return Err(Error::BadCheckpoint(format!(
            "{}: expected {} parameter bytes, found {}",
            path.display(),
            8 * n,
            bytes.len() - body_start
        )));
    }
    let flat: Vec<f64> = bytes[body_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    state.params.assign_flat(&flat)?;
    state.moments = None;
    Ok((
        state,
        CheckpointMeta {
            config_hash: header.config_hash,
            seed: header.seed,
        },
    ))
}

/// Make a fresh parameter container shaped like the given config, used
/// when assembling gradients or loading flat arrays.
#[allow(dead_code)]
pub(crate) fn zeros_for(config: &ModelConfig) -> Result<ParamSet> {
    let state = super::init_model(config, crate::rng::RngStream::from_seed(0))?;
    let mut p = state.params;
    p.for_each_mut(|x| *x = 0.0);
    Ok(p)
}
