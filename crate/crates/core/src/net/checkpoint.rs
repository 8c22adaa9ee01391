//! Checkpoint file format: one line of UTF-8 JSON (architecture, tensor
//! table, training metadata), a newline, then the parameter blob as raw
//! little-endian f32 in buffer order.

use super::train::Branch;
use super::{ArchConfig, PilotNetMini};
use crate::dropout::DropoutSpec;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "gazedrop-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorInfo>,
    pub branch: Branch,
    pub dropout: DropoutSpec,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn from_net(
        net: &PilotNetMini,
        branch: Branch,
        dropout: DropoutSpec,
        seed: u64,
        epochs: usize,
    ) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.to_string(),
                version: CHECKPOINT_VERSION,
                arch: net.arch().clone(),
                tensors: net
                    .tensor_sizes()
                    .into_iter()
                    .map(|(name, len)| TensorInfo { name, len })
                    .collect(),
                branch,
                dropout,
                seed,
                epochs,
            },
            params: net.params().to_vec(),
        }
    }

    /// Instantiate the network these parameters belong to.
    pub fn to_net(&self) -> Result<PilotNetMini> {
        let mut net = PilotNetMini::zeroed(self.meta.arch.clone())?;
        net.set_params(&self.params)?;
        Ok(net)
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let declared: usize = cp.meta.tensors.iter().map(|t| t.len).sum();
    if declared != cp.params.len() {
        return Err(Error::Checkpoint(format!(
            "tensor table declares {} floats, blob holds {}",
            declared,
            cp.params.len()
        )));
    }
    let header = serde_json::to_string(&cp.meta)
        .map_err(|e| Error::Checkpoint(format!("header encoding failed: {e}")))?;
    let mut bytes = Vec::with_capacity(header.len() + 1 + cp.params.len() * 4);
    bytes.extend_from_slice(header.as_bytes());
    bytes.push(b'\n');
    for v in &cp.params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(header)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown format {:?}",
            meta.format
        )));
    }
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {})",
            meta.version, CHECKPOINT_VERSION
        )));
    }
    let declared: usize = meta.tensors.iter().map(|t| t.len).sum();
    let blob = &bytes[newline + 1..];
    if blob.len() != declared * 4 {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, header declares {} floats ({} bytes)",
            blob.len(),
            declared,
            declared * 4
        )));
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Checkpoint { meta, params })
}
