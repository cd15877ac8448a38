//! Versioned binary checkpoint: `A2QC`, u32 version (LE), 32-byte config
//! hash, then a bincode payload of the model and quantizer table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, QuantTable};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"A2QC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub qt: Option<QuantTable>,
    #[serde(skip)]
    pub config_hash: [u8; 32],
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let payload = bincode::serialize(&(&ck.model, &ck.qt)).map_err(|e| Error::Serde(e.to_string()))?;
    let mut bytes = Vec::with_capacity(40 + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&ck.config_hash);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 40 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not an A2QC checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(&bytes[8..40]);
    let (model, qt): (ModelParams, Option<QuantTable>) =
        bincode::deserialize(&bytes[40..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(q) = &qt {
        q.check(&model, q.sites.iter().find_map(|s| match &s.params {
            super::SiteParams::PerNode(v) => Some(v.len()),
            _ => None,
        }).unwrap_or(0))?;
    }
    Ok(Checkpoint {
        model,
        qt,
        config_hash,
    })
}
