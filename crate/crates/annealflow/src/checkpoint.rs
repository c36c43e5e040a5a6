//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `AFLOWCKP` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `n` (`u64`) |
//! | n | canonical TOML header: stage, flow config and layout |
//! | 8 | parameter count `p` (`u64`) |
//! | 8p | parameters as `f64`, arrays in declaration order |
//! | 4 | CRC-32 of everything above (`u32`) |

use std::path::Path;

use annealflow_core::flow::{FlowConfig, FlowLayout, FlowModel};
use annealflow_core::SeedRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::RunError;

pub const MAGIC: &[u8; 8] = b"AFLOWCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("checkpoint was saved from a different flow configuration")]
    ConfigMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: usize,
    flow: FlowConfig,
    layout: FlowLayout,
}

/// A loaded checkpoint: the model and the pipeline stage that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: usize,
    pub model: FlowModel,
}

pub fn encode(model: &FlowModel, stage: usize) -> Vec<u8> {
    let header = Header { stage, flow: model.config().clone(), layout: model.layout().clone() };
    let text = toml::to_string(&header).expect("checkpoint header serializes");
    let params = model.params().flatten();
    let mut out = Vec::with_capacity(32 + text.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if buf.len() < n {
        return Err(CheckpointError::Malformed("unexpected end of data".into()));
    }
    let (a, b) = buf.split_at(n);
    *buf = b;
    Ok(a)
}

fn u64_at(buf: &mut &[u8]) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().unwrap()))
}

/// Decodes a checkpoint. With `expected`, the stored flow configuration
/// must match it exactly.
pub fn decode(bytes: &[u8], expected: Option<&FlowConfig>) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::Checksum);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(CheckpointError::Checksum);
    }
    let mut rest = &body[12..];
    let n = u64_at(&mut rest)? as usize;
    let text = std::str::from_utf8(take(&mut rest, n)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if let Some(cfg) = expected {
        if *cfg != header.flow {
            return Err(CheckpointError::ConfigMismatch);
        }
    }
    let count = u64_at(&mut rest)? as usize;
    let raw = take(&mut rest, count.checked_mul(8).ok_or(CheckpointError::Checksum)?)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    // the generator only fills weights that are overwritten right away
    let mut rng = SeedRng::seed_from_u64(0);
    let mut model = FlowModel::build(header.flow, header.layout, &mut rng)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if model.params().scalar_count() != params.len() {
        return Err(CheckpointError::Malformed(format!(
            "parameter count {} does not match the architecture ({})",
            params.len(),
            model.params().scalar_count()
        )));
    }
    model.params_mut().assign_flat(&params);
    Ok(Checkpoint { stage: header.stage, model })
}

pub fn save_checkpoint(model: &FlowModel, stage: usize, path: &Path) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(RunError::io(dir))?;
    }
    // write then rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, encode(model, stage)).map_err(RunError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(RunError::io(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&FlowConfig>) -> Result<Checkpoint, RunError> {
    let bytes = std::fs::read(path).map_err(RunError::io(path))?;
    Ok(decode(&bytes, expected)?)
}
