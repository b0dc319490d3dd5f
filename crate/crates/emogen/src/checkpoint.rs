//! Named-tensor checkpoint container.
//!
//! Layout: the magic `EMOGENCK`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then the payload of
//! little-endian `f32` values. Tensor offsets in the header count bytes from
//! the start of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use emogen_core::model::{Model, ModelConfig, ModelError, ParamSet, Variant};
use emogen_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"EMOGENCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub variant: Variant,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance such as the training step.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(model: &Model<f32>, meta: serde_json::Value) -> Result<Vec<u8>, CheckpointError> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += 4 * t.numel() as u64;
    }
    let header = Header { format_version: FORMAT_VERSION, variant: model.config.variant, config: model.config.clone(), tensors, meta };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// Parses only the header.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("header overruns file"))?;
    let header: Header = serde_json::from_slice(&bytes[20..end])?;
    if header.variant != header.config.variant {
        return Err(bad("variant tag disagrees with config"));
    }
    Ok((header, end))
}

pub fn decode(bytes: &[u8]) -> Result<(Model<f32>, serde_json::Value), CheckpointError> {
    let (header, start) = decode_header(bytes)?;
    let payload = &bytes[start..];
    let mut params = ParamSet::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let lo = usize::try_from(e.offset).map_err(|_| bad("offset too large"))?;
        let hi = lo.checked_add(4 * n).filter(|&h| h <= payload.len()).ok_or_else(|| bad(format!("tensor {} overruns payload", e.name)))?;
        let data = payload[lo..hi].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.insert(e.name.clone(), Tensor::new(&e.shape, data).map_err(ModelError::from)?);
    }
    Ok((Model::from_params(header.config, params)?, header.meta))
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial checkpoint.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn save(path: &Path, model: &Model<f32>, meta: serde_json::Value) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(model, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model<f32>, serde_json::Value), CheckpointError> {
    decode(&fs::read(path)?)
}
