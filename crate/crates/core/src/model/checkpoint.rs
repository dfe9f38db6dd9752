//! Checkpoint files.
//!
//! Layout: magic `MCKP`, version byte, little-endian `u32` header length, a
//! JSON header holding the config, dtype and a manifest of
//! `(name, offset, shape)` entries, then one `MTSR1` record per parameter.
//! Offsets are relative to the first byte after the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{build_model_with_dtype, Model};
use super::MarformerConfig;
use crate::error::{Error, Result};
use crate::tensor::io::{encoded_len, read_tensor, write_tensor};
use crate::tensor::DType;

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: MarformerConfig,
    dtype: DType,
    tensors: Vec<ManifestEntry>,
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(model.num_tensors());
    for (name, t) in model.params() {
        tensors.push(ManifestEntry { name: name.to_string(), offset, shape: t.shape().to_vec() });
        offset += encoded_len(t) as u64;
    }
    let header = serde_json::to_vec(&Header { config: model.config().clone(), dtype: model.dtype(), tensors })?;
    let header_len =
        u32::try_from(header.len()).map_err(|_| Error::Format("checkpoint header exceeds 4 GiB".into()))?;

    let mut buf = Vec::with_capacity(9 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in model.params() {
        write_tensor(&mut buf, t)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Version { found: bytes[4], expected: VERSION });
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let end = 9 + len;
    if bytes.len() < end {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[9..end])?;
    Ok((header, end))
}

/// Reads only the config and tensor manifest of a checkpoint.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<(MarformerConfig, Vec<ManifestEntry>)> {
    let bytes = fs::read(path)?;
    let (h, _) = parse_header(&bytes)?;
    Ok((h.config, h.tensors))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path)?;
    let (header, data_start) = parse_header(&bytes)?;
    let mut model = build_model_with_dtype(&header.config, 0, header.dtype)?;

    let expected: Vec<&str> = model.params().map(|(n, _)| n).collect();
    let stored: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    if expected != stored {
        let missing: Vec<_> = expected.iter().filter(|n| !stored.contains(n)).take(3).collect();
        let extra: Vec<_> = stored.iter().filter(|n| !expected.contains(n)).take(3).collect();
        return Err(Error::CheckpointMismatch(format!(
            "parameter names differ from config (missing {missing:?}, unexpected {extra:?})"
        )));
    }

    let data = &bytes[data_start..];
    let mut values = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let off = usize::try_from(e.offset).ok().filter(|&o| o <= data.len());
        let Some(off) = off else {
            return Err(Error::Format(format!("{}: offset {} beyond end of file", e.name, e.offset)));
        };
        let t = read_tensor(&mut &data[off..])?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("{}: record shape {:?} vs manifest {:?}", e.name, t.shape(), e.shape)));
        }
        values.push(t);
    }
    model.set_params(values)?;
    Ok(model)
}

/// Loads a checkpoint and insists that its embedded config equals `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &MarformerConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.config() != expected {
        return Err(Error::CheckpointMismatch(format!(
            "embedded config {:?} differs from requested {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}
