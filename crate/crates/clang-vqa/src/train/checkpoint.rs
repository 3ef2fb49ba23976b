//! Versioned binary checkpoints.
//!
//! Layout: magic "CLGC", format version u32, length-prefixed JSON metadata
//! (config echo, model dims, optimizer constants), u32 parameter count, a
//! table of (name, rows, cols) entries, then every parameter's values as
//! little-endian f32 in table order. Values train as f64 but are stored
//! narrowed; loading widens them back, so save-load-save is byte-stable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelDims, ParamValues};

use super::optim::OptimizerInfo;
use super::TrainConfig;

pub const MAGIC: [u8; 4] = *b"CLGC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub optimizer: OptimizerInfo,
}

pub fn encode(meta: &CheckpointMeta, values: &ParamValues) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for (name, rows, cols, data) in values {
        if rows * cols != data.len() {
            return Err(Error::Checkpoint(format!(
                "{name} holds {} values for a {rows}x{cols} shape",
                data.len()
            )));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(*rows as u32).to_le_bytes());
        out.extend_from_slice(&(*cols as u32).to_le_bytes());
    }
    for (_, _, _, data) in values {
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| Error::Corrupt {
            offset: self.pos as u64,
            detail: format!("{what} length overflows"),
        })?;
        if end > self.bytes.len() {
            return Err(Error::Corrupt {
                offset: self.bytes.len() as u64,
                detail: format!("checkpoint ends inside {what} at byte {}", self.pos),
            });
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointMeta, ParamValues)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "checkpoint magic {magic:02x?} is not {MAGIC:02x?}"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported, expected {VERSION}"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)?;

    let count = r.u32("parameter count")? as usize;
    let mut table = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::Format(format!("parameter {i} name is not UTF-8")))?
            .to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| {
            Error::Format(format!("parameter {name} shape {rows}x{cols} overflows"))
        })?;
        if len.checked_mul(4).map_or(true, |b| b > bytes.len()) {
            return Err(Error::Format(format!(
                "parameter {name} claims {len} values, more than the file holds"
            )));
        }
        table.push((name, rows, cols));
    }

    let mut values = Vec::with_capacity(table.len());
    for (name, rows, cols) in table {
        let raw = r.take(rows * cols * 4, "parameter values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        values.push((name, rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the parameter data",
            bytes.len() - r.pos
        )));
    }
    Ok((meta, values))
}

pub fn save(path: &Path, meta: &CheckpointMeta, values: &ParamValues) -> Result<()> {
    fs::write(path, encode(meta, values)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ParamValues)> {
    decode(&fs::read(path)?)
}
