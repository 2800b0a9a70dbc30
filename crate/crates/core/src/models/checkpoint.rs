//! Checkpoint container.
//!
//! Layout: the 8-byte magic `TABDLCK1`, a little-endian `u64` header length,
//! a JSON header `{"spec": ModelSpec, "entries": [{"name", "shape"}, …]}`,
//! then each entry's values as little-endian `f64` in header order.
//! Entries are all parameters followed by BatchNorm running estimates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TABDLCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Write to a sibling temp file, then rename into place.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut payloads: Vec<&[f64]> = Vec::new();
    for p in model.params().iter() {
        entries.push(Entry { name: p.name.clone(), shape: p.tensor.shape().to_vec() });
        payloads.push(p.tensor.data());
    }
    for (name, data) in model.buffers() {
        entries.push(Entry { name, shape: vec![data.len()] });
        payloads.push(data);
    }
    let header = Header { spec: model.spec().clone(), entries };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(path, e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for data in payloads {
            for v in data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut model = Model::new(header.spec, 0)?;
    let expected = model.params().len() + model.buffers().len();
    if header.entries.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} entries, model structure needs {expected}",
            header.entries.len()
        )));
    }
    let mut buf = [0u8; 8];
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(io)?;
            values.push(f64::from_le_bytes(buf));
        }
        if let Some(p) = model.params_mut().by_name_mut(&e.name) {
            if p.tensor.shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{}`", e.name)));
            }
            p.tensor.data_mut().copy_from_slice(&values);
        } else if let Some(b) = model.buffer_mut(&e.name) {
            if b.len() != n {
                return Err(Error::Checkpoint(format!("length mismatch for buffer `{}`", e.name)));
            }
            *b = values;
        } else {
            return Err(Error::Checkpoint(format!("unknown entry `{}`", e.name)));
        }
    }
    Ok(model)
}
