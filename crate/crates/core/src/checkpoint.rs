//! Single-file checkpoint archive.
//!
//! Layout:
//!
//! ```text
//! b"MFCONCK1"                 8-byte magic
//! u64 little-endian           header length in bytes
//! header                      JSON: configs as TOML text + tensor index
//! data                        f64 little-endian, row-major, in index order
//! ```
//!
//! Tensor names are the parameter-store names (`encoder.*`, `head.*`,
//! `mfa.*`, `classifier.weight`); batch-norm running statistics are stored
//! with `kind = "buffer"`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"MFCONCK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model_config: String,
    /// Full run configuration the model was trained with, if known.
    pub run_config: Option<String>,
    /// Speaker id of each classifier row.
    pub classes: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub run_config: Option<String>,
    pub classes: Vec<String>,
}

pub fn to_bytes(model: &Model, run_config: Option<&str>, classes: &[String]) -> Vec<u8> {
    let entry = |kind, (name, a): (&str, &Array2<f64>)| TensorEntry { name: name.to_string(), kind, rows: a.nrows(), cols: a.ncols() };
    let tensors: Vec<TensorEntry> = model
        .params
        .iter()
        .map(|p| entry(TensorKind::Param, p))
        .chain(model.params.iter_buffers().map(|b| entry(TensorKind::Buffer, b)))
        .collect();
    let header = Header {
        model_config: toml::to_string(&model.cfg).expect("model config serializes"),
        run_config: run_config.map(str::to_string),
        classes: classes.to_vec(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * (model.params.num_scalars()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in model.params.iter().chain(model.params.iter_buffers()) {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let cfg: ModelConfig = toml::from_str(&header.model_config).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    cfg.validate()?;

    let mut store = ParamStore::new();
    let mut pos = 16 + hlen;
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", t.name)))?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let a = Array2::from_shape_vec((t.rows, t.cols), data).expect("length matches shape");
        match t.kind {
            TensorKind::Param => store.insert(t.name.clone(), a),
            TensorKind::Buffer => store.insert_buffer(t.name.clone(), a),
        }
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }

    // The stored tensors must match what this configuration would build.
    let reference = Model::new(cfg.clone(), 0)?;
    let shapes = |s: &ParamStore| -> Vec<(String, (usize, usize))> {
        s.iter().chain(s.iter_buffers()).map(|(n, a)| (n.to_string(), a.dim())).collect()
    };
    if shapes(&reference.params) != shapes(&store) {
        return Err(bad("tensor set does not match the stored model configuration"));
    }
    Ok(Checkpoint { model: Model { cfg, params: store }, run_config: header.run_config, classes: header.classes })
}

/// Write atomically (temporary file, then rename).
pub fn save(path: &Path, model: &Model, run_config: Option<&str>, classes: &[String]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(model, run_config, classes))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
