//! On-disk parameter format: a directory holding `manifest.json` and one
//! little-endian `f64` file per named tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Hyper, ParamSet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub dtype: String,
    pub hyper: Hyper,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined state stored alongside (RNG counters, step, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_params<P: ParamSet>(dir: &Path, params: &P, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, t) in params.tensors() {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(t.data.len() * 8);
        for x in &t.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: P::KIND.to_string(),
        dtype: "f64".into(),
        hyper: *params.hyper(),
        tensors: entries,
        extra,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(m)
}

pub fn load_params<P: ParamSet>(dir: &Path) -> Result<(P, serde_json::Value)> {
    let m = read_manifest(dir)?;
    if m.kind != P::KIND {
        return Err(Error::Schema(format!(
            "checkpoint holds `{}`, expected `{}`",
            m.kind,
            P::KIND
        )));
    }
    if m.dtype != "f64" {
        return Err(Error::Schema(format!("unsupported dtype `{}`", m.dtype)));
    }
    let mut params = P::blank(m.hyper)?;
    let slots = params.tensors_mut();
    if slots.len() != m.tensors.len() {
        return Err(Error::Schema("tensor count mismatch".into()));
    }
    for ((name, t), entry) in slots.into_iter().zip(&m.tensors) {
        if entry.name != name || entry.shape != t.shape() {
            return Err(Error::Schema(format!(
                "tensor `{}` {:?} does not fit `{name}` {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != t.data.len() * 8 {
            return Err(Error::Schema(format!(
                "`{}` has {} bytes",
                entry.file,
                bytes.len()
            )));
        }
        for (x, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok((params, m.extra))
}
