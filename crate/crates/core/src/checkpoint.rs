//! Parameter checkpoints: a JSON manifest plus one `f64` blob per tensor for
//! values and each Adam moment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{self, Dtype};
use crate::error::{Error, Result};
use crate::params::{AdamState, Param, ParamStore};
use crate::tensor::Tensor;

/// Enough to rebuild the model before loading parameters into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub kind: String,
    pub variant: String,
    /// `(site name, expert count)`
    pub sites: Vec<(String, usize)>,
    pub config: serde_json::Value,
    pub global_step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    step: u64,
    value: String,
    m: String,
    v: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    dtype: Dtype,
    arch: ArchDescriptor,
    params: Vec<ParamEntry>,
}

const CHECKPOINT_FORMAT: &str = "plastinet-checkpoint-v1";

pub fn save_checkpoint(store: &ParamStore, arch: &ArchDescriptor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let i = id.index();
        let entry = ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
            step: p.state.step,
            value: format!("param_{i}_value.bin"),
            m: format!("param_{i}_m.bin"),
            v: format!("param_{i}_v.bin"),
        };
        blob::write_blob(&dir.join(&entry.value), p.value.data(), Dtype::F64)?;
        blob::write_blob(&dir.join(&entry.m), &p.state.m, Dtype::F64)?;
        blob::write_blob(&dir.join(&entry.v), &p.state.v, Dtype::F64)?;
        params.push(entry);
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: Dtype::F64,
        arch: arch.clone(),
        params,
    };
    blob::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ArchDescriptor, ParamStore)> {
    let mpath = dir.join("manifest.json");
    let m: CheckpointManifest = blob::read_json(&mpath)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Validation { file: mpath, msg: format!("unsupported format `{}`", m.format) });
    }
    if m.dtype == Dtype::U32 {
        return Err(Error::Validation { file: mpath, msg: "parameter dtype must be real".into() });
    }
    let mut store = ParamStore::new();
    for e in &m.params {
        let n: usize = e.shape.iter().product();
        let value = blob::read_blob(&dir.join(&e.value), n, m.dtype)?;
        let state = AdamState {
            m: blob::read_blob(&dir.join(&e.m), n, m.dtype)?,
            v: blob::read_blob(&dir.join(&e.v), n, m.dtype)?,
            step: e.step,
        };
        store.push_raw(Param {
            name: e.name.clone(),
            value: Tensor::new(e.shape.clone(), value)?,
            grad: None,
            frozen: e.frozen,
            state,
        })?;
    }
    Ok((m.arch, store))
}
