//! Checkpoints: a directory of TSR tensors plus a JSON manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/params/<name>.tsr
//! <dir>/state/<slot>.tsr
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{valid_name, ParamStore};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: BTreeMap<String, Vec<usize>>,
    pub optimizer_state: BTreeMap<String, Vec<usize>>,
    pub step: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, params: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["params", "state"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = Manifest {
        tensors: BTreeMap::new(),
        optimizer_state: BTreeMap::new(),
        step: params.step_count(),
        meta,
    };
    for (name, t) in params.iter() {
        t.save(dir.join("params").join(format!("{name}.tsr")))?;
        manifest.tensors.insert(name.to_string(), t.shape().to_vec());
    }
    for (name, t) in params.slots() {
        t.save(dir.join("state").join(format!("{name}.tsr")))?;
        manifest.optimizer_state.insert(name.to_string(), t.shape().to_vec());
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ParamStore, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut params = ParamStore::new();
    let load = |sub: &str, name: &str, shape: &[usize]| -> Result<Tensor> {
        if !valid_name(name) {
            return Err(Error::Format {
                kind: "checkpoint",
                reason: format!("bad tensor name `{name}`"),
            });
        }
        let t = Tensor::load(dir.join(sub).join(format!("{name}.tsr")))?;
        if t.shape() != shape {
            return Err(Error::Format {
                kind: "checkpoint",
                reason: format!("`{name}` has shape {:?}, manifest says {shape:?}", t.shape()),
            });
        }
        Ok(t)
    };
    for (name, shape) in &manifest.tensors {
        params.insert(name.clone(), load("params", name, shape)?)?;
    }
    for (name, shape) in &manifest.optimizer_state {
        params.insert_slot(name.clone(), load("state", name, shape)?)?;
    }
    params.set_step_count(manifest.step);
    Ok((params, manifest))
}
