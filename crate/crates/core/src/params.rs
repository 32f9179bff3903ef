//! Parameter fixture directories: one tensor dump per weight plus a JSON
//! manifest naming them.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<group>.<tensor>.bin
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{read_tensor, write_tensor, KernelError, Tensor};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

/// Named tensors of one network plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl ParamGroup {
    pub fn get(&self, name: &str) -> Result<&Tensor, KernelError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| KernelError::Dump(format!("missing tensor {name:?}")))
    }

    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T, KernelError> {
        serde_json::from_value(self.config.clone()).map_err(|e| KernelError::Dump(format!("config: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GroupRecord {
    config: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    format: u32,
    groups: BTreeMap<String, GroupRecord>,
}

fn io(path: &Path, e: impl std::fmt::Display) -> KernelError {
    KernelError::Dump(format!("{}: {e}", path.display()))
}

pub fn save_params(dir: &Path, groups: &BTreeMap<String, ParamGroup>) -> Result<(), KernelError> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut manifest = ManifestFile {
        format: FORMAT,
        groups: BTreeMap::new(),
    };
    for (gname, group) in groups {
        let mut records = Vec::new();
        for (name, t) in &group.tensors {
            let file = format!("{gname}.{name}.bin");
            write_tensor(t, &dir.join(&file))?;
            records.push(TensorRecord {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        manifest.groups.insert(
            gname.clone(),
            GroupRecord {
                config: group.config.clone(),
                tensors: records,
            },
        );
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| io(&path, e))
}

/// Dumps are stored with four extents; each tensor gets back the shape recorded in the manifest.
pub fn load_params(dir: &Path) -> Result<BTreeMap<String, ParamGroup>, KernelError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let manifest: ManifestFile = serde_json::from_str(&text).map_err(|e| io(&path, e))?;
    if manifest.format != FORMAT {
        return Err(io(&path, format!("unsupported format {}", manifest.format)));
    }
    let mut out = BTreeMap::new();
    for (gname, g) in manifest.groups {
        let mut tensors = Vec::with_capacity(g.tensors.len());
        for r in g.tensors {
            let t = read_tensor(&dir.join(&r.file))?.reshape(&r.shape)?;
            tensors.push((r.name, t));
        }
        out.insert(gname, ParamGroup { config: g.config, tensors });
    }
    Ok(out)
}
