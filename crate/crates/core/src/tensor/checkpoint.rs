//! Versioned JSON parameter checkpoints: `{format, version, params: {name: {shape, values}}}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TabiiError};
use crate::tensor::{Matrix, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "tabii-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: BTreeMap<String, Entry>,
}

pub fn to_json(store: &ParamStore) -> Result<String> {
    let params = store
        .iter()
        .map(|(_, p)| {
            let (r, c) = p.value.shape();
            (
                p.name.clone(),
                Entry {
                    shape: [r, c],
                    values: p.value.data().to_vec(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params,
    };
    Ok(serde_json::to_string(&file)?)
}

/// Overwrite every parameter in `store` from the checkpoint text. Every store
/// parameter must be present with a matching shape.
pub fn load_json_into(text: &str, store: &mut ParamStore, origin: &Path) -> Result<()> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| TabiiError::Format {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(TabiiError::Format {
            path: origin.to_path_buf(),
            message: format!("unsupported checkpoint {} v{}", file.format, file.version),
        });
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let entry = file.params.get(&name).ok_or_else(|| TabiiError::Format {
            path: origin.to_path_buf(),
            message: format!("missing parameter `{name}`"),
        })?;
        let m = Matrix::from_vec(entry.shape[0], entry.shape[1], entry.values.clone())?;
        if m.shape() != store.value(id).shape() {
            return Err(TabiiError::Format {
                path: origin.to_path_buf(),
                message: format!("shape mismatch for `{name}`"),
            });
        }
        *store.value_mut(id) = m;
    }
    Ok(())
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, to_json(store)?).map_err(|e| TabiiError::io(path, e))
}

pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| TabiiError::io(path, e))?;
    load_json_into(&text, store, path)
}
