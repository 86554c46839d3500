use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::{ParamStore, TensorRecord};
use crate::error::{Error, Result};

/// On-disk model: `{model, config, params: {name: {shape, data}}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub model: String,
    pub config: C,
    pub params: BTreeMap<String, TensorRecord>,
}

pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    model: &str,
    config: &C,
    store: &ParamStore,
) -> Result<()> {
    let ckpt = Checkpoint {
        model: model.to_string(),
        config,
        params: store.to_record(),
    };
    let json = serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<C: DeserializeOwned>(path: &Path, model: &str) -> Result<Checkpoint<C>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint<C> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    if ckpt.model != model {
        return Err(Error::Validation(format!(
            "{} holds a `{}` checkpoint, expected `{model}`",
            path.display(),
            ckpt.model
        )));
    }
    Ok(ckpt)
}
