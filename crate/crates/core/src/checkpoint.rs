//! Model checkpoints: SWT1 files holding one array per parameter plus an architecture descriptor.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use synweather_autograd::{ParamSet, Tensor};

use crate::error::{Error, Result};
use crate::swt1::{NamedArray, Swt1};

pub const KIND_CHECKPOINT: &str = "checkpoint";

pub fn save_checkpoint<C: Serialize>(path: &Path, model: &str, architecture: &C, params: &ParamSet<f32>, extra: Map<String, Value>) -> Result<()> {
    let arrays = params
        .iter()
        .map(|(_, name, t)| NamedArray::new(name, t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = extra;
    meta.insert("kind".into(), KIND_CHECKPOINT.into());
    meta.insert("model".into(), model.into());
    meta.insert("architecture".into(), serde_json::to_value(architecture)?);
    Swt1 { arrays, meta }.write(path)
}

/// Architecture, parameters and remaining metadata of a checkpoint for `model`.
pub fn load_checkpoint<C: DeserializeOwned>(path: &Path, model: &str) -> Result<(C, ParamSet<f32>, Map<String, Value>)> {
    let doc = Swt1::read(path)?;
    if doc.meta.get("kind").and_then(Value::as_str) != Some(KIND_CHECKPOINT) {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let found = doc.meta.get("model").and_then(Value::as_str).unwrap_or_default();
    if found != model {
        return Err(Error::Checkpoint(format!("{} holds a {found:?} model, expected {model:?}", path.display())));
    }
    let arch = serde_json::from_value(doc.meta.get("architecture").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Checkpoint(format!("architecture descriptor: {e}")))?;
    let mut params = ParamSet::new();
    for a in doc.arrays {
        params.insert(a.name, Tensor::from_vec(&a.shape, a.data));
    }
    Ok((arch, params, doc.meta))
}

/// Copy `loaded` into `target`, failing on any missing or mis-shaped parameter.
pub fn restore(target: &mut ParamSet<f32>, loaded: &ParamSet<f32>) -> Result<()> {
    let bad = target.load_from(loaded);
    if bad.is_empty() && loaded.len() == target.len() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("incompatible parameters: {}", bad.join(", "))))
    }
}
