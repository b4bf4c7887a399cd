//! JSON model checkpoints.
//!
//! A checkpoint stores the step model's hyperparameters, its slot capacity,
//! and every named parameter array with an explicit shape header. Floats
//! ride through JSON's shortest-round-trip formatting, so save/load is
//! bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{atomic_write, IoError};
use crate::cvae::{CvaeHyper, CvaeModel};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredArray {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    hyper: CvaeHyper,
    n_slots: usize,
    params: BTreeMap<String, StoredArray>,
}

/// Render a model checkpoint as JSON text.
pub fn checkpoint_string(model: &CvaeModel) -> Result<String, IoError> {
    let mut params = BTreeMap::new();
    for (name, array) in model.params().names().iter().zip(model.params().arrays()) {
        if array.iter().any(|v| !v.is_finite()) {
            return Err(IoError::BadConfig(format!(
                "parameter {name:?} holds a non-finite value; refusing to checkpoint"
            )));
        }
        params.insert(
            name.clone(),
            StoredArray {
                shape: [array.nrows(), array.ncols()],
                data: array.iter().copied().collect(),
            },
        );
    }
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        hyper: model.hyper().clone(),
        n_slots: model.n_slots(),
        params,
    };
    serde_json::to_string_pretty(&checkpoint)
        .map_err(|e| IoError::BadConfig(format!("checkpoint serialization: {e}")))
}

/// Write a model checkpoint to disk atomically.
pub fn save_model(model: &CvaeModel, path: &Path) -> Result<(), IoError> {
    let text = checkpoint_string(model)?;
    atomic_write(path, text.as_bytes())
}

/// Rebuild a model from checkpoint JSON text.
pub fn model_from_checkpoint_str(text: &str, path: &Path) -> Result<CvaeModel, IoError> {
    let checkpoint: Checkpoint = serde_json::from_str(text)
        .map_err(|e| IoError::parse(path, e.line(), e.to_string()))?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(IoError::content(
            path,
            format!(
                "checkpoint version {} is not the supported {CHECKPOINT_VERSION}",
                checkpoint.version
            ),
        ));
    }
    let mut model = CvaeModel::new(&checkpoint.hyper, checkpoint.n_slots, 0)?;
    let expected: Vec<String> = model.params().names().to_vec();
    for name in &expected {
        if !checkpoint.params.contains_key(name) {
            return Err(IoError::content(
                path,
                format!("checkpoint is missing parameter {name:?}"),
            ));
        }
    }
    if checkpoint.params.len() != expected.len() {
        let stray = checkpoint
            .params
            .keys()
            .find(|k| !expected.contains(k))
            .cloned()
            .unwrap_or_default();
        return Err(IoError::content(
            path,
            format!("checkpoint holds unknown parameter {stray:?}"),
        ));
    }
    for name in &expected {
        let stored = &checkpoint.params[name];
        let [rows, cols] = stored.shape;
        if stored.data.len() != rows * cols {
            return Err(IoError::content(
                path,
                format!(
                    "parameter {name:?} declares shape {rows}x{cols} but carries {} values",
                    stored.data.len()
                ),
            ));
        }
        let current = model.params().get(name).expect("name from model listing");
        if current.dim() != (rows, cols) {
            return Err(IoError::content(
                path,
                format!(
                    "parameter {name:?} has shape {rows}x{cols}, model expects {}x{}",
                    current.nrows(),
                    current.ncols()
                ),
            ));
        }
        let array = Array2::from_shape_vec((rows, cols), stored.data.clone())
            .expect("length checked above");
        model.params_mut().set(name, array);
    }
    Ok(model)
}

/// Read a model checkpoint from disk.
pub fn load_model(path: &Path) -> Result<CvaeModel, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    model_from_checkpoint_str(&text, path)
}
