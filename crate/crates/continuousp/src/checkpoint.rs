//! Checkpoint files: model and training configuration, every parameter
//! tensor, optional optimizer state, and the rng cursor needed to resume at
//! an epoch boundary. JSON with shortest-round-trip floats, so every value
//! reloads bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::{AdamState, TrainConfig, TrainState};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// One tensor: shape (rows, cols for matrices; length for vectors) and
/// row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Where deterministic training stands: the master seed plus the epoch and
/// step counters that reconstruct every stream the trainer derives from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngCursor {
    pub master_seed: u64,
    pub next_epoch: usize,
    pub global_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamData {
    pub first: BTreeMap<String, TensorData>,
    pub second: BTreeMap<String, TensorData>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: BTreeMap<String, TensorData>,
    pub adam: Option<AdamData>,
    pub rng: RngCursor,
}

impl Checkpoint {
    /// Captures a training state. The cursor's master seed mirrors the
    /// train config's seed, which the trainer's epoch streams derive from.
    pub fn from_training(model: &ModelConfig, train: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            model: *model,
            train: train.clone(),
            params: params_to_map(&state.params),
            adam: Some(AdamData {
                first: params_to_map(&state.adam.first),
                second: params_to_map(&state.adam.second),
                step: state.adam.step,
            }),
            rng: RngCursor {
                master_seed: train.seed,
                next_epoch: state.next_epoch,
                global_step: state.global_step,
            },
        }
    }

    /// Rebuilds the training state, validating configs and tensor shapes.
    pub fn training_state(&self) -> Result<TrainState> {
        self.train.validate()?;
        let params = params_from_map(&self.model, &self.params)?;
        // A checkpoint without optimizer state restores to fresh moments.
        let adam = match &self.adam {
            Some(a) => AdamState {
                first: params_from_map(&self.model, &a.first)?,
                second: params_from_map(&self.model, &a.second)?,
                step: a.step,
            },
            None => AdamState::new(&params),
        };
        Ok(TrainState {
            params,
            adam,
            next_epoch: self.rng.next_epoch,
            global_step: self.rng.global_step,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let body = serde_json::to_string_pretty(ckpt).map_err(|e| Error::CorruptFile {
        path: path.as_ref().display().to_string(),
        msg: format!("cannot serialize: {e}"),
    })?;
    write_atomic(path.as_ref(), body.as_bytes())
}

/// Loads and fully validates a checkpoint: version first, then strict field
/// parsing, then tensor shapes against the model config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let corrupt = |msg: String| Error::CorruptFile {
        path: path.display().to_string(),
        msg,
    };
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("format_version field missing".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch(version as u32));
    }
    let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    ckpt.training_state()?;
    Ok(ckpt)
}

fn matrix_tensor(m: &DMatrix<f64>) -> TensorData {
    let mut values = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            values.push(m[(r, c)]);
        }
    }
    TensorData {
        shape: vec![m.nrows(), m.ncols()],
        values,
    }
}

fn vector_tensor(v: &DVector<f64>) -> TensorData {
    TensorData {
        shape: vec![v.len()],
        values: v.as_slice().to_vec(),
    }
}

/// Tensor map in `tensor_names` order (the map itself sorts by name).
pub fn params_to_map(params: &ModelParams) -> BTreeMap<String, TensorData> {
    let mut map = BTreeMap::new();
    map.insert("embedding".to_string(), matrix_tensor(&params.embedding));
    for (i, layer) in params.convs.iter().enumerate() {
        for (half, m) in [("gate", &layer.gate), ("core", &layer.core)] {
            map.insert(format!("conv{i}.{half}.a"), matrix_tensor(&m.a));
            map.insert(format!("conv{i}.{half}.b"), matrix_tensor(&m.b));
            map.insert(format!("conv{i}.{half}.c"), matrix_tensor(&m.c));
            map.insert(format!("conv{i}.{half}.bias"), vector_tensor(&m.bias));
        }
    }
    for (i, layer) in params.mlp.iter().enumerate() {
        map.insert(format!("mlp{i}.w"), matrix_tensor(&layer.w));
        map.insert(format!("mlp{i}.b"), vector_tensor(&layer.b));
    }
    map
}

/// Rebuilds parameters for `cfg` from a tensor map. Every tensor must be
/// present with its exact shape, and no extra names are allowed.
pub fn params_from_map(
    cfg: &ModelConfig,
    map: &BTreeMap<String, TensorData>,
) -> Result<ModelParams> {
    let mut params = ModelParams::init(cfg, 0)?;
    let names = params.tensor_names();
    for key in map.keys() {
        if !names.contains(key) {
            return Err(Error::ShapeMismatch {
                name: key.clone(),
                expected: "no such tensor".into(),
                found: format!("shape {:?}", map[key].shape),
            });
        }
    }

    let take_matrix = |name: &str, m: &mut DMatrix<f64>| -> Result<()> {
        let want = vec![m.nrows(), m.ncols()];
        let t = map.get(name).ok_or_else(|| Error::ShapeMismatch {
            name: name.to_string(),
            expected: format!("{want:?}"),
            found: "missing".into(),
        })?;
        if t.shape != want || t.values.len() != m.len() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: format!("{want:?}"),
                found: format!("{:?} with {} values", t.shape, t.values.len()),
            });
        }
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                m[(r, c)] = t.values[r * m.ncols() + c];
            }
        }
        Ok(())
    };
    let take_vector = |name: &str, v: &mut DVector<f64>| -> Result<()> {
        let want = vec![v.len()];
        let t = map.get(name).ok_or_else(|| Error::ShapeMismatch {
            name: name.to_string(),
            expected: format!("{want:?}"),
            found: "missing".into(),
        })?;
        if t.shape != want || t.values.len() != v.len() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: format!("{want:?}"),
                found: format!("{:?} with {} values", t.shape, t.values.len()),
            });
        }
        v.as_mut_slice().copy_from_slice(&t.values);
        Ok(())
    };

    take_matrix("embedding", &mut params.embedding)?;
    for (i, layer) in params.convs.iter_mut().enumerate() {
        for (half, m) in [("gate", &mut layer.gate), ("core", &mut layer.core)] {
            take_matrix(&format!("conv{i}.{half}.a"), &mut m.a)?;
            take_matrix(&format!("conv{i}.{half}.b"), &mut m.b)?;
            take_matrix(&format!("conv{i}.{half}.c"), &mut m.c)?;
            take_vector(&format!("conv{i}.{half}.bias"), &mut m.bias)?;
        }
    }
    for (i, layer) in params.mlp.iter_mut().enumerate() {
        take_matrix(&format!("mlp{i}.w"), &mut layer.w)?;
        take_vector(&format!("mlp{i}.b"), &mut layer.b)?;
    }
    Ok(params)
}
