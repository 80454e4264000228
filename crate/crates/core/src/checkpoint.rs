//! Checkpoint directories: `manifest.json` describing every tensor plus
//! `payload.bin` holding their little-endian values back to back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::rng::RngState;
use crate::tensor::Scalar;

pub const FORMAT_VERSION: &str = "nalab-ckpt-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format {found:?} (expected {FORMAT_VERSION:?})")]
    Version { found: String },
    #[error("payload is {actual} bytes but the manifest describes {expected}")]
    Truncated { expected: u64, actual: u64 },
    #[error("tensor {name}: {detail}")]
    Layout { name: String, detail: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: String,
    pub config: AdamConfig,
    pub t: u64,
    /// Prefixes of the moment tensors in the tensor table.
    pub first_moment_prefix: String,
    pub second_moment_prefix: String,
}

/// Batch-order position: the RNG state at the start of the current epoch
/// and how many examples of that epoch were consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatcherState {
    pub epoch_rng: RngState,
    pub epoch: u64,
    pub cursor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStates {
    pub dropout: RngState,
    pub masking: RngState,
    pub batches: BatcherState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub init_seed: u64,
    pub optimizer: OptimizerMeta,
    pub rng: RngStates,
    pub best_eval_loss: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// A manifest and the decoded tensor values, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar = f32> {
    pub manifest: Manifest,
    pub values: Vec<Vec<S>>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl<S: Scalar> Checkpoint<S> {
    /// Header fields plus named tensors; offsets are assigned here.
    pub fn assemble(mut manifest: Manifest, tensors: Vec<(String, Vec<usize>, Vec<S>)>) -> Self {
        let mut offset = 0u64;
        manifest.tensors.clear();
        let mut values = Vec::with_capacity(tensors.len());
        for (name, shape, data) in tensors {
            let length = (data.len() * S::BYTES) as u64;
            manifest.tensors.push(TensorEntry {
                name,
                shape,
                dtype: S::DTYPE.to_string(),
                offset,
                length,
            });
            offset += length;
            values.push(data);
        }
        Self { manifest, values }
    }

    pub fn get(&self, name: &str) -> Option<&[S]> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| self.values[i].as_slice())
    }

    /// Write to `dir` via a sibling temporary directory, so an interrupted
    /// save never leaves a half-written checkpoint under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let mut tmp = dir.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io(&tmp))?;
        let mut payload = Vec::with_capacity(self.values.iter().map(|v| v.len() * S::BYTES).sum());
        for v in &self.values {
            for &x in v {
                x.write_le(&mut payload);
            }
        }
        let ppath = tmp.join(PAYLOAD_FILE);
        fs::write(&ppath, &payload).map_err(io(&ppath))?;
        let mpath = tmp.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&mpath, json + "\n").map_err(io(&mpath))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(io(dir))?;
        }
        fs::rename(&tmp, dir).map_err(io(dir))
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(io(&mpath))?;
        let format: serde_json::Value = serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest {
            path: mpath.clone(),
            source,
        })?;
        let found = format.get("format").and_then(|f| f.as_str()).unwrap_or("").to_string();
        if found != FORMAT_VERSION {
            return Err(CheckpointError::Version { found });
        }
        let manifest: Manifest = serde_json::from_value(format).map_err(|source| CheckpointError::Manifest {
            path: mpath.clone(),
            source,
        })?;
        let ppath = dir.join(PAYLOAD_FILE);
        let payload = fs::read(&ppath).map_err(io(&ppath))?;

        let mut expected = 0u64;
        for e in &manifest.tensors {
            let layout = |detail: String| CheckpointError::Layout {
                name: e.name.clone(),
                detail,
            };
            if e.dtype != S::DTYPE {
                return Err(layout(format!("dtype {} but {} expected", e.dtype, S::DTYPE)));
            }
            if e.offset != expected {
                return Err(layout(format!("offset {} but {expected} expected", e.offset)));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != (numel * S::BYTES) as u64 {
                return Err(layout(format!("length {} does not match shape {:?}", e.length, e.shape)));
            }
            expected += e.length;
        }
        if expected != payload.len() as u64 {
            return Err(CheckpointError::Truncated {
                expected,
                actual: payload.len() as u64,
            });
        }
        let values = manifest
            .tensors
            .iter()
            .map(|e| {
                payload[e.offset as usize..(e.offset + e.length) as usize]
                    .chunks_exact(S::BYTES)
                    .map(S::read_le)
                    .collect()
            })
            .collect();
        Ok(Self { manifest, values })
    }
}
