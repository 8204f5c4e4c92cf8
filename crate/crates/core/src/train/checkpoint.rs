//! Binary checkpoint format, little-endian:
//!
//! ```text
//! "BCCM" | u32 version | u32 len, JSON config | u32 count |
//!   count × (u16 len, name | u8 rank = 4 | 4 × u64 dims | f32 data)
//! ```
//!
//! Model parameters come first in model order, then `adam.m.<name>` and
//! `adam.v.<name>` for each trainable parameter, then the `adam.t` scalar.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adam::AdamState;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"BCCM";
pub const VERSION: u32 = 1;
const RANK: u8 = 4;
/// Exact integer range of an f32, the storage type of `adam.t`.
const MAX_STEP: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic {0:02x?}, not a checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("inconsistent tensor table: {0}")]
    Inconsistent(String),
    #[error("invalid config blob: {0}")]
    Config(String),
    #[error("I/O error on {}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct OptimizerBlob {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct ConfigBlob {
    model: ModelConfig,
    optimizer: OptimizerBlob,
}

/// Raw named tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Container-level view of a checkpoint, before model reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub config_json: String,
    pub tensors: Vec<NamedTensor>,
}

fn trainable_names(model: &Model) -> impl Iterator<Item = &str> {
    model.params().iter().filter(|p| p.trainable).map(|p| p.name.as_str())
}

pub fn encode_checkpoint(model: &Model, state: &AdamState<f32>) -> Result<Vec<u8>, CheckpointError> {
    let trainable: Vec<&str> = trainable_names(model).collect();
    if state.m.len() != trainable.len() || state.v.len() != trainable.len() {
        return Err(CheckpointError::Inconsistent(format!(
            "{} optimizer moments for {} trainable parameters",
            state.m.len(),
            trainable.len()
        )));
    }
    if state.t > MAX_STEP {
        return Err(CheckpointError::Inconsistent(format!("step count {} not representable", state.t)));
    }
    let blob = ConfigBlob {
        model: model.config().clone(),
        optimizer: OptimizerBlob {
            lr: state.lr,
            beta1: state.beta1,
            beta2: state.beta2,
            eps: state.eps,
        },
    };
    let json = serde_json::to_vec(&blob).map_err(|e| CheckpointError::Config(e.to_string()))?;

    let t = Tensor::scalar(state.t as f32);
    let mut entries: Vec<(String, &Tensor<f32>)> = model.params().iter().map(|p| (p.name.clone(), &p.tensor)).collect();
    entries.extend(trainable.iter().zip(&state.m).map(|(n, m)| (format!("adam.m.{n}"), m)));
    entries.extend(trainable.iter().zip(&state.v).map(|(n, v)| (format!("adam.v.{n}"), v)));
    entries.push(("adam.t".into(), &t));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(RANK);
        for d in tensor.shape().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

/// Parses the container without interpreting the tensors.
pub fn decode_raw(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { bytes };
    let magic = r.array::<4>("magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = u32::from_le_bytes(r.array("config length")?) as usize;
    let config_json = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|_| CheckpointError::Config("not UTF-8".into()))?
        .to_string();
    let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array("name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Inconsistent("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.array::<1>("rank")?[0];
        if rank != RANK {
            return Err(CheckpointError::Inconsistent(format!("{name}: rank {rank}, expected {RANK}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let v = u64::from_le_bytes(r.array("dims")?);
            *d = usize::try_from(v).map_err(|_| CheckpointError::Inconsistent(format!("{name}: dim {v}")))?;
        }
        let bytes_needed = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Inconsistent(format!("{name}: dims {dims:?} overflow")))?;
        let raw = r.take(bytes_needed, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let tensor = Tensor::from_vec(Shape::from(dims), data).expect("length derived from dims");
        tensors.push(NamedTensor { name, tensor });
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Inconsistent(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(RawCheckpoint {
        version,
        config_json,
        tensors,
    })
}

/// Rebuilds the model and optimizer state, requiring every expected tensor
/// exactly once with the expected shape and nothing else.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, AdamState<f32>), CheckpointError> {
    let raw = decode_raw(bytes)?;
    let blob: ConfigBlob = serde_json::from_str(&raw.config_json).map_err(|e| CheckpointError::Config(e.to_string()))?;
    blob.model.validate().map_err(|e| CheckpointError::Config(e.to_string()))?;
    // A genuine file stores every parameter, so this bounds the allocation.
    let stored: usize = raw.tensors.iter().map(|t| t.tensor.numel()).sum();
    if blob.model.parameter_count() > stored {
        return Err(CheckpointError::Inconsistent(format!(
            "config needs {} parameters but the file stores {stored} values",
            blob.model.parameter_count()
        )));
    }
    let mut model = Model::build(blob.model).map_err(|e| CheckpointError::Config(e.to_string()))?;

    let mut table: HashMap<String, Tensor<f32>> = HashMap::with_capacity(raw.tensors.len());
    for t in raw.tensors {
        if table.insert(t.name.clone(), t.tensor).is_some() {
            return Err(CheckpointError::Inconsistent(format!("duplicate tensor {}", t.name)));
        }
    }
    let mut take = |name: &str, shape: Shape| -> Result<Tensor<f32>, CheckpointError> {
        let t = table
            .remove(name)
            .ok_or_else(|| CheckpointError::Inconsistent(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(CheckpointError::Inconsistent(format!(
                "{name}: shape {} but model expects {shape}",
                t.shape()
            )));
        }
        Ok(t)
    };

    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in model.params_mut() {
        p.tensor = take(&p.name, p.tensor.shape())?;
    }
    for p in model.params().iter().filter(|p| p.trainable) {
        m.push(take(&format!("adam.m.{}", p.name), p.tensor.shape())?);
    }
    for p in model.params().iter().filter(|p| p.trainable) {
        v.push(take(&format!("adam.v.{}", p.name), p.tensor.shape())?);
    }
    let t = take("adam.t", Shape::scalar())?.data()[0];
    if !(t >= 0.0 && t.fract() == 0.0 && (t as u64) <= MAX_STEP) {
        return Err(CheckpointError::Inconsistent(format!("adam.t = {t}")));
    }
    if let Some(extra) = table.keys().min() {
        return Err(CheckpointError::Inconsistent(format!("unexpected tensor {extra}")));
    }
    let o = blob.optimizer;
    let state = AdamState {
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        t: t as u64,
        m,
        v,
    };
    state
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    Ok((model, state))
}

pub fn save_checkpoint(model: &Model, state: &AdamState<f32>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, state)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, AdamState<f32>), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
