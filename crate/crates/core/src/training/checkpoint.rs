//! Checkpoint container.
//!
//! ```text
//! b"PEDFCKPT"            8 bytes
//! version                u32 LE
//! manifest length        u64 LE
//! manifest               JSON: config, seed, step, tensors with byte offsets
//! payload                f64 LE values
//! ```
//!
//! Offsets are relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"PEDFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerManifest {
    config: AdamConfig,
    step: u64,
    /// First and second moments, parameter order, as `m.<name>` / `v.<name>`.
    moments: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    step: u64,
    params: Vec<Entry>,
    optimizer: Option<OptimizerManifest>,
}

/// A model plus what is needed to resume training it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Transformer,
    pub optimizer: Option<OptimizerState>,
    /// Seed of the run that produced the weights.
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
}

struct Payload(Vec<u8>);

impl Payload {
    fn push(&mut self, values: &[f64]) -> u64 {
        let offset = self.0.len() as u64;
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        offset
    }
}

fn read_values(payload: &[u8], entry: &Entry) -> Result<Vec<f64>> {
    let n: usize = entry.shape.iter().product();
    let start = usize::try_from(entry.offset)
        .map_err(|_| Error::Checkpoint(format!("{}: offset too large", entry.name)))?;
    let end = start
        .checked_add(n * 8)
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", entry.name)))?;
    Ok(payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn new(model: Transformer, optimizer: Option<OptimizerState>, seed: u64) -> Self {
        let step = optimizer.as_ref().map_or(0, |o| o.step);
        Self {
            model,
            optimizer,
            seed,
            step,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Payload(Vec::new());
        let params = self
            .model
            .params()
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset: payload.push(p.tensor.data()),
            })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|opt| {
            let mut moments = Vec::new();
            for (kind, buffers) in [("m", &opt.m), ("v", &opt.v)] {
                for (p, buf) in self.model.params().iter().zip(buffers) {
                    moments.push(Entry {
                        name: format!("{kind}.{}", p.name),
                        shape: p.tensor.shape().to_vec(),
                        offset: payload.push(buf),
                    });
                }
            }
            OptimizerManifest {
                config: opt.config,
                step: opt.step,
                moments,
            }
        });
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            seed: self.seed,
            step: self.step,
            params,
            optimizer,
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + manifest.len() + payload.0.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("manifest truncated".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..end])
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(Error::Checkpoint("manifest version disagrees with header".into()));
        }
        let payload = &bytes[end..];

        let mut model = Transformer::new(manifest.config, manifest.seed)?;
        let expected: Vec<String> = model.params().names().map(str::to_string).collect();
        let stored: Vec<&str> = manifest.params.iter().map(|e| e.name.as_str()).collect();
        if stored != expected {
            let mismatched = expected
                .iter()
                .filter(|n| !stored.contains(&n.as_str()))
                .cloned()
                .chain(
                    stored
                        .iter()
                        .filter(|n| !expected.iter().any(|e| e == *n))
                        .map(|n| n.to_string()),
                )
                .collect();
            return Err(Error::Incompatible { names: mismatched });
        }
        for entry in &manifest.params {
            let values = read_values(payload, entry)?;
            model
                .params_mut()
                .set(&entry.name, Tensor::new(entry.shape.clone(), values)?)?;
        }
        let optimizer = match manifest.optimizer {
            Some(o) => {
                let n = model.params().len();
                if o.moments.len() != 2 * n {
                    return Err(Error::Checkpoint("optimizer state incomplete".into()));
                }
                let mut buffers = o
                    .moments
                    .iter()
                    .map(|e| read_values(payload, e))
                    .collect::<Result<Vec<_>>>()?;
                let v = buffers.split_off(n);
                for (p, m) in model.params().iter().zip(&buffers) {
                    if m.len() != p.tensor.numel() {
                        return Err(Error::Checkpoint(format!("moment size for {}", p.name)));
                    }
                }
                Some(OptimizerState {
                    config: o.config,
                    step: o.step,
                    m: buffers,
                    v,
                })
            }
            None => None,
        };
        Ok(Self {
            model,
            optimizer,
            seed: manifest.seed,
            step: manifest.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Transformer,
    optimizer: Option<&OptimizerState>,
    seed: u64,
) -> Result<()> {
    Checkpoint::new(model.clone(), optimizer.cloned(), seed).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
