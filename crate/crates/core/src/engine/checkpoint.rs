//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `PSCKPT\0\0`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in header order (parameters, momentum
//! buffers, OIM table, OIM queue).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use autograd::Tensor;
use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::OimState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PSCKPT\0\0";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Optimizer steps completed.
    pub step: usize,
    pub dataset: String,
    pub params: Vec<NamedTensor>,
    /// Momentum buffers, keyed by parameter name.
    pub buffers: Vec<NamedTensor>,
    pub oim: OimState,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OimMeta {
    num_labeled: usize,
    dim: usize,
    queue_size: usize,
    seen: Vec<bool>,
    filled: usize,
    pointer: usize,
    temperature: f64,
    momentum: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: usize,
    dataset: String,
    params: Vec<TensorMeta>,
    buffers: Vec<TensorMeta>,
    oim: OimMeta,
}

fn meta(ts: &[NamedTensor]) -> Vec<TensorMeta> {
    ts.iter()
        .map(|t| TensorMeta {
            name: t.name.clone(),
            shape: t.value.shape().to_vec(),
        })
        .collect()
}

fn put(out: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            dataset: self.dataset.clone(),
            params: meta(&self.params),
            buffers: meta(&self.buffers),
            oim: OimMeta {
                num_labeled: self.oim.num_labeled(),
                dim: self.oim.dim(),
                queue_size: self.oim.queue_size(),
                seen: self.oim.seen.clone(),
                filled: self.oim.filled,
                pointer: self.oim.pointer,
                temperature: self.oim.temperature,
                momentum: self.oim.momentum,
            },
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.iter().chain(&self.buffers) {
            put(&mut out, t.value.iter().copied());
        }
        put(&mut out, self.oim.lut.iter().copied());
        put(&mut out, self.oim.cq.iter().copied());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut v4 = [0u8; 4];
        r.read_exact(&mut v4).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(v4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut v8 = [0u8; 8];
        r.read_exact(&mut v8).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(v8) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        let mut data = &r[len..];
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if data.len() < n * 8 {
                return Err(bad("truncated tensor data"));
            }
            let vals = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[n * 8..];
            Ok(Tensor::from_shape_vec(IxDyn(shape), vals).expect("length checked"))
        };
        let mut read_all = |metas: &[TensorMeta]| -> Result<Vec<NamedTensor>> {
            metas
                .iter()
                .map(|m| {
                    Ok(NamedTensor {
                        name: m.name.clone(),
                        value: take(&m.shape)?,
                    })
                })
                .collect()
        };
        let params = read_all(&header.params)?;
        let buffers = read_all(&header.buffers)?;
        let o = &header.oim;
        let to2 = |t: Tensor| t.into_dimensionality::<ndarray::Ix2>().expect("rank 2");
        let lut: Array2<f64> = to2(take(&[o.num_labeled, o.dim])?);
        let cq: Array2<f64> = to2(take(&[o.queue_size, o.dim])?);
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if o.seen.len() != o.num_labeled || o.filled > o.queue_size || o.pointer >= o.queue_size.max(1) {
            return Err(bad("inconsistent OIM state"));
        }
        let oim = OimState {
            lut,
            seen: o.seen.clone(),
            cq,
            filled: o.filled,
            pointer: o.pointer,
            temperature: o.temperature,
            momentum: o.momentum,
        };
        Ok(Self {
            config: header.config,
            step: header.step,
            dataset: header.dataset,
            params,
            buffers,
            oim,
        })
    }

    /// Writes atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}
