//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a `u64`
//! header length, the JSON header, then every parameter tensor followed by
//! every present momentum buffer as little-endian `f32`, in store order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::optim::SgdState;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SRTODCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    velocity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    step: usize,
    epoch: usize,
    config_hash: String,
    config: String,
    tensors: Vec<TensorMeta>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub epoch: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub store: ParamStore<f32>,
    pub state: SgdState<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            step: self.step,
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            config: self.config.to_toml(),
            tensors: self
                .store
                .entries()
                .iter()
                .zip(&self.state.velocity)
                .map(|(e, v)| TensorMeta {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                    velocity: v.is_some(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .store
            .entries()
            .iter()
            .map(|e| &e.value)
            .chain(self.state.velocity.iter().flatten());
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let config = RunConfig::from_toml(&header.config)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;

        let mut cursor = 20 + len;
        let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 4 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            cursor += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(shape, data)
        };
        let mut store = ParamStore::new();
        for m in &header.tensors {
            let t = read(&m.shape)?;
            if m.trainable {
                store.add(m.name.clone(), t);
            } else {
                store.add_buffer(m.name.clone(), t);
            }
        }
        let mut velocity = Vec::with_capacity(header.tensors.len());
        for m in &header.tensors {
            velocity.push(if m.velocity { Some(read(&m.shape)?) } else { None });
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            step: header.step,
            epoch: header.epoch,
            config,
            config_hash: header.config_hash,
            store,
            state: SgdState { velocity },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Warn when `cfg` differs from the configuration the checkpoint was
    /// trained with. Returns whether the hashes match.
    pub fn check_config(&self, cfg: &RunConfig) -> bool {
        let matches = cfg.hash() == self.config_hash;
        if !matches {
            log::warn!(
                "config hash {} differs from checkpoint config hash {}",
                cfg.hash(),
                self.config_hash
            );
        }
        matches
    }

    /// Copy stored values into a freshly built store, checking names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.store.len(),
                store.len()
            )));
        }
        for (dst, src) in store.entries_mut().iter_mut().zip(self.store.entries()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
