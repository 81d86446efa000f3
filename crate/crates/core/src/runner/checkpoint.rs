//! Versioned checkpoint container.
//!
//! ```text
//! magic "MSFMRCKP" | format version u32 LE | header length u64 LE | JSON header
//! | parameter values | Adam first moments | Adam second moments
//! ```
//!
//! Arrays are little-endian in parameter order; the header lists names, shapes
//! and the full training configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamState;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MSFMRCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub iteration: u64,
    pub adam_step: u64,
    pub config: TrainConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub values: Vec<Tensor<T>>,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(config: &TrainConfig, iteration: u64, store: &ParamStore<T>, adam: &AdamState<T>) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable })
            .collect();
        Self {
            header: CheckpointHeader {
                dtype: T::DTYPE.to_string(),
                iteration,
                adam_step: adam.step,
                config: config.clone(),
                params,
            },
            values: store.iter().map(|(_, p)| p.value.clone()).collect(),
            adam: adam.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for group in [&self.values, &self.adam.m, &self.adam.v] {
            for t in group.iter() {
                out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("dtype {} cannot be loaded as {}", header.dtype, T::DTYPE)));
        }
        let width = std::mem::size_of::<T>();
        let mut offset = 20 + header_len;
        let mut read_group = || -> Result<Vec<Tensor<T>>> {
            header
                .params
                .iter()
                .map(|p| {
                    let n: usize = p.shape.iter().product();
                    let chunk = bytes
                        .get(offset..offset + n * width)
                        .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", p.name)))?;
                    offset += n * width;
                    Tensor::new(&p.shape, T::from_le_bytes_slice(chunk))
                })
                .collect()
        };
        let values = read_group()?;
        let m = read_group()?;
        let v = read_group()?;
        if offset != bytes.len() {
            return Err(bad("trailing bytes after data"));
        }
        let adam = AdamState { step: header.adam_step, m, v };
        Ok(Self { header, values, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::file(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| Error::file(path, e.to_string()))
    }

    /// Rejects a checkpoint whose architecture-defining fields differ from `requested`.
    pub fn check_compatible(&self, requested: &TrainConfig) -> Result<()> {
        let mismatches = self.header.config.shape_mismatches(requested);
        if mismatches.is_empty() {
            return Ok(());
        }
        let list: Vec<_> = mismatches
            .iter()
            .map(|(name, ours, theirs)| format!("{name} (checkpoint {ours}, requested {theirs})"))
            .collect();
        Err(Error::Checkpoint(format!("incompatible field(s): {}", list.join(", "))))
    }

    /// Copies the stored values into a store built for the same architecture.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.header.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for ((id, entry), value) in ids.into_iter().zip(&self.header.params).zip(&self.values) {
            let p = store.get_mut(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    /// Copies every stored tensor whose name starts with `prefix` and exists in
    /// `store` with the same shape; returns how many were copied.
    pub fn restore_matching(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (entry, value) in self.header.params.iter().zip(&self.values) {
            if !entry.name.starts_with(prefix) {
                continue;
            }
            let id = store
                .find(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no tensor named {}", entry.name)))?;
            let p = store.get_mut(id);
            if p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    entry.name,
                    entry.shape,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}
