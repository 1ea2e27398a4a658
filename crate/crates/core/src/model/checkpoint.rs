//! Binary checkpoint files.
//!
//! Layout: magic `DYSC`, version u32, 32-byte config digest, tensor count
//! u32, then per tensor: name length u32, name bytes, rank u32, dims
//! u32 each, row-major f64 values. All integers and floats little-endian.
//! Loading verifies the digest so checkpoints can never silently cross
//! configurations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::{CoreError, Result};

const MAGIC: &[u8; 4] = b"DYSC";
const VERSION: u32 = 1;

/// Named tensors (parameters and batchnorm buffers) plus the config digest
/// they were trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshot a model's parameters and buffers.
    pub fn of(model: &Model, digest: [u8; 32]) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, p) in model.params() {
            tensors.insert(name.clone(), p.tensor.clone());
        }
        for (name, b) in model.buffers() {
            tensors.insert(name.clone(), b.clone());
        }
        Self { digest, tensors }
    }

    /// Rebuild a model from this checkpoint. Every parameter and buffer of
    /// the freshly-constructed architecture must be present with matching
    /// shape; the caller's digest must match the stored one.
    pub fn restore(&self, config: ModelConfig, expected_digest: [u8; 32]) -> Result<Model> {
        if self.digest != expected_digest {
            return Err(CoreError::Checkpoint(
                "config digest mismatch: checkpoint belongs to a different configuration".into(),
            ));
        }
        let mut model = Model::init(config, 0)?;
        let names: Vec<String> = model
            .params()
            .map(|(n, _)| n.clone())
            .chain(model.buffers().map(|(n, _)| n.clone()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint holds {} tensors, architecture wants {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for name in names {
            let stored = self
                .tensors
                .get(&name)
                .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor {name}")))?;
            let want_shape = model
                .param(&name)
                .map(|p| p.tensor.shape().to_vec())
                .unwrap_or_else(|| model.buffer(&name).shape().to_vec());
            if stored.shape() != want_shape {
                return Err(CoreError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, architecture wants {want_shape:?}",
                    stored.shape()
                )));
            }
            if model.param(&name).is_some() {
                model.apply_update(&name, stored.data().to_vec())?;
            } else {
                model.set_buffer(&name, stored.data().to_vec())?;
            }
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&ckpt.digest);
    bytes.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| CoreError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*off..*off + n)
            .ok_or_else(|| CoreError::Checkpoint("truncated checkpoint".into()))?;
        *off += n;
        Ok(s)
    };
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());

    if take(&mut off, 4)? != MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32_of(take(&mut off, 4)?);
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let digest: [u8; 32] = take(&mut off, 32)?.try_into().unwrap();
    let count = u32_of(take(&mut off, 4)?) as usize;

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32_of(take(&mut off, 4)?) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| CoreError::Checkpoint("invalid tensor name".into()))?;
        let rank = u32_of(take(&mut off, 4)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(take(&mut off, 4)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = take(&mut off, numel * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if off != bytes.len() {
        return Err(CoreError::Checkpoint("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint { digest, tensors })
}
