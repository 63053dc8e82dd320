//! Binary checkpoints.
//!
//! ```text
//! magic   "CVFM1\0"                          6 bytes
//! digest  SHA-256 of the canonical config    32 bytes
//! count   u32
//! count x { name_len u16, name utf-8, shape 4 x u32, offset u64 }
//! payload f32 values, little endian
//! ```
//!
//! All integers are little endian. Offsets are in bytes from the start of
//! the payload. Tensors are stored in parameter order and include the
//! batch-norm running statistics.

use std::path::Path;

use convformer_core::backbone::{Model, ModelConfig};
use convformer_core::params::ParamSet;
use convformer_core::Tensor;

use crate::config_file;

pub const MAGIC: &[u8; 6] = b"CVFM1\0";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint was saved for a different model config (digest {found}, expected {expected})")]
    DigestMismatch { expected: String, found: String },
    #[error("checkpoint layout does not match the model: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet<f32>, digest: [u8; 32]) -> Self {
        let entries = params.iter().map(|(_, p)| Entry { name: p.name.clone(), value: p.value.clone() }).collect();
        Checkpoint { digest, entries }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&self.digest);
        header.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for e in &self.entries {
            header.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            header.extend_from_slice(e.name.as_bytes());
            for d in e.value.dims() {
                header.extend_from_slice(&(d as u32).to_le_bytes());
            }
            header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            for v in e.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        header.extend_from_slice(&payload);
        header
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()? as usize;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Layout("tensor name is not utf-8".into()))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let offset = r.u64()?;
            directory.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut entries = Vec::with_capacity(directory.len());
        for (name, shape, offset) in directory {
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
            let start = usize::try_from(offset).map_err(|_| CheckpointError::Truncated)?;
            let end = numel.checked_mul(4).and_then(|n| n.checked_add(start)).ok_or(CheckpointError::Truncated)?;
            let raw = payload.get(start..end).ok_or(CheckpointError::Truncated)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let value = Tensor::new(shape, data).map_err(|e| CheckpointError::Layout(e.to_string()))?;
            entries.push(Entry { name, value });
        }
        Ok(Checkpoint { digest, entries })
    }

    /// Copies the stored tensors into `params`, which must have exactly the
    /// same names and shapes in the same order.
    pub fn restore(&self, params: &mut ParamSet<f32>) -> Result<(), CheckpointError> {
        if self.entries.len() != params.len() {
            return Err(CheckpointError::Layout(format!(
                "{} tensors stored, model has {}",
                self.entries.len(),
                params.len()
            )));
        }
        let ids: Vec<_> = params.ids().collect();
        for (id, e) in ids.into_iter().zip(&self.entries) {
            let p = params.get(id);
            if p.name != e.name || p.value.shape() != e.value.shape() {
                return Err(CheckpointError::Layout(format!(
                    "stored {} {} where the model has {} {}",
                    e.name,
                    e.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            params.assign(id, e.value.clone()).map_err(|e| CheckpointError::Layout(e.to_string()))?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn save(path: &Path, model: &Model<f32>) -> Result<(), CheckpointError> {
    let bytes = Checkpoint::from_params(&model.params, config_file::digest(model.config())).encode();
    std::fs::write(path, bytes).map_err(io_error(path))
}

/// Loads a checkpoint into a fresh model of `config`, rejecting files
/// saved for any other config.
pub fn load(path: &Path, config: &ModelConfig) -> Result<Model<f32>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    let expected = config_file::digest(config);
    if ckpt.digest != expected {
        return Err(CheckpointError::DigestMismatch {
            expected: hex::encode(expected),
            found: hex::encode(ckpt.digest),
        });
    }
    let mut model = Model::skeleton(config).map_err(|e| CheckpointError::Layout(e.to_string()))?;
    ckpt.restore(&mut model.params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use convformer_core::rng::Rng;

    fn tiny() -> Model<f32> {
        Model::build(&ModelConfig::tiny(), &mut Rng::seed(0)).unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let m = tiny();
        let ckpt = Checkpoint::from_params(&m.params, [7; 32]);
        let bytes = ckpt.encode();
        assert_eq!(&bytes[..6], MAGIC);
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ckpt);
        let mut restored = Model::skeleton(&ModelConfig::tiny()).unwrap();
        ckpt.restore(&mut restored.params).unwrap();
        assert!(restored.params.bit_eq(&m.params));
    }

    #[test]
    fn header_layout() {
        let mut set = ParamSet::new();
        set.push(
            "ab",
            convformer_core::params::ParamKind::Learnable,
            Tensor::new([1, 2, 1, 1], vec![1.0, -2.0]).unwrap(),
        )
        .unwrap();
        let bytes = Checkpoint::from_params(&set, [0; 32]).encode();
        let mut expect = MAGIC.to_vec();
        expect.extend([0; 32]);
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        for d in [1u32, 2, 1, 1] {
            expect.extend(d.to_le_bytes());
        }
        expect.extend(0u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::from_params(&tiny().params, [0; 32]).encode();
        assert!(matches!(Checkpoint::decode(b"NOTCKPT"), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::decode(&bytes[..100]), Err(CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let ckpt = Checkpoint::from_params(&tiny().params, [0; 32]);
        let mut other = Model::<f32>::skeleton(&ModelConfig::convformer_s()).unwrap();
        assert!(matches!(ckpt.restore(&mut other.params), Err(CheckpointError::Layout(_))));
    }
}
