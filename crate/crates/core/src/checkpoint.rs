//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ESDM" | version u32 | config digest [u8; 32] | tensor count u32
//! per tensor: name length u32 | UTF-8 name | rank u32 | dims u32 * rank | f32 * numel
//! ```
//!
//! The digest is the SHA-256 of [`ModelConfig::architecture_key`]. Every
//! stored tensor (trainable or running statistic) appears in store order.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ESDM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {what}")]
    Truncated { what: String },
    #[error("tensor #{index}: name is not valid UTF-8")]
    InvalidName { index: usize },
    #[error("tensor `{name}`: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("tensor names do not match the configuration; missing: [{}], unexpected: [{}]", missing.join(", "), unexpected.join(", "))]
    NameMismatch { missing: Vec<String>, unexpected: Vec<String> },
    #[error("tensor `{name}`: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("configuration digest differs from the one stored in the checkpoint")]
    DigestMismatch,
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
}

pub fn config_digest(config: &ModelConfig) -> [u8; 32] {
    Sha256::digest(config.architecture_key().as_bytes()).into()
}

/// Serializes every tensor of `model`.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let entries = model.store().entries();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(model.config()));
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// A tensor as read from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Header and tensors of a checkpoint, without checking them against any
/// configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub tensors: Vec<RawTensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { what: what() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, || "magic".into())?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.to_vec()));
    }
    let version = r.u32(|| "format version".into())?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32, || "config digest".into())?);
    let count = r.u32(|| "tensor count".into())? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for index in 0..count {
        let len = r.u32(|| format!("name length of tensor #{index}"))? as usize;
        let raw = r.take(len, || format!("name of tensor #{index}"))?;
        let name = std::str::from_utf8(raw).map_err(|_| CheckpointError::InvalidName { index })?.to_string();
        let rank = r.u32(|| format!("rank of tensor `{name}`"))? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::BadTensor { name, reason: format!("rank {rank} out of range") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(|| format!("dims of tensor `{name}`"))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| CheckpointError::BadTensor { name: name.clone(), reason: format!("invalid shape {shape:?}") })?;
        let nbytes = numel
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::BadTensor { name: name.clone(), reason: "size overflow".into() })?;
        let raw = r.take(nbytes, || format!("values of tensor `{name}`"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push(RawTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(RawCheckpoint { version, digest, tensors })
}

/// Builds a model for `config` and fills it from checkpoint bytes. Names and
/// shapes are checked before the digest so that mismatches are reported per
/// tensor.
pub fn from_bytes<T: Scalar>(bytes: &[u8], config: &ModelConfig) -> Result<Model<T>> {
    let raw = parse(bytes)?;
    let mut model = Model::<T>::build(config)?;
    let store = model.store_mut();

    let mut seen = std::collections::HashSet::new();
    for t in &raw.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(CheckpointError::Duplicate(t.name.clone()).into());
        }
    }
    let missing: Vec<String> =
        store.entries().iter().filter(|e| !seen.contains(e.name.as_str())).map(|e| e.name.clone()).collect();
    let unexpected: Vec<String> =
        raw.tensors.iter().filter(|t| store.find(&t.name).is_none()).map(|t| t.name.clone()).collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(CheckpointError::NameMismatch { missing, unexpected }.into());
    }
    for t in &raw.tensors {
        let id = store.find(&t.name).expect("checked above");
        let expected = store.get(id).shape().to_vec();
        if expected != t.shape {
            return Err(CheckpointError::ShapeMismatch { name: t.name.clone(), expected, found: t.shape.clone() }.into());
        }
    }
    if raw.digest != config_digest(config) {
        return Err(CheckpointError::DigestMismatch.into());
    }
    for t in raw.tensors {
        let id = store.find(&t.name).expect("checked above");
        let data = t.data.iter().map(|&v| T::of(v as f64)).collect();
        *store.get_mut(id) = Tensor::new(t.shape, data)?;
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model<T>> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> Model<f32> {
        Model::build(&ModelConfig::micro()).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = micro();
        let a = to_bytes(&m);
        let back: Model<f32> = from_bytes(&a, m.config()).unwrap();
        assert_eq!(to_bytes(&back), a);
        for (x, y) in m.store().entries().iter().zip(back.store().entries()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn header_errors() {
        let m = micro();
        let mut b = to_bytes(&m);
        b[0] = b'X';
        assert!(matches!(parse(&b), Err(CheckpointError::BadMagic(_))));
        let mut b = to_bytes(&m);
        b[4] = 9;
        assert_eq!(parse(&b), Err(CheckpointError::UnsupportedVersion(9)));
        let b = to_bytes(&m);
        assert!(matches!(parse(&b[..b.len() - 1]), Err(CheckpointError::Truncated { .. })));
        let mut b = to_bytes(&m);
        b.push(0);
        assert_eq!(parse(&b), Err(CheckpointError::TrailingBytes(1)));
    }

    #[test]
    fn corrupt_name_length_names_the_tensor() {
        let m = micro();
        let mut b = to_bytes(&m);
        // First tensor's name length sits right after the 44-byte header.
        b[44..48].copy_from_slice(&1000u32.to_le_bytes());
        let err = parse(&b).unwrap_err().to_string();
        assert!(err.contains("#0"), "{err}");

        // Corrupting the rank of the first tensor names it.
        let mut b = to_bytes(&m);
        let name_len = m.store().entries()[0].name.len();
        let at = 48 + name_len;
        b[at..at + 4].copy_from_slice(&7u32.to_le_bytes());
        let err = parse(&b).unwrap_err().to_string();
        assert!(err.contains(&m.store().entries()[0].name), "{err}");
    }

    #[test]
    fn ablation_checkpoint_rejected_with_missing_names() {
        let cfg = ModelConfig { use_dmr: false, ..ModelConfig::micro() };
        let m = Model::<f32>::build(&cfg).unwrap();
        let err = from_bytes::<f32>(&to_bytes(&m), &ModelConfig::micro()).unwrap_err().to_string();
        assert!(err.contains("dmr1.f3_1.weight") && err.contains("missing"), "{err}");
    }

    #[test]
    fn digest_ignores_seed_and_size() {
        let a = ModelConfig::micro();
        let b = ModelConfig { seed: 99, input_size: (64, 64), ..a.clone() };
        assert_eq!(config_digest(&a), config_digest(&b));
        let c = ModelConfig { expansion: 2, ..a.clone() };
        assert_ne!(config_digest(&a), config_digest(&c));
    }
}
