//! Tensor container file.
//!
//! Layout: magic `PCADCKPT`, u32 format version, u64 manifest length, the
//! UTF-8 JSON manifest, then every tensor's little-endian payload in manifest
//! order. The manifest lists `name`, `shape`, `dtype`, `offset` and `bytes`
//! for each tensor (offsets are relative to the payload start) plus a free-form
//! `meta` JSON value.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Real, Result, Tensor, TensorError, DTYPE};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

/// Ordered named tensors plus metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

const ELEM: usize = std::mem::size_of::<Real>();

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Checkpoint::get`] but a missing name is an error naming the tensor.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = (t.len() * ELEM) as u64;
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: DTYPE.to_string(),
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            tensors,
            meta: self.meta.clone(),
        })?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        let mut buf = Vec::with_capacity(offset as usize);
        for (_, t) in &self.tensors {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| TensorError::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let manifest_end = 20usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..manifest_end])?;
        let payload = &bytes[manifest_end..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != DTYPE {
                return Err(err(format!(
                    "tensor `{}` has dtype {}, this build reads {DTYPE}",
                    e.name, e.dtype
                )));
            }
            let n: usize = e.shape.iter().product();
            if e.bytes as usize != n * ELEM {
                return Err(err(format!(
                    "tensor `{}`: manifest says {} bytes for shape {:?}",
                    e.name, e.bytes, e.shape
                )));
            }
            let start = e.offset as usize;
            let end = start + e.bytes as usize;
            if end > payload.len() {
                return Err(err(format!(
                    "truncated payload: tensor `{}` needs bytes {start}..{end}, file has {}",
                    e.name,
                    payload.len()
                )));
            }
            let data = payload[start..end]
                .chunks_exact(ELEM)
                .map(|c| Real::from_le_bytes(c.try_into().expect("element width")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("a", Tensor::new(&[2, 2], vec![1.0, -0.0, Real::MIN_POSITIVE, 1e300 as Real]).unwrap());
        c.push("b", Tensor::scalar(std::f64::consts::PI as Real));
        c.meta = serde_json::json!({"step": 7});
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::from_bytes(&buf).unwrap();
        assert_eq!(back.tensors.len(), 2);
        for ((na, ta), (nb, tb)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        assert_eq!(back.meta["step"], 7);
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let msg = Checkpoint::from_bytes(&buf).unwrap_err().to_string();
        assert!(msg.contains("`b`"), "{msg}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf[8] = 9;
        let msg = Checkpoint::from_bytes(&buf).unwrap_err().to_string();
        assert!(msg.contains("version 9"), "{msg}");
    }
}
