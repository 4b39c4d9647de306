//! Binary checkpoint container.
//!
//! Layout (little endian): magic `IRFSOD`, `u32` format version, `u64`
//! length + JSON config snapshot, `u32` parameter count, then per parameter
//! `u32` name length + name, `u32` rank + `u64` dims, `f64` values. A
//! trailing `u64` FNV-1a hash covers every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig};
use crate::nn::Parameterized;
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 6] = b"IRFSOD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn encode_checkpoint(model: &Detector, train: Option<&TrainConfig>) -> Vec<u8> {
    let snapshot = ConfigSnapshot {
        model: model.config.clone(),
        train: train.cloned(),
    };
    let json = serde_json::to_vec(&snapshot).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Detector, ConfigSnapshot)> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
    }
    let mut r = Reader { buf: body, pos: 10 };
    let json_len = r.u64()? as usize;
    let snapshot: ConfigSnapshot = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad config snapshot: {e}")))?;
    let mut model = Detector::new(snapshot.model.clone(), 0)
        .map_err(|e| Error::Checkpoint(format!("config snapshot rejected: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, model has {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != p.name {
            return Err(Error::Checkpoint(format!("expected parameter {}, found {name}", p.name)));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != p.shape {
            return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
        }
        for v in p.value.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok((model, snapshot))
}

pub fn save_checkpoint(model: &Detector, train: Option<&TrainConfig>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, train)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Detector, ConfigSnapshot)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Detector {
        let cfg = ModelConfig {
            backbone: crate::features::BackboneConfig {
                channels: vec![4, 6],
                strides: vec![2, 2],
            },
            ..ModelConfig::default()
        };
        Detector::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m, Some(&TrainConfig::default()));
        let (back, snap) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(snap.train, Some(TrainConfig::default()));
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let bits = |p: &crate::nn::Param| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(m.param_digest(), back.param_digest());
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = encode_checkpoint(&model(), None);
        bytes[6] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode_checkpoint(&model(), None);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(b"nope"), Err(Error::Checkpoint(_))));
        let bytes = encode_checkpoint(&model(), None);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 20]).is_err());
    }
}
