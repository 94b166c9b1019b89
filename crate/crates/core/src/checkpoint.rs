//! Binary checkpoints: model parameters, optional optimizer moments and a
//! JSON metadata block.
//!
//! Layout (little-endian): `b"CPRC"`, `u32` version, `u32` metadata length,
//! metadata JSON, `u32` tensor count, then per tensor `u32` name length,
//! UTF-8 name, `u32` rank, `u32` dims, `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CaptionerConfig, CaptionerModel};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    config: CaptionerConfig,
    epoch: usize,
    adam: Option<AdamMeta>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamMeta {
    t: u64,
    config: AdamConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub model: CaptionerModel<S>,
    pub optimizer: Option<AdamState<S>>,
    /// Last completed epoch (0 for an untrained model).
    pub epoch: usize,
    /// Free-form metadata stored alongside (e.g. the training config).
    pub extra: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor<S: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<S>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for &v in t.data() {
        let v = v.to_f32().ok_or_else(|| Error::Checkpoint(format!("`{name}` holds a value not representable as f32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.model.config().clone(),
            epoch: self.epoch,
            adam: self.optimizer.as_ref().map(|a| AdamMeta { t: a.t, config: a.config }),
            extra: self.extra.clone(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let params = self.model.params();
        let mut tensors: Vec<(String, &Tensor<S>)> =
            params.names().iter().cloned().zip(params.tensors()).collect();
        if let Some(adam) = &self.optimizer {
            if adam.m.len() != params.len() || adam.v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            for (i, name) in params.names().iter().enumerate() {
                tensors.push((format!("adam.m.{name}"), &adam.m[i]));
                tensors.push((format!("adam.v.{name}"), &adam.v[i]));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_tensor(&mut out, &name, t)?;
        }
        Ok(out)
    }

    /// Parses a whole checkpoint; nothing is returned unless every part is valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            named.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = CaptionerModel::from_named(meta.config, &named)?;
        let optimizer = match meta.adam {
            None => None,
            Some(AdamMeta { t, config }) => {
                let find = |prefix: &str, name: &str| {
                    let key = format!("{prefix}.{name}");
                    named
                        .iter()
                        .find(|(n, _)| *n == key)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| Error::Checkpoint(format!("tensor `{key}` absent")))
                };
                let names = model.params().names();
                let m = names.iter().map(|n| find("adam.m", n)).collect::<Result<Vec<_>>>()?;
                let v = names.iter().map(|n| find("adam.v", n)).collect::<Result<Vec<_>>>()?;
                for ((mi, vi), p) in m.iter().zip(&v).zip(model.params().tensors()) {
                    if mi.shape() != p.shape() || vi.shape() != p.shape() {
                        return Err(Error::Checkpoint("optimizer moment shape differs from its parameter".into()));
                    }
                }
                Some(AdamState { m, v, t, config })
            }
        };
        Ok(Checkpoint { model, optimizer, epoch: meta.epoch, extra: meta.extra })
    }

    /// Writes through a temporary file and renames, so a crash never leaves
    /// a truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint<f32> {
        let model = CaptionerModel::new(CaptionerConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut adam = AdamState::new(model.params().tensors().iter(), AdamConfig::default());
        adam.t = 17;
        adam.m[0].data_mut()[0] = 0.25;
        Checkpoint { model, optimizer: Some(adam), epoch: 3, extra: serde_json::json!({"seed": 9}) }
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 99;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Version { found: 99, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
