//! Binary checkpoint: every named model tensor (trainable parameters,
//! PLIF `w`, batch-norm buffers), the optimizer moments and a hash of the
//! model-defining configuration.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "EVDC" | u32 version | u64 config hash | u64 optimizer step | u32 count
//! count x { u16 name length | name (UTF-8) | u8 rank | rank x u32 dim | f64 data }
//! ```
//!
//! Optimizer moments are stored as `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::Parameterized;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"EVDC";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

/// FNV-1a over the TOML of the sections that define the model.
pub fn config_hash(cfg: &RunConfig) -> u64 {
    let text = format!(
        "{}\n{}\n{}",
        toml::to_string(&cfg.arch).expect("serializable"),
        toml::to_string(&cfg.neuron).expect("serializable"),
        toml::to_string(&cfg.simulation).expect("serializable"),
    );
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn from_model<M: Parameterized<f64>>(model: &M, config_hash: u64) -> Self {
        Checkpoint {
            config_hash,
            step: 0,
            tensors: model
                .named_params()
                .into_iter()
                .map(|(n, t, _)| (n, t.clone()))
                .collect(),
        }
    }

    /// Copies every model tensor from the checkpoint; names and shapes must
    /// match exactly.
    pub fn load_into<M: Parameterized<f64>>(&self, model: &mut M) -> Result<()> {
        for (name, dst, _) in model.named_params_mut() {
            let src = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode_checkpoint(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} reading {what}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_hash = r.u64("config hash")?;
    let step = r.u64("step")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} at byte {at}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: rank {rank} exceeds {MAX_RANK}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: size overflows")))?;
        let raw = r.take(n, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors
            .iter()
            .any(|(m, _): &(String, Tensor<f64>)| *m == name)
        {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_hash,
        step,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: 42,
            step: 7,
            tensors: vec![
                (
                    "a.weight".into(),
                    Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2),
                ),
                ("a.w".into(), Tensor::new(&[1], vec![-0.0]).unwrap()),
                ("s".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ],
        }
    }

    #[test]
    fn encode_decode_is_bit_exact() {
        let c = sample();
        let back = decode_checkpoint(&c.encode()).unwrap();
        assert_eq!(back.encode(), c.encode());
        assert!(back.get("a.w").unwrap().data()[0].is_sign_negative());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
        let mut huge = bytes;
        // first tensor's first dimension
        let off = 4 + 4 + 8 + 8 + 4 + 2 + "a.weight".len() + 1;
        huge[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge).is_err());
    }

    #[test]
    fn hash_tracks_model_sections_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.training.lr = 9.0;
        assert_eq!(config_hash(&a), config_hash(&b));
        b.simulation.steps = 5;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
