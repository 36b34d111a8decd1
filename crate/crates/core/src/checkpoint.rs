//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   "TTT4RECK"
//! version u32
//! config  u32 length + JSON-encoded ModelConfig
//! count   u32
//! tensor* u16 name length, name, u8 rank, u64 dims…, f64 values…
//! fnv1a   u64 over every preceding byte
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so save → load is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, PARAM_NAMES};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TTT4RECK";
pub const FORMAT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn to_bytes(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(PARAM_NAMES.len() as u32).to_le_bytes());
    for (name, t) in PARAM_NAMES.iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let count = r.u32()? as usize;
    if count != PARAM_NAMES.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors, expected {}",
            PARAM_NAMES.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in PARAM_NAMES {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        if name != expected {
            return Err(Error::Checkpoint(format!(
                "found tensor '{name}', expected '{expected}'"
            )));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let params = ModelParams::from_tensors(tensors)?;
    if params.vocab_size() != config.vocab_size || params.embed_dim() != config.embed_dim {
        return Err(Error::Checkpoint(format!(
            "config says vocab {} × dim {}, tensors are {} × {}",
            config.vocab_size,
            config.embed_dim,
            params.vocab_size(),
            params.embed_dim()
        )));
    }
    Ok((config, params))
}

pub fn save(path: impl AsRef<Path>, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(config, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> (ModelConfig, ModelParams) {
        let config = ModelConfig {
            vocab_size: 7,
            embed_dim: 3,
            mlp_hidden: 5,
            ..ModelConfig::default()
        };
        let params = init_params(&config, 11).unwrap();
        (config, params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (config, params) = sample();
        let bytes = to_bytes(&config, &params).unwrap();
        let (c2, p2) = from_bytes(&bytes).unwrap();
        assert_eq!(c2, config);
        for (a, b) in params.tensors().iter().zip(p2.tensors()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(to_bytes(&c2, &p2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (config, params) = sample();
        let mut bytes = to_bytes(&config, &params).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(from_bytes(&bytes[..20]).is_err());
        assert!(from_bytes(b"hello world, not a checkpoint").is_err());
    }
}
