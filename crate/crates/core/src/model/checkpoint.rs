//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"FACTRCKP"
//! u32     format version
//! u64     length of the configuration JSON, then the JSON bytes
//! u32     tensor count
//! per tensor:
//!   u32   name length, then UTF-8 name
//!   u8    dtype tag length, then ASCII tag ("f32" or "f64")
//!   u32   rank, then rank x u64 extents
//!   raw little-endian values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use factr_autodiff::{Real, Tensor};

use super::config::ModelConfig;
use super::network::Factr;
use super::params::Params;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FACTRCKP";
pub const FORMAT_VERSION: u32 = 1;

/// A configuration plus any subset of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Checkpoint<F> {
    pub fn from_model(model: &Factr<F>) -> Self {
        Self {
            config: model.config().clone(),
            tensors: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Tensors whose names pass `keep`, e.g. everything but the head.
    pub fn filtered(model: &Factr<F>, keep: impl Fn(&str) -> bool) -> Self {
        let mut ck = Self::from_model(model);
        ck.tensors.retain(|(n, _)| keep(n));
        ck
    }

    pub fn into_model(self) -> Result<Factr<F>> {
        Factr::from_params(self.config, Params::from_entries(self.tensors)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let config = serde_json::to_vec(&self.config)?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(config.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&config).map_err(io)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&[F::DTYPE.len() as u8]).map_err(io)?;
            w.write_all(F::DTYPE.as_bytes()).map_err(io)?;
            w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.numel() * F::BYTES);
            for v in t.data() {
                v.write_le(&mut buf);
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    /// Reads a checkpoint. Tensors stored at another precision are converted.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = cur.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(cur.take(len)?)?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let len = cur.take(1)?[0] as usize;
            let dtype = cur.take(len)?.to_vec();
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data: Vec<F> = match dtype.as_slice() {
                b"f32" => cur
                    .take(numel * 4)?
                    .chunks_exact(4)
                    .map(|c| F::from_f64_lossy(f32::read_le(c) as f64))
                    .collect(),
                b"f64" => cur
                    .take(numel * 8)?
                    .chunks_exact(8)
                    .map(|c| F::from_f64_lossy(f64::read_le(c)))
                    .collect(),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{name}' has unknown dtype '{}'",
                        String::from_utf8_lossy(other)
                    )))
                }
            };
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            lookback: 32,
            patch_len: 8,
            stride: 8,
            d_model: 4,
            channels: 2,
            horizon: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = Factr::<f32>::new(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ck = Checkpoint::from_model(&m);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.into_model().unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_fail() {
        let m = Factr::<f64>::new(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = Checkpoint::from_model(&m).to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f64>::from_bytes(&bad).is_err());
    }

    #[test]
    fn partial_checkpoint_does_not_build_a_model() {
        let m = Factr::<f32>::new(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let enc = Checkpoint::filtered(&m, |n| !n.starts_with("head."));
        assert!(enc.get("head.weight").is_none());
        assert!(enc.into_model().is_err());
    }
}
