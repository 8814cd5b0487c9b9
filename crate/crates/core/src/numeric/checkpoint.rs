//! `BEVIS1` parameter container.
//!
//! Layout (little-endian): the 6-byte magic `BEVIS1`, then records until
//! end of file. Each record is `u32` name length, UTF-8 name, `u32` rank,
//! `rank × u64` dims, and `numel × f64` values.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::params::ParamStore;
use crate::numeric::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"BEVIS1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            records: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Restore every parameter of `store` from same-named records.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let mut tmp = ParamStore::new();
        for (name, t) in &self.records {
            if tmp.id(name).is_none() {
                tmp.add(name.clone(), t.clone(), false);
            }
        }
        store.load_from(&tmp)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(6, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic".into(),
            });
        }
        let mut records = Vec::new();
        while !r.is_empty() {
            let name_len = r.u32("name length")? as usize;
            let name_at = r.offset();
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Parse {
                    offset: name_at,
                    message: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64("dim")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Parse {
                offset: r.offset(),
                message: format!("dims of {name} overflow"),
            })?;
            let mut data = Vec::with_capacity(numel.min(r.remaining() / 8));
            for _ in 0..numel {
                data.push(r.f64("value")?);
            }
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor whose errors carry the failing byte offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new();
        ck.push("a.weight", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        ck.push("scalar", Tensor::scalar(std::f64::consts::PI));
        ck.push("empty", Tensor::zeros(&[0, 3]));
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..6], b"BEVIS1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.records.len(), 3);
        assert_eq!(back.get("a.weight").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_reports_offset() {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::from_vec(vec![1.0, 2.0]));
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset as usize, bytes.len() - 8),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            Checkpoint::from_bytes(b"BEVIS2"),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn restore_into_store() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2]), true);
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::from_vec(vec![3.0, 4.0]));
        ck.restore(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[3.0, 4.0]);
        let mut bad = Checkpoint::new();
        bad.push("w", Tensor::from_vec(vec![3.0]));
        assert!(bad.restore(&mut store).is_err());
    }
}
