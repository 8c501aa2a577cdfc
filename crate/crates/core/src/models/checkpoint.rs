//! Binary checkpoint container.
//!
//! Layout (little endian):
//! `b"GBCK"` | u32 version | u64 header length | JSON header |
//! u32 tensor count | per tensor: u32 name length, name bytes, u64 rows,
//! u64 cols, rows*cols f64.

use std::collections::BTreeMap;
use std::path::Path;

use gridbench_autodiff::Tensor;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(
            16 + header.len() + self.tensors.values().map(|t| 8 * t.len() + 32).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleSchema(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let raw = r.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(
                || Error::Checkpoint(format!("tensor `{name}` is too large")),
            )?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
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

    #[test]
    fn round_trip_is_bit_exact() {
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::from_vec(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        tensors.insert("b.c".to_string(), Tensor::zeros(0, 3));
        let ck = Checkpoint {
            header: serde_json::json!({"seed": 3}),
            tensors,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        for (k, t) in &ck.tensors {
            let u = &back.tensors[k];
            assert_eq!(t.shape(), u.shape());
            assert!(t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn header_floats_survive_a_round_trip() {
        let xs: Vec<f64> = (1..200).map(|k| (k as f64).sqrt() * 1e-3 + 0.1 / k as f64).collect();
        let ck = Checkpoint {
            header: serde_json::json!({ "dual": xs }),
            tensors: BTreeMap::new(),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let got: Vec<f64> = serde_json::from_value(back.header["dual"].clone()).unwrap();
        assert!(got.iter().zip(&xs).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let ck = Checkpoint {
            header: serde_json::json!({}),
            tensors: BTreeMap::new(),
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::IncompatibleSchema(_))));
    }
}
