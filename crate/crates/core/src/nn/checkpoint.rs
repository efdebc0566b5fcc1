//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SCDCKPT\0"
//! version    u32      1
//! count      u32      number of entries
//! entry*     count times:
//!   layer    u32      index into the embedding's layer list
//!   name_len u16
//!   name     name_len bytes of UTF-8 ("weight", "bias", "gamma", ...)
//!   dims     4 x u32  (n, c, h, w)
//!   values   n*c*h*w x f64, little-endian IEEE-754
//! ```
//!
//! Entries are written in layer order, then in the order each layer lists
//! its parameters, so equal models produce byte-identical files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

const MAGIC: &[u8; 8] = b"SCDCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub layer: usize,
    pub name: String,
    pub tensor: Tensor4,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn push(&mut self, layer: usize, name: &str, tensor: Tensor4) {
        self.entries.push(CheckpointEntry {
            layer,
            name: name.to_string(),
            tensor: tensor.with_requires_grad(false),
        });
    }

    pub fn get(&self, layer: usize, name: &str) -> Option<&Tensor4> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.layer as u32).to_le_bytes());
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let d = e.tensor.dims();
            for v in [d.n, d.c, d.h, d.w] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let layer = r.u32()? as usize;
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let dims = Dims::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let raw = r.take(dims.len() * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ckpt.entries.push(CheckpointEntry {
                layer,
                name,
                tensor: Tensor4::new(dims, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut c = Checkpoint::default();
        c.push(2, "bias", Tensor4::row(&[1.5]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"SCDCKPT\0");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &2u32.to_le_bytes());
        assert_eq!(&b[20..22], &4u16.to_le_bytes());
        assert_eq!(&b[22..26], b"bias");
        assert_eq!(&b[42..50], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 50);
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut c = Checkpoint::default();
        c.push(0, "weight", Tensor4::row(&[1.0, 2.0]).unwrap());
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = b;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exactly(
            values in prop::collection::vec(any::<f64>(), 1..40),
            layer in 0usize..100,
        ) {
            let mut c = Checkpoint::default();
            let n = values.len();
            c.push(layer, "weight", Tensor4::new(Dims::new(1, 1, 1, n), values.clone()).unwrap());
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            let got = back.get(layer, "weight").unwrap().data();
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
