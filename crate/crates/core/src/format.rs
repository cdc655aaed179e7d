//! Binary tensor files used for checkpoints, images and map dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "EZVL"
//! u32     version (= 1)
//! u32     entry count
//! entry*: u16 name length, UTF-8 name, u8 ndim, u32 dims[ndim],
//!         f32 payload in row-major order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EZVL";
pub const VERSION: u32 = 1;

/// Named tensors in insertion order. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    entries: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "entry name of {} bytes",
                name.len()
            )));
        }
        if tensor.ndim() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "{}-d tensor",
                tensor.ndim()
            )));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadHeader(format!("magic {magic:?} is not \"EZVL\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::BadHeader(format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut file = TensorFile::new();
        for i in 0..count {
            let len = r.u16("entry name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "entry name")?)
                .map_err(|_| Error::BadHeader(format!("entry {i} name is not UTF-8")))?
                .to_string();
            let ndim = r.take(1, "ndim")?[0] as usize;
            if ndim == 0 {
                return Err(Error::BadHeader(format!(
                    "entry `{name}` has no dimensions"
                )));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.u32("dims")? as usize;
                if d == 0 {
                    return Err(Error::BadHeader(format!(
                        "entry `{name}` has a zero dimension"
                    )));
                }
                shape.push(d);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::BadHeader(format!("entry `{name}` is impossibly large")))?;
            let payload = r.take(n, &format!("payload of `{name}`"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            file.push(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::BadHeader(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
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
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// 8-bit binary PGM of a `[H, W]` map with values in `[0, 1]`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.ndim() != 2 {
        return Err(Error::shape(
            "pgm",
            format!("expected [H, W], got {:?}", map.shape()),
        ));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new();
        f.push(
            "a.weight",
            Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 4.0, 1e-3, 6.0]).unwrap(),
        )
        .unwrap();
        f.push("b", Tensor::from_vec(vec![7.0])).unwrap();
        f
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"EZVL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 8);
        assert_eq!(&bytes[14..22], b"a.weight");
        assert_eq!(bytes[22], 2);
        // 12 header + (2 + 8 + 1 + 8 + 24) + (2 + 1 + 1 + 4 + 4)
        assert_eq!(bytes.len(), 12 + 43 + 12);
    }

    #[test]
    fn truncation_is_typed() {
        let bytes = sample().encode();
        for cut in [0, 3, 7, 11, 13, 20, 30, bytes.len() - 1] {
            match TensorFile::decode(&bytes[..cut]) {
                Err(Error::Truncated(_)) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corrupt_headers_are_typed() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(Error::BadHeader(_))
        ));
        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(Error::BadHeader(_))
        ));
        let mut bytes = sample().encode();
        bytes.push(0);
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(Error::BadHeader(_))
        ));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut f = sample();
        assert!(matches!(
            f.push("b", Tensor::from_vec(vec![1.0])),
            Err(Error::DuplicateName(_))
        ));
        // a hand-built file with a repeated name fails to load
        let mut bytes = sample().encode();
        bytes[8] = 3;
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'b');
        bytes.push(1);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1f32.to_le_bytes());
        assert!(matches!(
            TensorFile::decode(&bytes),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn pgm_header() {
        let m = Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.25]).unwrap();
        let p = encode_pgm(&m).unwrap();
        assert!(p.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&p[p.len() - 6..], &[0, 128, 255, 255, 0, 64]);
    }

    proptest! {
        #[test]
        fn encode_decode_encode_is_stable(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let mut f = TensorFile::new();
            f.push("x", Tensor::from_vec(values.clone())).unwrap();
            let bytes = f.encode();
            let back = TensorFile::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
            for (a, b) in back.require("x").unwrap().data().iter().zip(&values) {
                prop_assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
