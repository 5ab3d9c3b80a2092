//! Minimal binary tensor container used for extractor weights, whitening
//! transforms and key material.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   : 4 bytes, "LMWT"
//! version : u32       (1 = f32 payload, 2 = f64 payload)
//! count   : u32       number of tensors
//! tensor  : repeated `count` times
//!   name_len : u32
//!   name     : name_len bytes of UTF-8
//!   rank     : u32
//!   dims     : rank × u64
//!   payload  : prod(dims) little-endian floats (width per `version`)
//! ```
//!
//! Version 1 stores values as `f32` and is used for extractor weights, where
//! single precision is the storage contract. Version 2 stores `f64` and is
//! used for keys and whitening transforms, whose unit-norm and orthogonality
//! invariants are tighter than `f32` can represent; loading and re-saving
//! either version is lossless.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMWT";
/// Payload stored as little-endian `f32`.
pub const VERSION_F32: u32 = 1;
/// Payload stored as little-endian `f64`.
pub const VERSION_F64: u32 = 2;

/// A named n-dimensional array. Values are held as `f64` in memory
/// regardless of the on-disk payload width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Self {
        let t = Tensor {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(t.len(), t.data.len() as u64, "dims do not match payload");
        t
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Tensor::new(name, vec![1], vec![value])
    }

    fn len(&self) -> u64 {
        self.dims.iter().product()
    }
}

/// Parsed contents of a container file.
#[derive(Debug, Clone)]
pub struct TensorFile {
    pub version: u32,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::CorruptFile(format!("missing tensor {name:?}")))
    }
}

/// Serialize `tensors` to `path` with the given payload version.
pub fn write_tensors(path: &Path, version: u32, tensors: &[Tensor]) -> Result<()> {
    let bytes = encode(version, tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a container file written by [`write_tensors`].
pub fn read_tensors(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn encode(version: u32, tensors: &[Tensor]) -> Result<Vec<u8>> {
    if version != VERSION_F32 && version != VERSION_F64 {
        return Err(Error::CorruptFile(format!("unknown version {version}")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        if t.len() != t.data.len() as u64 {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?}: dims {:?} imply {} values, payload has {}",
                t.name,
                t.dims,
                t.len(),
                t.data.len()
            )));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match version {
            VERSION_F32 => {
                for &v in &t.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            _ => {
                for &v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION_F32 && version != VERSION_F64 {
        return Err(Error::CorruptFile(format!("unknown version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CorruptFile("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let n = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CorruptFile("tensor size overflow".into()))?;
        let n = usize::try_from(n).map_err(|_| Error::CorruptFile("tensor too large".into()))?;
        let mut data = Vec::with_capacity(n);
        match version {
            VERSION_F32 => {
                for _ in 0..n {
                    data.push(f32::from_le_bytes(r.array()?) as f64);
                }
            }
            _ => {
                for _ in 0..n {
                    data.push(f64::from_le_bytes(r.array()?));
                }
            }
        }
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptFile(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(TensorFile { version, tensors })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptFile("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("take returned N bytes"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor::new("carriers", vec![2, 3], vec![1.0, -0.5, 0.25, 0.0, 2.0, -3.5]),
            Tensor::scalar("kind", 1.0),
        ]
    }

    #[test]
    fn f64_roundtrip_is_bit_identical() {
        let bytes = encode(VERSION_F64, &sample()).unwrap();
        let parsed = decode(&bytes).unwrap();
        assert_eq!(parsed.version, VERSION_F64);
        assert_eq!(parsed.tensors, sample());
        let again = encode(VERSION_F64, &parsed.tensors).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn f32_roundtrip_preserves_f32_exact_values() {
        // Values representable in f32 survive the narrow payload unchanged.
        let bytes = encode(VERSION_F32, &sample()).unwrap();
        let parsed = decode(&bytes).unwrap();
        assert_eq!(parsed.tensors, sample());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode(VERSION_F64, &sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode(VERSION_F64, &sample()).unwrap();
        for cut in [3, 8, 15, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::CorruptFile(_))),
                "cut at {cut} should fail"
            );
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode(VERSION_F64, &sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn missing_tensor_lookup_fails() {
        let bytes = encode(VERSION_F64, &sample()).unwrap();
        let parsed = decode(&bytes).unwrap();
        assert!(parsed.get("carriers").is_some());
        assert!(parsed.require("nope").is_err());
    }
}
