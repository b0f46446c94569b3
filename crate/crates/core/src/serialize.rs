//! Binary container for named tensors plus JSON metadata.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32` metadata length
//! and UTF-8 metadata, `u32` block count, then per block a `u32`-prefixed
//! name, `u32` rank, `u64` extents and `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RBLAB\0\0\x01";
pub const VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 16;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: String,
    pub blocks: Vec<(String, Tensor)>,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("container is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn get_string(r: &mut impl Read, limit: usize) -> Result<String> {
    let n = get_u32(r)?;
    if n > limit {
        bail!(Format, "string of {n} bytes exceeds limit {limit}");
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}

impl Container {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self { metadata: metadata.into(), blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.blocks.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u32(w, self.metadata.len())?;
        w.write_all(self.metadata.as_bytes())?;
        put_u32(w, self.blocks.len())?;
        for (name, t) in &self.blocks {
            put_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.ndim())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut bytes = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            bail!(Format, "not a model container (bad magic)");
        }
        let version = get_u32(r)? as u32;
        if version != VERSION {
            bail!(Format, "unsupported container version {version}");
        }
        let metadata = get_string(r, usize::MAX)?;
        let count = get_u32(r)?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let name = get_string(r, MAX_NAME)?;
            let rank = get_u32(r)?;
            if rank > MAX_RANK {
                bail!(Format, "block {name} has rank {rank}");
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = get_u64(r)?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("block {name} is too large")))?;
                shape.push(d as usize);
            }
            let mut bytes = Vec::new();
            r.take(numel * 8).read_to_end(&mut bytes)?;
            if bytes.len() as u64 != numel * 8 {
                bail!(Format, "container is truncated");
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { metadata, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(r#"{"kind":"test"}"#);
        c.push("a", Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, 0.1, -7.5]).unwrap());
        c.push("scalar", Tensor::scalar(std::f64::consts::PI));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for ((n1, t1), (n2, t2)) in c.blocks.iter().zip(&back.blocks) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] ^= 1;
        assert!(matches!(Container::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(Container::read_from(&mut &cut[..]), Err(Error::Format(_))));
        let mut vers = buf.clone();
        vers[8] = 9;
        assert!(Container::read_from(&mut vers.as_slice()).is_err());
    }
}
