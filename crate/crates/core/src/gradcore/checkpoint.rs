//! Named-tensor container on disk.
//!
//! Layout (little-endian): magic `PFCK`, version u16, config JSON (u32 length
//! + bytes), tensor count u32, then per tensor: name (u16 length + UTF-8),
//! ndim u8, dims as u32, values as f64.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PFCK";
pub const VERSION: u16 = 1;

/// A parameter store plus the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(Error::InvalidInput(format!("tensor {name} cannot be stored")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.shape().len() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let cfg_len = r.u32("config length")? as usize;
        let config = serde_json::from_slice(r.take(cfg_len, "config")?)?;
        let count = r.u32("tensor count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let nlen = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
                .map_err(|_| Error::InvalidInput("tensor name is not UTF-8".into()))?;
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or(Error::Truncated("values"))?, "values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidInput("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            params: ParamStore::from_entries(entries),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.25]).unwrap());
        p.add("b", Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap());
        Checkpoint {
            config: serde_json::json!({"d": 64, "seed": 3}),
            params: p,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.params.digest(), c.params.digest());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 5, 10, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Truncated(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }
}
