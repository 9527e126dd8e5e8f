//! CKPT1: named `f32` tensors plus the configuration text that produced them.
//!
//! ```text
//! "CKPT1" 0x00
//! u32 config length, config bytes (UTF-8)
//! u32 tensor count
//! per tensor: u16 name length, name bytes, u8 ndim, u32 dims[ndim], f32 data
//! ```
//!
//! All integers and floats are little-endian. Tensors are written with
//! `ndim = 2`; `ndim = 1` is accepted on read and loaded as a `1 × n` matrix.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    /// Tensors in file order.
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Matrix<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Errors unless names and shapes equal `expected`, in any order.
    pub fn check_shapes(&self, expected: &[(String, (usize, usize))]) -> Result<()> {
        if self.tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, checkpoint holds {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(m) if m.shape() != *shape => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} is {}x{}, configuration expects {}x{}",
                        m.rows(),
                        m.cols(),
                        shape.0,
                        shape.1
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.tensors.is_empty() {
            return Err(Error::NoParameters);
        }
        let mut names = HashSet::new();
        for (name, m) in &self.tensors {
            if !names.insert(name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
            if name.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
            }
            m.validate()
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.push(0);
        let cfg = self.config_echo.as_bytes();
        out.extend_from_slice(&len_u32(cfg.len())?.to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            out.extend_from_slice(&len_u32(m.rows())?.to_le_bytes());
            out.extend_from_slice(&len_u32(m.cols())?.to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(6)? != b"CKPT1\0" {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "CKPT1",
            });
        }
        let cfg_len = r.u32()? as usize;
        let config_echo = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("configuration text is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let (rows, cols) = match r.take(1)?[0] {
                1 => (1, r.u32()? as usize),
                2 => (r.u32()? as usize, r.u32()? as usize),
                n => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: unsupported ndim {n}"
                    )))
                }
            };
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflows")))?;
            let data = r
                .take(n.checked_mul(4).unwrap_or(usize::MAX))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Matrix::new(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let ckpt = Checkpoint {
            config_echo,
            tensors,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("wanted {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.encode()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}
