//! FVEC: a little-endian dense `f32` matrix.
//!
//! ```text
//! offset  size  field
//! 0       5     magic "FVEC1"
//! 5       1     pad (0)
//! 6       4     rows (u32)
//! 10      4     cols (u32)
//! 14      4·n   rows·cols f32, row-major
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FVEC_MAGIC: &[u8; 5] = b"FVEC1";
pub const FVEC_HEADER_LEN: usize = 14;

/// Encodes `m` as FVEC bytes. Rejects empty or non-finite matrices.
pub fn encode_fvec(m: &Matrix<f32>) -> Result<Vec<u8>> {
    m.validate()?;
    let mut out = Vec::with_capacity(FVEC_HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(FVEC_MAGIC);
    out.push(0);
    out.extend_from_slice(&to_u32(m.rows())?.to_le_bytes());
    out.extend_from_slice(&to_u32(m.cols())?.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Shape(format!("dimension {n} exceeds u32")))
}

/// Parses the header, returning `(rows, cols)`.
fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < 6 || &bytes[..5] != FVEC_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "FVEC1",
        });
    }
    if bytes.len() < FVEC_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!(
                "header needs {FVEC_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok((rows, cols))
}

pub fn decode_fvec(bytes: &[u8], path: &Path) -> Result<Matrix<f32>> {
    let (rows, cols) = parse_header(bytes, path)?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FVEC_HEADER_LEN))
        .ok_or_else(|| Error::Shape(format!("{rows}x{cols} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!(
                "{rows}x{cols} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        });
    }
    let data: Vec<f32> = bytes[FVEC_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Matrix::new(rows, cols, data)?;
    m.validate()?;
    Ok(m)
}

pub fn read_fvec(path: impl AsRef<Path>) -> Result<Matrix<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fvec(&bytes, path)
}

/// Reads only the header, returning `(rows, cols)`.
pub fn read_fvec_shape(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::with_capacity(FVEC_HEADER_LEN);
    Read::by_ref(&mut file)
        .take(FVEC_HEADER_LEN as u64)
        .read_to_end(&mut header)
        .map_err(|e| Error::io(path, e))?;
    let (rows, cols) = parse_header(&header, path)?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    if len != FVEC_HEADER_LEN + 4 * rows * cols {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{rows}x{cols} declared, file has {len} bytes"),
        });
    }
    Ok((rows, cols))
}

pub fn write_fvec(path: impl AsRef<Path>, m: &Matrix<f32>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_fvec(m)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_matrix_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fvec");
        let m = Matrix::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        write_fvec(&path, &m).unwrap();
        assert_eq!(read_fvec(&path).unwrap(), m);
        assert_eq!(read_fvec_shape(&path).unwrap(), (2, 3));

        let id = Matrix::new(2, 2, vec![1., 0., 0., 1.]).unwrap();
        write_fvec(&path, &id).unwrap();
        assert_eq!(read_fvec(&path).unwrap(), id);
    }

    #[test]
    fn one_by_one_is_eighteen_bytes() {
        let bytes = encode_fvec(&Matrix::new(1, 1, vec![0.0]).unwrap()).unwrap();
        assert_eq!(bytes.len(), 18);
        assert_eq!(&bytes[..6], b"FVEC1\0");
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Path::new("x.fvec");
        let mut bytes = encode_fvec(&Matrix::new(2, 2, vec![1., 2., 3., 4.]).unwrap()).unwrap();
        assert!(matches!(
            decode_fvec(&bytes[..20], p),
            Err(Error::Truncated { .. })
        ));
        bytes[0] = b'G';
        assert!(matches!(
            decode_fvec(&bytes, p),
            Err(Error::BadMagic { .. })
        ));

        let mut empty = b"FVEC1\0".to_vec();
        empty.extend_from_slice(&0u32.to_le_bytes());
        empty.extend_from_slice(&3u32.to_le_bytes());
        let err = decode_fvec(&empty, p).unwrap_err();
        assert_eq!(err.to_string(), "empty matrix");

        let mut nan = encode_fvec(&Matrix::new(2, 1, vec![1., 2.]).unwrap()).unwrap();
        nan[18..22].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_fvec(&nan, p),
            Err(Error::NonFinite { row: 1, .. })
        ));

        let with_nan = Matrix::new(1, 2, vec![0.0, f32::NAN]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.fvec");
        assert!(write_fvec(&path, &with_nan).is_err());
        assert!(!path.exists());

        assert!(matches!(
            read_fvec(dir.path().join("missing.fvec")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn encode_decode_identity(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols).map(|_| rng.random::<f32>() * 200.0 - 100.0).collect();
            let m = Matrix::new(rows, cols, data).unwrap();
            let bytes = encode_fvec(&m).unwrap();
            let back = decode_fvec(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(encode_fvec(&back).unwrap(), bytes);
            prop_assert_eq!(back, m);
        }
    }
}
