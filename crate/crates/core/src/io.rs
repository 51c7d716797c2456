//! `DATN` binary matrix files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"DATN"`                |
//! | 4      | 4    | version, `u32` = 1             |
//! | 8      | 4    | rows, `u32`                    |
//! | 12     | 4    | cols, `u32`                    |
//! | 16     | 1    | precision, 0 = single, 1 = double |
//! | 17     | ..   | row-major values               |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Precision, Scalar};

pub const MAGIC: &[u8; 4] = b"DATN";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 17;

/// A matrix whose precision is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum DynMatrix {
    Single(Matrix<f32>),
    Double(Matrix<f64>),
}

impl DynMatrix {
    pub fn precision(&self) -> Precision {
        match self {
            DynMatrix::Single(_) => Precision::Single,
            DynMatrix::Double(_) => Precision::Double,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            DynMatrix::Single(m) => m.shape(),
            DynMatrix::Double(m) => m.shape(),
        }
    }

    /// Converts to the requested element type, rounding if necessary.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        match self {
            DynMatrix::Single(m) => m.cast(),
            DynMatrix::Double(m) => m.cast(),
        }
    }
}

pub fn encode<T: Scalar>(m: &Matrix<T>) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Format("too many rows".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Format("too many cols".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * T::PRECISION.bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.push(T::PRECISION.code());
    for &v in m.as_slice() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn decode_values<T: Scalar>(rows: usize, cols: usize, body: &[u8]) -> Result<Matrix<T>> {
    let values = body
        .chunks_exact(T::PRECISION.bytes())
        .map(T::read_le)
        .collect();
    Matrix::from_vec(rows, cols, values)
}

pub fn decode(bytes: &[u8]) -> Result<DynMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected DATN".into()));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    let precision = Precision::from_code(bytes[16])
        .ok_or_else(|| Error::Format(format!("unknown precision code {}", bytes[16])))?;
    let body = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(precision.bytes()))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "{rows}x{cols} {precision} needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    Ok(match precision {
        Precision::Single => DynMatrix::Single(decode_values(rows, cols, body)?),
        Precision::Double => DynMatrix::Double(decode_values(rows, cols, body)?),
    })
}

pub fn write_matrix<T: Scalar>(path: impl AsRef<Path>, m: &Matrix<T>) -> Result<()> {
    let bytes = encode(m)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DynMatrix> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let m = Matrix::<f32>::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(
            bytes,
            [
                b'D', b'A', b'T', b'N', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0x80, 0x3f, 0,
                0, 0, 0xc0
            ]
        );
    }

    #[test]
    fn rejects_corrupt_files() {
        let m = Matrix::<f64>::zeros(2, 2);
        let good = encode(&m).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(decode(&bad_version).is_err());

        let mut bad_precision = good.clone();
        bad_precision[16] = 7;
        assert!(decode(&bad_precision).is_err());

        assert!(decode(&good[..good.len() - 1]).is_err());
        assert!(decode(&good[..10]).is_err());

        let mut nan = good.clone();
        nan[17..25].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&nan), Err(Error::NonFinite { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(
            rows in 0usize..6,
            cols in 0usize..6,
            seed in any::<u64>(),
            double in any::<bool>(),
        ) {
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 200.0 - 100.0
            };
            let m = Matrix::<f64>::from_fn(rows, cols, |_, _| next());
            if double {
                let back = decode(&encode(&m).unwrap()).unwrap();
                prop_assert_eq!(back, DynMatrix::Double(m));
            } else {
                let m = m.cast::<f32>();
                let back = decode(&encode(&m).unwrap()).unwrap();
                prop_assert_eq!(back, DynMatrix::Single(m));
            }
        }
    }
}
