//! `SFK1` dense matrix files.
//!
//! Layout: magic `SFK1`, one dtype byte (1 = f32, 2 = f64), three zero
//! bytes, `u64` rows, `u64` cols, then `rows*cols` row-major little-endian
//! values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::codec::{checked_dims, put_f64s, Cursor};
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"SFK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }
}

/// Serializes `m` to bytes. With [`Dtype::F32`] values are rounded to the
/// nearest `f32`.
pub fn write_matrix(m: &DenseMatrix, dtype: Dtype) -> Vec<u8> {
    let width = if dtype == Dtype::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(24 + m.len() * width);
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    match dtype {
        Dtype::F64 => put_f64s(&mut out, m.data()),
        Dtype::F32 => {
            for v in m.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Parses an `SFK1` byte buffer, returning the matrix and its stored dtype.
pub fn read_matrix(bytes: &[u8]) -> Result<(DenseMatrix, Dtype)> {
    let mut cur = Cursor::new(bytes);
    let (m, dtype) = read_from(&mut cur)?;
    if cur.remaining() != 0 {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after matrix payload",
            cur.remaining()
        )));
    }
    Ok((m, dtype))
}

pub(crate) fn read_from(cur: &mut Cursor<'_>) -> Result<(DenseMatrix, Dtype)> {
    cur.magic(MAGIC)?;
    let head = cur.header_bytes(4)?;
    let dtype = Dtype::from_code(head[0])?;
    if head[1..] != [0, 0, 0] {
        return Err(Error::Corrupt("reserved header bytes are not zero".into()));
    }
    let (rows, cols, n) = checked_dims(cur.header_u64()?, cur.header_u64()?)?;
    let data = match dtype {
        Dtype::F64 => cur.f64s(n)?,
        Dtype::F32 => cur.f32s(n)?.into_iter().map(f64::from).collect(),
    };
    Ok((DenseMatrix::new(rows, cols, data)?, dtype))
}

pub fn save_matrix(m: &DenseMatrix, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    fs::write(path, write_matrix(m, dtype))?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let bytes = fs::read(path)?;
    read_matrix(&bytes).map(|(m, _)| m)
}
