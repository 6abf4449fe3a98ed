//! `S24F` packed files: magic, `u64` rows, `u64` cols, `rows*cols/2`
//! little-endian `f64` values, then the packed 2-bit meta block.

use super::packed::{meta_len, Sparse24Matrix};
use crate::codec::{checked_dims, put_f64s, Cursor};
use crate::error::{Error, Result};

pub(crate) const MAGIC: &[u8; 4] = b"S24F";

pub fn write_s24(s: &Sparse24Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + s.values().len() * 8 + s.meta().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(s.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(s.cols() as u64).to_le_bytes());
    put_f64s(&mut out, s.values());
    out.extend_from_slice(s.meta());
    out
}

pub fn read_s24(bytes: &[u8]) -> Result<Sparse24Matrix> {
    let mut cur = Cursor::new(bytes);
    let s = read_from(&mut cur)?;
    if cur.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes", cur.remaining())));
    }
    Ok(s)
}

pub(crate) fn read_from(cur: &mut Cursor<'_>) -> Result<Sparse24Matrix> {
    cur.magic(MAGIC)?;
    let (rows, cols, n) = checked_dims(cur.header_u64()?, cur.header_u64()?)?;
    if cols % 4 != 0 {
        return Err(Error::NotDivisible {
            what: "columns",
            value: cols,
            by: 4,
        });
    }
    let values = cur.f64s(n / 2)?;
    let meta = cur.payload_bytes(meta_len(n / 2))?.to_vec();
    Sparse24Matrix::from_parts(rows, cols, values, meta)
}
