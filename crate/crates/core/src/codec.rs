//! Little-endian byte cursor shared by the `SFK1`, `S24F` and `VNMF` readers.

use crate::error::{Error, Result};

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, header: bool) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(if header {
                Error::TruncatedHeader
            } else {
                Error::TruncatedPayload {
                    expected: n,
                    found: self.remaining(),
                }
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn header_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n, true)
    }

    pub(crate) fn payload_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n, false)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.header_bytes(4)?;
        if m != expected {
            return Err(Error::BadMagic {
                expected: *expected,
                found: [m[0], m[1], m[2], m[3]],
            });
        }
        Ok(())
    }

    pub(crate) fn header_u64(&mut self) -> Result<u64> {
        let b = self.header_bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn header_u32(&mut self) -> Result<u32> {
        let b = self.header_bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    /// Reads `n` little-endian `f64` values as payload.
    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.payload_bytes(checked_bytes(n, 8)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.payload_bytes(checked_bytes(n, 4)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub(crate) fn checked_bytes(count: usize, width: usize) -> Result<usize> {
    count
        .checked_mul(width)
        .ok_or_else(|| Error::Corrupt(format!("element count {count} overflows")))
}

/// `rows * cols` from header fields, rejecting overflow.
pub(crate) fn checked_dims(rows: u64, cols: u64) -> Result<(usize, usize, usize)> {
    let r = usize::try_from(rows).map_err(|_| Error::Corrupt(format!("rows {rows} too large")))?;
    let c = usize::try_from(cols).map_err(|_| Error::Corrupt(format!("cols {cols} too large")))?;
    let n = r
        .checked_mul(c)
        .ok_or_else(|| Error::Corrupt(format!("{rows}x{cols} overflows")))?;
    Ok((r, c, n))
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
