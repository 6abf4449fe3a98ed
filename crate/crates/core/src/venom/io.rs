//! `VNMF` files: magic, `u64` rows, `u64` cols, `u32` V, N, M, the column
//! table (four `u8` offsets per block, block-row-major), then the payload as
//! an embedded `S24F` record.

use super::{VenomMatrix, VenomParams};
use crate::codec::{checked_dims, Cursor};
use crate::error::{Error, Result};
use crate::sparse24::write_s24;

const MAGIC: &[u8; 4] = b"VNMF";

pub fn write_venom(v: &VenomMatrix) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(v.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(v.cols() as u64).to_le_bytes());
    let p = v.params();
    for x in [p.v(), p.n(), p.m()] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for t in v.col_table() {
        out.extend_from_slice(t);
    }
    out.extend_from_slice(&write_s24(v.payload()));
    out
}

pub fn read_venom(bytes: &[u8]) -> Result<VenomMatrix> {
    let mut cur = Cursor::new(bytes);
    cur.magic(MAGIC)?;
    let (rows, cols, _) = checked_dims(cur.header_u64()?, cur.header_u64()?)?;
    let (v, n, m) = (cur.header_u32()?, cur.header_u32()?, cur.header_u32()?);
    let params = VenomParams::new(v as usize, n as usize, m as usize)?;
    if rows % params.v() != 0 || cols % params.m() != 0 {
        return Err(Error::Corrupt(format!(
            "{rows}x{cols} is not tiled by V={v}, M={m}"
        )));
    }
    let blocks = (rows / params.v()) * (cols / params.m());
    let table = cur.payload_bytes(blocks * 4)?;
    let col_table = table
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let payload = crate::sparse24::io_read_from(&mut cur)?;
    if cur.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes", cur.remaining())));
    }
    VenomMatrix::from_parts(rows, cols, params, col_table, payload)
}
