use super::VenomParams;
use crate::error::{Error, Result};
use crate::matcore::DenseMatrix;
use crate::sparse24::{sparsify24, SparsifyMode, Sparse24Matrix};

/// Matrix in V:N:M format.
///
/// `col_table` holds four strictly increasing in-block column offsets per
/// block, blocks ordered block-row-major. `payload` is the 2:4-packed matrix
/// of the retained strips, shape `rows × (cols / M) * 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct VenomMatrix {
    rows: usize,
    cols: usize,
    params: VenomParams,
    col_table: Vec<[u8; 4]>,
    payload: Sparse24Matrix,
}

fn check_shape(rows: usize, cols: usize, p: &VenomParams) -> Result<()> {
    if rows % p.v() != 0 {
        return Err(Error::NotDivisible {
            what: "rows",
            value: rows,
            by: p.v(),
        });
    }
    if cols % p.m() != 0 {
        return Err(Error::NotDivisible {
            what: "columns",
            value: cols,
            by: p.m(),
        });
    }
    Ok(())
}

/// Top four columns of a block by L1 norm, ties to the lower offset,
/// returned in ascending order.
pub(crate) fn top4_by_l1(norms: &[f64]) -> [u8; 4] {
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut top = [idx[0] as u8, idx[1] as u8, idx[2] as u8, idx[3] as u8];
    top.sort_unstable();
    top
}

impl VenomMatrix {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        params: VenomParams,
        col_table: Vec<[u8; 4]>,
        payload: Sparse24Matrix,
    ) -> Result<Self> {
        check_shape(rows, cols, &params)?;
        let nb = cols / params.m();
        let blocks = (rows / params.v()) * nb;
        if col_table.len() != blocks {
            return Err(Error::Corrupt(format!(
                "{} column-table entries for {blocks} blocks",
                col_table.len()
            )));
        }
        for (b, t) in col_table.iter().enumerate() {
            let increasing = t.windows(2).all(|w| w[0] < w[1]);
            if !increasing || t[3] as usize >= params.m() {
                return Err(Error::Corrupt(format!(
                    "column table of block ({}, {}) is invalid: {t:?}",
                    b / nb.max(1),
                    b % nb.max(1)
                )));
            }
        }
        if payload.shape() != (rows, nb * 4) {
            return Err(Error::Corrupt(format!(
                "payload shape {:?}, expected {:?}",
                payload.shape(),
                (rows, nb * 4)
            )));
        }
        Ok(Self {
            rows,
            cols,
            params,
            col_table,
            payload,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn params(&self) -> VenomParams {
        self.params
    }

    pub fn col_table(&self) -> &[[u8; 4]] {
        &self.col_table
    }

    pub fn payload(&self) -> &Sparse24Matrix {
        &self.payload
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / self.params.m()
    }

    /// Retained column offsets of block `(block_row, block_col)`.
    pub fn table(&self, block_row: usize, block_col: usize) -> [u8; 4] {
        self.col_table[block_row * self.blocks_per_row() + block_col]
    }

    /// Logical column of payload slot `k`.
    #[inline]
    pub(crate) fn slot_col(&self, k: usize) -> usize {
        let nb = self.blocks_per_row();
        let row = k / (2 * nb);
        let bc = (k % (2 * nb)) / 2;
        let t = self.col_table[(row / self.params.v()) * nb + bc];
        bc * self.params.m() + t[self.payload.slot(k)] as usize
    }

    /// Encodes `a` using caller-chosen retained columns per block.
    pub(crate) fn encode_with_tables(
        a: &DenseMatrix,
        params: VenomParams,
        col_table: Vec<[u8; 4]>,
    ) -> Result<Self> {
        check_shape(a.rows(), a.cols(), &params)?;
        let nb = a.cols() / params.m();
        let strips = DenseMatrix::from_fn(a.rows(), nb * 4, |r, c| {
            let (bc, s) = (c / 4, c % 4);
            let t = col_table[(r / params.v()) * nb + bc];
            a.get(r, bc * params.m() + t[s] as usize)
        });
        let payload = sparsify24(&strips, SparsifyMode::GreedyMagnitude)?;
        Self::from_parts(a.rows(), a.cols(), params, col_table, payload)
    }

    pub fn decode(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        let per_row = 2 * self.blocks_per_row();
        let cols = self.cols;
        let data = out.data_mut();
        for (k, &v) in self.payload.values().iter().enumerate() {
            let r = k / per_row.max(1);
            data[r * cols + self.slot_col(k)] = v;
        }
        out
    }

    /// 0/1 matrix marking payload slots.
    pub fn kept_mask(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        let per_row = 2 * self.blocks_per_row();
        let cols = self.cols;
        let data = out.data_mut();
        for k in 0..self.payload.values().len() {
            data[(k / per_row.max(1)) * cols + self.slot_col(k)] = 1.0;
        }
        out
    }

    /// Same column tables and 2:4 pattern, values read from `dense`.
    pub fn with_values_from(&self, dense: &DenseMatrix) -> Result<Self> {
        if dense.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                op: "venom with_values_from",
                left: self.shape(),
                right: dense.shape(),
            });
        }
        let per_row = 2 * self.blocks_per_row();
        let strips = DenseMatrix::from_fn(self.rows, self.payload.cols(), |r, c| {
            // Only kept slots are read back below, so positions outside the
            // pattern may hold anything.
            let bc = c / 4;
            let t = self.table(r / self.params.v(), bc);
            dense.get(r, bc * self.params.m() + t[c % 4] as usize)
        });
        debug_assert_eq!(self.payload.values().len(), self.rows * per_row);
        Ok(Self {
            payload: self.payload.with_values_from(&strips)?,
            ..self.clone()
        })
    }
}

/// Encodes `a`, retaining per block the four columns with the largest L1
/// norm (ties to the lower offset; an all-zero block keeps `{0, 1, 2, 3}`)
/// and 2:4-pruning the retained strips by greedy magnitude.
pub fn venom_encode(a: &DenseMatrix, p: VenomParams) -> Result<VenomMatrix> {
    check_shape(a.rows(), a.cols(), &p)?;
    let (v, m) = (p.v(), p.m());
    let nb = a.cols() / m;
    let mut tables = Vec::with_capacity((a.rows() / v) * nb);
    let mut norms = vec![0.0; m];
    for br in 0..a.rows() / v {
        for bc in 0..nb {
            norms.fill(0.0);
            for r in br * v..(br + 1) * v {
                for (j, n) in norms.iter_mut().enumerate() {
                    *n += a.get(r, bc * m + j).abs();
                }
            }
            tables.push(top4_by_l1(&norms));
        }
    }
    VenomMatrix::encode_with_tables(a, p, tables)
}

pub fn venom_decode(v: &VenomMatrix) -> DenseMatrix {
    v.decode()
}

/// True iff every `V×M` block has its nonzeros in at most four columns and
/// every four-wide row group of those columns holds at most two nonzeros.
pub fn venom_check(a: &DenseMatrix, p: &VenomParams) -> Result<bool> {
    check_shape(a.rows(), a.cols(), p)?;
    let (v, m) = (p.v(), p.m());
    let mut used = Vec::with_capacity(m);
    for br in 0..a.rows() / v {
        for bc in 0..a.cols() / m {
            used.clear();
            used.extend((0..m).filter(|&j| (br * v..(br + 1) * v).any(|r| a.get(r, bc * m + j) != 0.0)));
            if used.len() > 4 {
                return Ok(false);
            }
            // Pad to four columns the same way the encoder does; any padding
            // column is all-zero so the 2:4 count is unaffected.
            for r in br * v..(br + 1) * v {
                let nz = used.iter().filter(|&&j| a.get(r, bc * m + j) != 0.0).count();
                if nz > 2 {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}
