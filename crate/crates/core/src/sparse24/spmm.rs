//! Reference 2:4 kernels. Inner loops touch kept slots only and report the
//! number of scalar multiplies they performed.

use super::Sparse24Matrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matcore::DenseMatrix;

/// `decode(a) · b`, iterating kept slots of `a`.
pub fn spmm24(a: &Sparse24Matrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    spmm24_with(a, b, Exec::default()).map(|(c, _)| c)
}

pub fn spmm24_counted(a: &Sparse24Matrix, b: &DenseMatrix) -> Result<(DenseMatrix, u64)> {
    spmm24_with(a, b, Exec::default())
}

pub fn spmm24_with(a: &Sparse24Matrix, b: &DenseMatrix, exec: Exec) -> Result<(DenseMatrix, u64)> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "spmm24",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = b.cols();
    let per_row = a.cols() / 2;
    let mut out = DenseMatrix::zeros(a.rows(), n);
    let (vals, bd) = (a.values(), b.data());
    let count = exec.for_each_row_counted(out.data_mut(), n, |i, crow| {
        let mut mults = 0u64;
        for k in i * per_row..(i + 1) * per_row {
            let v = vals[k];
            let col = a.slot_col(k);
            let brow = &bd[col * n..(col + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += v * bv;
            }
            mults += n as u64;
        }
        mults
    });
    Ok((out, count))
}

/// `a · decode(s)` with the sparse operand on the right.
pub fn dense_spmm24(a: &DenseMatrix, s: &Sparse24Matrix) -> Result<(DenseMatrix, u64)> {
    dense_spmm24_with(a, s, Exec::default())
}

pub fn dense_spmm24_with(a: &DenseMatrix, s: &Sparse24Matrix, exec: Exec) -> Result<(DenseMatrix, u64)> {
    if a.cols() != s.rows() {
        return Err(Error::ShapeMismatch {
            op: "dense_spmm24",
            left: a.shape(),
            right: s.shape(),
        });
    }
    let n = s.cols();
    let per_row = n / 2;
    let vals = s.values();
    let mut out = DenseMatrix::zeros(a.rows(), n);
    let count = exec.for_each_row_counted(out.data_mut(), n, |i, crow| {
        let mut mults = 0u64;
        for (p, &av) in a.row(i).iter().enumerate() {
            for k in p * per_row..(p + 1) * per_row {
                crow[s.slot_col(k)] += av * vals[k];
            }
            mults += per_row as u64;
        }
        mults
    });
    Ok((out, count))
}

/// `decode(s)ᵀ · b`, for products whose sparse operand is a transposed
/// activation.
pub fn spmm24_t(s: &Sparse24Matrix, b: &DenseMatrix) -> Result<(DenseMatrix, u64)> {
    if s.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "spmm24_t",
            left: (s.cols(), s.rows()),
            right: b.shape(),
        });
    }
    let (ct, count) = dense_spmm24(&b.transpose(), s)?;
    Ok((ct.transpose(), count))
}
