//! Reference V:N:M kernels iterating payload slots only.

use super::VenomMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matcore::DenseMatrix;

/// `decode(v) · b`. Performs `rows * (cols * N / M) * b.cols` multiplies.
pub fn venom_spmm(v: &VenomMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    venom_spmm_with(v, b, Exec::default()).map(|(c, _)| c)
}

pub fn venom_spmm_counted(v: &VenomMatrix, b: &DenseMatrix) -> Result<(DenseMatrix, u64)> {
    venom_spmm_with(v, b, Exec::default())
}

pub fn venom_spmm_with(v: &VenomMatrix, b: &DenseMatrix, exec: Exec) -> Result<(DenseMatrix, u64)> {
    if v.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "venom_spmm",
            left: v.shape(),
            right: b.shape(),
        });
    }
    let n = b.cols();
    let per_row = 2 * v.blocks_per_row();
    let vals = v.payload().values();
    let bd = b.data();
    let mut out = DenseMatrix::zeros(v.rows(), n);
    let count = exec.for_each_row_counted(out.data_mut(), n, |i, crow| {
        let mut mults = 0u64;
        for k in i * per_row..(i + 1) * per_row {
            let (val, col) = (vals[k], v.slot_col(k));
            for (c, &bv) in crow.iter_mut().zip(&bd[col * n..(col + 1) * n]) {
                *c += val * bv;
            }
            mults += n as u64;
        }
        mults
    });
    Ok((out, count))
}

/// `a · decode(v)` with the Venom operand on the right.
pub fn dense_venom_spmm(a: &DenseMatrix, v: &VenomMatrix) -> Result<(DenseMatrix, u64)> {
    if a.cols() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "dense_venom_spmm",
            left: a.shape(),
            right: v.shape(),
        });
    }
    let n = v.cols();
    let per_row = 2 * v.blocks_per_row();
    let vals = v.payload().values();
    let mut out = DenseMatrix::zeros(a.rows(), n);
    let count = Exec::default().for_each_row_counted(out.data_mut(), n, |i, crow| {
        let mut mults = 0u64;
        for (r, &av) in a.row(i).iter().enumerate() {
            for k in r * per_row..(r + 1) * per_row {
                crow[v.slot_col(k)] += av * vals[k];
            }
            mults += per_row as u64;
        }
        mults
    });
    Ok((out, count))
}

/// `decode(v)ᵀ · b`.
pub fn venom_spmm_t(v: &VenomMatrix, b: &DenseMatrix) -> Result<(DenseMatrix, u64)> {
    if v.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "venom_spmm_t",
            left: (v.cols(), v.rows()),
            right: b.shape(),
        });
    }
    let (ct, count) = dense_venom_spmm(&b.transpose(), v)?;
    Ok((ct.transpose(), count))
}

#[cfg(test)]
mod tests {
    use super::super::{venom_encode, VenomParams};
    use super::*;
    use crate::matcore::{gemm, rand_matrix, Dist};

    #[test]
    fn identity_recovers_decode() {
        let a = rand_matrix(4, 16, 1, Dist::Normal).unwrap();
        let v = venom_encode(&a, VenomParams::new(2, 2, 8).unwrap()).unwrap();
        assert!(venom_spmm(&v, &DenseMatrix::identity(16)).unwrap().bit_eq(&v.decode()));
    }

    #[test]
    fn matches_decode_gemm_and_counts() {
        let p = VenomParams::new(64, 2, 16).unwrap();
        let a = rand_matrix(64, 64, 2, Dist::Normal).unwrap();
        let b = rand_matrix(64, 8, 3, Dist::Normal).unwrap();
        let v = venom_encode(&a, p).unwrap();
        let (c, count) = venom_spmm_counted(&v, &b).unwrap();
        assert!(c.max_abs_diff(&gemm(&v.decode(), &b).unwrap()) <= 1e-10);
        assert_eq!(count, 4096);
        assert_eq!(count * 8, 64 * 64 * 8);
    }

    #[test]
    fn transposed_and_right_variants() {
        let p = VenomParams::new(2, 2, 8).unwrap();
        let v = venom_encode(&rand_matrix(6, 16, 4, Dist::Normal).unwrap(), p).unwrap();
        let x = rand_matrix(3, 6, 5, Dist::Normal).unwrap();
        let (c, _) = dense_venom_spmm(&x, &v).unwrap();
        assert!(c.max_abs_diff(&gemm(&x, &v.decode()).unwrap()) <= 1e-10);
        let b = rand_matrix(6, 5, 6, Dist::Normal).unwrap();
        let (ct, count) = venom_spmm_t(&v, &b).unwrap();
        assert!(ct.max_abs_diff(&gemm(&v.decode().transpose(), &b).unwrap()) <= 1e-10);
        assert_eq!(count, 5 * 6 * 4);
    }
}
