use super::DenseMatrix;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Dense product `a · b`.
///
/// Each output element is accumulated left to right over the shared index,
/// starting from `0.0`, so results are identical across runs and across
/// [`Exec`] strategies.
pub fn gemm(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm_with(a, b, Exec::default()).map(|(c, _)| c)
}

/// [`gemm`] plus the number of scalar multiplies performed.
pub fn gemm_counted(a: &DenseMatrix, b: &DenseMatrix) -> Result<(DenseMatrix, u64)> {
    gemm_with(a, b, Exec::default())
}

pub fn gemm_with(a: &DenseMatrix, b: &DenseMatrix, exec: Exec) -> Result<(DenseMatrix, u64)> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "gemm",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseMatrix::zeros(m, n);
    let bd = b.data();
    let count = exec.for_each_row_counted(out.data_mut(), n, |i, crow| {
        let arow = a.row(i);
        let mut mults = 0u64;
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
            mults += n as u64;
        }
        mults
    });
    debug_assert_eq!(count, (m * k * n) as u64);
    Ok((out, count))
}
