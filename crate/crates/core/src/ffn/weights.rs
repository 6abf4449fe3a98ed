//! Effective (sparsified) weights, their packed forms and the pullback of
//! weight gradients through the sparsifiers.

use super::{SparsityPolicy, TransposeMask};
use crate::error::Result;
use crate::exec::Exec;
use crate::matcore::{gemm_with, DenseMatrix};
use crate::sparse24::{
    dense_spmm24_with, rank_group, sparsify24, sparsify24_dense, sparsify24_vjp, spmm24_with,
    SparsifyMode, Sparse24Matrix,
};

/// Packed form of a 2:4-compliant weight.
#[derive(Debug, Clone)]
pub(crate) enum Packing {
    Dense,
    /// Groups along rows of the weight.
    Rows(Sparse24Matrix),
    /// Groups along rows of the transposed weight.
    Cols(Sparse24Matrix),
}

impl Packing {
    pub(crate) fn is_sparse(&self) -> bool {
        !matches!(self, Packing::Dense)
    }
}

/// Lossless packing of an already compliant matrix.
fn pack(a: &DenseMatrix) -> Result<Sparse24Matrix> {
    sparsify24(a, SparsifyMode::GreedyMagnitude)
}

fn sparsify_cols(a: &DenseMatrix, mode: SparsifyMode) -> Result<DenseMatrix> {
    Ok(sparsify24_dense(&a.transpose(), mode)?.transpose())
}

/// One weight after the policy's sparsifiers.
#[derive(Debug, Clone)]
pub(crate) struct EffWeight {
    raw: DenseMatrix,
    rows: bool,
    cols: bool,
    mode: SparsifyMode,
    shared: bool,
    /// Input of the `Wᵀ` sparsifier when it runs after the `W` sparsifier.
    mid: DenseMatrix,
    pub(crate) fwd: DenseMatrix,
    fwd_pack: Packing,
    pub(crate) bwd: DenseMatrix,
    bwd_pack: Packing,
}

impl EffWeight {
    pub(crate) fn new(w: &DenseMatrix, rows: bool, cols: bool, pol: &SparsityPolicy) -> Result<Self> {
        let (rows, cols) = if pol.all_keep { (false, false) } else { (rows, cols) };
        let mode = pol.weight_mode;
        let shared = pol.transpose_mask == TransposeMask::Shared;
        let mid = if rows { sparsify24_dense(w, mode)? } else { w.clone() };
        let (fwd, fwd_pack, bwd, bwd_pack);
        if shared {
            let eff = if cols { sparsify_cols(&mid, mode)? } else { mid.clone() };
            let p = if rows {
                Packing::Rows(pack(&eff)?)
            } else if cols {
                Packing::Cols(pack(&eff.transpose())?)
            } else {
                Packing::Dense
            };
            fwd = eff.clone();
            bwd = eff;
            fwd_pack = p.clone();
            bwd_pack = p;
        } else {
            fwd_pack = if rows { Packing::Rows(pack(&mid)?) } else { Packing::Dense };
            fwd = mid.clone();
            if cols {
                bwd = sparsify_cols(w, mode)?;
                bwd_pack = Packing::Cols(pack(&bwd.transpose())?);
            } else {
                bwd = fwd.clone();
                bwd_pack = fwd_pack.clone();
            }
        }
        Ok(Self {
            raw: w.clone(),
            rows,
            cols,
            mode,
            shared,
            mid,
            fwd,
            fwd_pack,
            bwd,
            bwd_pack,
        })
    }

    pub(crate) fn fwd_sparse(&self) -> bool {
        self.fwd_pack.is_sparse()
    }

    pub(crate) fn bwd_sparse(&self) -> bool {
        self.bwd_pack.is_sparse()
    }

    /// `a · fwd`.
    pub(crate) fn mul(&self, a: &DenseMatrix, exec: Exec) -> Result<(DenseMatrix, u64)> {
        match &self.fwd_pack {
            Packing::Dense => gemm_with(a, &self.fwd, exec),
            Packing::Rows(s) => dense_spmm24_with(a, s, exec),
            Packing::Cols(st) => {
                let (c, n) = spmm24_with(st, &a.transpose(), exec)?;
                Ok((c.transpose(), n))
            }
        }
    }

    /// `a · bwdᵀ`.
    pub(crate) fn mul_t(&self, a: &DenseMatrix, exec: Exec) -> Result<(DenseMatrix, u64)> {
        match &self.bwd_pack {
            Packing::Dense => gemm_with(a, &self.bwd.transpose(), exec),
            Packing::Cols(st) => dense_spmm24_with(a, st, exec),
            Packing::Rows(s) => {
                let (c, n) = spmm24_with(s, &a.transpose(), exec)?;
                Ok((c.transpose(), n))
            }
        }
    }

    /// Pulls a gradient on the effective weight back to the raw weight.
    pub(crate) fn pullback(&self, g: &DenseMatrix) -> Result<DenseMatrix> {
        let mut g = g.clone();
        if self.shared && self.cols {
            g = sparsify24_vjp(&self.mid.transpose(), self.mode, &g.transpose())?.transpose();
        }
        if self.rows {
            g = sparsify24_vjp(&self.raw, self.mode, &g)?;
        }
        Ok(g)
    }

    /// Per-group magnitude order and signs at every sparsifier input. The
    /// effective weight is smooth in the raw weight while this is constant.
    pub(crate) fn signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        if self.rows {
            push_signature(&self.raw, &mut sig);
        }
        if self.cols {
            let input = if self.shared { &self.mid } else { &self.raw };
            push_signature(&input.transpose(), &mut sig);
        }
        sig
    }
}

fn push_signature(a: &DenseMatrix, out: &mut Vec<u8>) {
    for g in a.data().chunks_exact(4) {
        let g: [f64; 4] = g.try_into().unwrap();
        out.extend(rank_group(&g).iter().map(|&i| i as u8));
        out.extend(g.iter().map(|v| (v.partial_cmp(&0.0).unwrap() as i8 + 1) as u8));
    }
}
