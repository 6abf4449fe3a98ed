//! 2:4 semi-structured sparsity.
//!
//! Groups are four consecutive columns of a row. Two sparsifiers are
//! provided: soft thresholding, which shrinks every element of a group by
//! the group's second-smallest magnitude and is continuous in its input, and
//! greedy magnitude pruning, which keeps the two largest magnitudes
//! unchanged.

mod io;
mod packed;
mod spmm;

pub use io::{read_s24, write_s24};
pub use packed::Sparse24Matrix;
pub use spmm::{dense_spmm24, dense_spmm24_with, spmm24, spmm24_counted, spmm24_t, spmm24_with};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifyMode {
    #[default]
    SoftThreshold,
    GreedyMagnitude,
}

/// Group indices ordered by magnitude, largest first; equal magnitudes keep
/// ascending index order.
pub fn rank_group(g: &[f64; 4]) -> [usize; 4] {
    let mut idx = [0, 1, 2, 3];
    idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
    idx
}

/// The two slots a group keeps, in ascending index order.
pub fn kept_slots(g: &[f64; 4]) -> [usize; 2] {
    let r = rank_group(g);
    if r[0] < r[1] {
        [r[0], r[1]]
    } else {
        [r[1], r[0]]
    }
}

/// Soft thresholding of one 4-group.
///
/// With `t` the second-smallest magnitude, `x > t` maps to `x - t`,
/// `x` in `(-t, t]` maps to zero and `x <= -t` maps to `x + t`.
pub fn soft_threshold_group(g: [f64; 4]) -> [f64; 4] {
    let t = g[rank_group(&g)[2]].abs();
    g.map(|x| shrink(x, t))
}

#[inline]
fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x > -t {
        0.0
    } else {
        x + t
    }
}

/// Greedy magnitude pruning of one 4-group: the top two magnitudes survive
/// unchanged.
pub fn greedy_group(g: [f64; 4]) -> [f64; 4] {
    let [a, b] = kept_slots(&g);
    let mut out = [0.0; 4];
    out[a] = g[a];
    out[b] = g[b];
    out
}

/// Vector-Jacobian product of [`soft_threshold_group`] at `g`.
///
/// Off ties the map is piecewise linear: each survivor has unit slope in
/// itself and slope `-sign(x_i) * sign(x_t)` in the element `x_t` that sets
/// the threshold.
pub fn soft_threshold_group_vjp(g: [f64; 4], upstream: [f64; 4]) -> [f64; 4] {
    let rank = rank_group(&g);
    let tidx = rank[2];
    let t = g[tidx].abs();
    let mut grad = [0.0; 4];
    let mut coupling = 0.0;
    for &i in &rank[..2] {
        if g[i].abs() > t {
            grad[i] += upstream[i];
            coupling += g[i].signum() * upstream[i];
        }
    }
    if g[tidx] != 0.0 {
        grad[tidx] -= g[tidx].signum() * coupling;
    }
    grad
}

/// Vector-Jacobian product of [`greedy_group`]: the upstream gradient passes
/// through kept slots only.
pub fn greedy_group_vjp(g: [f64; 4], upstream: [f64; 4]) -> [f64; 4] {
    let [a, b] = kept_slots(&g);
    let mut grad = [0.0; 4];
    grad[a] = upstream[a];
    grad[b] = upstream[b];
    grad
}

fn check_cols(a: &DenseMatrix) -> Result<()> {
    if a.cols() % 4 != 0 {
        return Err(Error::NotDivisible {
            what: "columns",
            value: a.cols(),
            by: 4,
        });
    }
    Ok(())
}

fn group_of(row: &[f64], g: usize) -> [f64; 4] {
    row[4 * g..4 * g + 4].try_into().unwrap()
}

/// Sparsifies each row-group of `a` and packs the result.
pub fn sparsify24(a: &DenseMatrix, mode: SparsifyMode) -> Result<Sparse24Matrix> {
    check_cols(a)?;
    let groups = a.cols() / 4;
    let mut values = Vec::with_capacity(a.len() / 2);
    let mut slots = Vec::with_capacity(a.len() / 2);
    for r in 0..a.rows() {
        let row = a.row(r);
        for gi in 0..groups {
            let g = group_of(row, gi);
            let kept = kept_slots(&g);
            let out = match mode {
                SparsifyMode::SoftThreshold => soft_threshold_group(g),
                SparsifyMode::GreedyMagnitude => g,
            };
            for k in kept {
                values.push(out[k]);
                slots.push(k as u8);
            }
        }
    }
    Ok(Sparse24Matrix::from_slots(a.rows(), a.cols(), values, &slots))
}

/// `sparsify24(aᵀ)`: groups run down the columns of `a`.
///
/// The mask of `aᵀ` is in general not the transpose of the mask of `a`.
pub fn sparsify24_transposed(a: &DenseMatrix, mode: SparsifyMode) -> Result<Sparse24Matrix> {
    if a.rows() % 4 != 0 {
        return Err(Error::NotDivisible {
            what: "rows",
            value: a.rows(),
            by: 4,
        });
    }
    sparsify24(&a.transpose(), mode)
}

/// Dense result of sparsifying every row-group, without packing.
pub fn sparsify24_dense(a: &DenseMatrix, mode: SparsifyMode) -> Result<DenseMatrix> {
    check_cols(a)?;
    let f = match mode {
        SparsifyMode::SoftThreshold => soft_threshold_group,
        SparsifyMode::GreedyMagnitude => greedy_group,
    };
    let mut data = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let row = a.row(r);
        for gi in 0..a.cols() / 4 {
            data.extend_from_slice(&f(group_of(row, gi)));
        }
    }
    Ok(DenseMatrix::from_vec_unchecked(a.rows(), a.cols(), data))
}

/// Pulls an upstream gradient on `sparsify24_dense(a, mode)` back to `a`.
pub fn sparsify24_vjp(a: &DenseMatrix, mode: SparsifyMode, upstream: &DenseMatrix) -> Result<DenseMatrix> {
    check_cols(a)?;
    if a.shape() != upstream.shape() {
        return Err(Error::ShapeMismatch {
            op: "sparsify24_vjp",
            left: a.shape(),
            right: upstream.shape(),
        });
    }
    let f = match mode {
        SparsifyMode::SoftThreshold => soft_threshold_group_vjp,
        SparsifyMode::GreedyMagnitude => greedy_group_vjp,
    };
    let mut data = Vec::with_capacity(a.len());
    for r in 0..a.rows() {
        let (row, up) = (a.row(r), upstream.row(r));
        for gi in 0..a.cols() / 4 {
            data.extend_from_slice(&f(group_of(row, gi), group_of(up, gi)));
        }
    }
    Ok(DenseMatrix::from_vec_unchecked(a.rows(), a.cols(), data))
}

/// True if every row-group of `a` has at most two nonzeros.
pub fn is_24_compliant(a: &DenseMatrix) -> bool {
    a.cols() % 4 == 0
        && a
            .data()
            .chunks_exact(4)
            .all(|g| g.iter().filter(|v| **v != 0.0).count() <= 2)
}

/// Decodes a packed matrix to dense.
pub fn decode24(s: &Sparse24Matrix) -> DenseMatrix {
    s.decode()
}


pub(crate) use io::read_from as io_read_from;
