//! Token-to-expert assignment and the row permutation that groups tokens.

use std::ops::Range;

use super::ExpertBank;
use crate::error::{Error, Result};
use crate::matcore::{gemm, DenseMatrix};

/// Per-token expert assignment plus the grouping permutation.
///
/// `permutation[new] = old`: row `new` of the permuted matrix is token `old`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingPlan {
    assignments: Vec<Vec<usize>>,
    permutation: Vec<usize>,
    group_bounds: Vec<Range<usize>>,
}

impl RoutingPlan {
    /// Builds the plan from explicit assignments (primary expert first).
    /// Tokens are stably sorted by primary expert.
    pub fn from_assignments(assignments: Vec<Vec<usize>>, num_experts: usize) -> Result<Self> {
        for (t, a) in assignments.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::InvalidParams(format!("token {t} has no expert")));
            }
            if let Some(&e) = a.iter().find(|&&e| e >= num_experts) {
                return Err(Error::InvalidParams(format!(
                    "token {t} routed to expert {e} of {num_experts}"
                )));
            }
        }
        let mut permutation: Vec<usize> = (0..assignments.len()).collect();
        permutation.sort_by_key(|&t| assignments[t][0]);
        let mut group_bounds = Vec::with_capacity(num_experts);
        let mut start = 0;
        for e in 0..num_experts {
            let len = permutation[start..]
                .iter()
                .take_while(|&&t| assignments[t][0] == e)
                .count();
            group_bounds.push(start..start + len);
            start += len;
        }
        Ok(Self {
            assignments,
            permutation,
            group_bounds,
        })
    }

    pub fn tokens(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_experts(&self) -> usize {
        self.group_bounds.len()
    }

    /// Routed experts of original token `t`, best first.
    pub fn assignments(&self, t: usize) -> &[usize] {
        &self.assignments[t]
    }

    pub fn primary(&self, t: usize) -> usize {
        self.assignments[t][0]
    }

    pub fn top_k(&self) -> usize {
        self.assignments.first().map_or(0, Vec::len)
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Permuted row range of each expert's tokens (possibly empty).
    pub fn group_bounds(&self) -> &[Range<usize>] {
        &self.group_bounds
    }

    /// Largest group over the mean group size. 1.0 is perfectly balanced.
    pub fn balance(&self) -> f64 {
        let max = self.group_bounds.iter().map(|r| r.len()).max().unwrap_or(0);
        let mean = self.tokens() as f64 / self.num_experts().max(1) as f64;
        if mean > 0.0 {
            max as f64 / mean
        } else {
            0.0
        }
    }

    /// Layout with every group zero-padded to a multiple of `v` rows.
    pub fn padded(&self, v: usize) -> PaddedLayout {
        assert!(v > 0, "block height must be positive");
        let mut rows = Vec::new();
        let mut block_expert = Vec::new();
        for (e, g) in self.group_bounds.iter().enumerate() {
            rows.extend(g.clone().map(Some));
            let padded = g.len().div_ceil(v) * v;
            rows.extend(std::iter::repeat_n(None, padded - g.len()));
            block_expert.extend(std::iter::repeat_n(e, padded / v));
        }
        PaddedLayout {
            v,
            rows,
            block_expert,
            permutation: self.permutation.clone(),
        }
    }
}

/// Scores tokens against the unit-norm expert means and keeps the `top_k`
/// best experts per token (ties to the lower expert id).
pub fn route_tokens(x: &DenseMatrix, bank: &ExpertBank, top_k: usize) -> Result<RoutingPlan> {
    let e = bank.num_experts();
    if top_k == 0 || top_k > e {
        return Err(Error::InvalidParams(format!(
            "top_k must be in 1..={e}, got {top_k}"
        )));
    }
    let scores = gemm(x, bank.means())?;
    let assignments = (0..x.rows())
        .map(|t| {
            let s = scores.row(t);
            let mut ids: Vec<usize> = (0..e).collect();
            ids.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
            ids.truncate(top_k);
            ids
        })
        .collect();
    RoutingPlan::from_assignments(assignments, e)
}

/// Rows reordered by a plan, tagged with the order that was applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Permuted {
    matrix: DenseMatrix,
    order: Vec<usize>,
}

impl Permuted {
    /// Wraps rows that the caller has already arranged in `order`
    /// (`order[new] = old`).
    pub fn new(matrix: DenseMatrix, order: Vec<usize>) -> Result<Self> {
        if order.len() != matrix.rows() {
            return Err(Error::InvalidParams(format!(
                "order has {} entries for {} rows",
                order.len(),
                matrix.rows()
            )));
        }
        Ok(Self { matrix, order })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.matrix
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub(crate) fn follows(&self, plan: &RoutingPlan) -> Result<()> {
        if self.order != plan.permutation {
            return Err(Error::Unpermuted);
        }
        Ok(())
    }
}

fn check_rows(op: &'static str, x: &DenseMatrix, plan: &RoutingPlan) -> Result<()> {
    if x.rows() != plan.tokens() {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape(),
            right: (plan.tokens(), x.cols()),
        });
    }
    Ok(())
}

pub fn apply_permutation(x: &DenseMatrix, plan: &RoutingPlan) -> Result<Permuted> {
    check_rows("apply_permutation", x, plan)?;
    let order: Vec<Option<usize>> = plan.permutation.iter().copied().map(Some).collect();
    Ok(Permuted {
        matrix: x.gather_rows(&order),
        order: plan.permutation.clone(),
    })
}

/// Puts permuted rows back in token order.
pub fn invert_permutation(y: &DenseMatrix, plan: &RoutingPlan) -> Result<DenseMatrix> {
    check_rows("invert_permutation", y, plan)?;
    let mut inv = vec![None; plan.tokens()];
    for (new, &old) in plan.permutation.iter().enumerate() {
        inv[old] = Some(new);
    }
    Ok(y.gather_rows(&inv))
}

/// Permuted rows with each expert group zero-padded to a multiple of `V`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedLayout {
    v: usize,
    rows: Vec<Option<usize>>,
    block_expert: Vec<usize>,
    permutation: Vec<usize>,
}

impl PaddedLayout {
    pub fn v(&self) -> usize {
        self.v
    }

    /// Total padded row count, a multiple of `V`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Permuted row held by padded row `r`, or `None` for padding.
    pub fn source(&self, r: usize) -> Option<usize> {
        self.rows[r]
    }

    /// Expert that owns block row `b`.
    pub fn block_expert(&self, b: usize) -> usize {
        self.block_expert[b]
    }

    pub fn padding_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_none()).count()
    }

    /// Inserts zero rows into an already permuted matrix.
    pub fn pad(&self, permuted: &DenseMatrix) -> Result<DenseMatrix> {
        if permuted.rows() != self.permutation.len() {
            return Err(Error::ShapeMismatch {
                op: "pad",
                left: permuted.shape(),
                right: (self.permutation.len(), permuted.cols()),
            });
        }
        Ok(permuted.gather_rows(&self.rows))
    }

    /// Permutes rows given in token order and pads them in one gather.
    pub fn gather_tokens(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.permutation.len() {
            return Err(Error::ShapeMismatch {
                op: "gather_tokens",
                left: x.shape(),
                right: (self.permutation.len(), x.cols()),
            });
        }
        let order: Vec<Option<usize>> = self
            .rows
            .iter()
            .map(|r| r.map(|p| self.permutation[p]))
            .collect();
        Ok(x.gather_rows(&order))
    }

    /// Drops padding rows, leaving permuted order.
    pub fn unpad(&self, padded: &DenseMatrix) -> Result<DenseMatrix> {
        if padded.rows() != self.rows.len() {
            return Err(Error::ShapeMismatch {
                op: "unpad",
                left: padded.shape(),
                right: (self.rows.len(), padded.cols()),
            });
        }
        let mut back = vec![None; self.permutation.len()];
        for (r, src) in self.rows.iter().enumerate() {
            if let Some(p) = src {
                back[*p] = Some(r);
            }
        }
        Ok(padded.gather_rows(&back))
    }

    /// Drops padding rows and restores token order.
    pub fn scatter_tokens(&self, padded: &DenseMatrix) -> Result<DenseMatrix> {
        if padded.rows() != self.rows.len() {
            return Err(Error::ShapeMismatch {
                op: "scatter_tokens",
                left: padded.shape(),
                right: (self.rows.len(), padded.cols()),
            });
        }
        let mut back = vec![None; self.permutation.len()];
        for (r, src) in self.rows.iter().enumerate() {
            if let Some(p) = src {
                back[self.permutation[*p]] = Some(r);
            }
        }
        Ok(padded.gather_rows(&back))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{rand_matrix, Dist};

    fn two_expert_bank() -> ExpertBank {
        let means = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        ExpertBank::new(means, vec![(0..4).collect(), (4..8).collect()]).unwrap()
    }

    #[test]
    fn stable_sort_example() {
        let plan = RoutingPlan::from_assignments(vec![vec![1], vec![0], vec![1], vec![0]], 2).unwrap();
        assert_eq!(plan.permutation(), &[1, 3, 0, 2]);
        assert_eq!(plan.group_bounds(), &[0..2, 2..4]);
    }

    #[test]
    fn routes_by_score() {
        let x = DenseMatrix::from_rows(&[&[0.0, 2.0], &[3.0, 0.1], &[0.1, 1.0], &[5.0, -1.0]]).unwrap();
        let plan = route_tokens(&x, &two_expert_bank(), 1).unwrap();
        assert_eq!((0..4).map(|t| plan.primary(t)).collect::<Vec<_>>(), vec![1, 0, 1, 0]);
        assert_eq!(plan.permutation(), &[1, 3, 0, 2]);
    }

    #[test]
    fn identical_tokens_identity_permutation() {
        let x = DenseMatrix::from_fn(6, 2, |_, c| [0.3, 0.9][c]);
        let plan = route_tokens(&x, &two_expert_bank(), 1).unwrap();
        assert_eq!(plan.permutation(), &[0, 1, 2, 3, 4, 5]);
        let p = apply_permutation(&x, &plan).unwrap();
        assert!(p.matrix().bit_eq(&x));
    }

    #[test]
    fn top_k_bounds() {
        let x = DenseMatrix::zeros(2, 2);
        assert!(route_tokens(&x, &two_expert_bank(), 0).is_err());
        assert!(route_tokens(&x, &two_expert_bank(), 3).is_err());
        let plan = route_tokens(&x, &two_expert_bank(), 2).unwrap();
        assert_eq!(plan.assignments(0), &[0, 1]);
    }

    #[test]
    fn roundtrip_and_index_oracle() {
        let x = rand_matrix(9, 2, 3, Dist::Normal).unwrap();
        let plan = route_tokens(&x, &two_expert_bank(), 1).unwrap();
        let p = apply_permutation(&x, &plan).unwrap();
        for (new, &old) in plan.permutation().iter().enumerate() {
            assert_eq!(p.matrix().row(new), x.row(old));
        }
        assert!(invert_permutation(p.matrix(), &plan).unwrap().bit_eq(&x));
        assert!(apply_permutation(&DenseMatrix::zeros(3, 2), &plan).is_err());
    }

    #[test]
    fn padding_layout() {
        let plan = RoutingPlan::from_assignments(vec![vec![1], vec![0], vec![1], vec![1], vec![0]], 3).unwrap();
        let lay = plan.padded(2);
        // groups: expert 0 -> 2 tokens, expert 1 -> 3 tokens (+1 pad), expert 2 empty
        assert_eq!(lay.len(), 6);
        assert_eq!(lay.padding_rows(), 1);
        assert_eq!((0..3).map(|b| lay.block_expert(b)).collect::<Vec<_>>(), vec![0, 1, 1]);
        let x = DenseMatrix::from_fn(5, 1, |r, _| r as f64 + 1.0);
        let padded = lay.gather_tokens(&x).unwrap();
        assert_eq!(padded.data(), &[2.0, 5.0, 1.0, 3.0, 4.0, 0.0]);
        assert!(lay.scatter_tokens(&padded).unwrap().bit_eq(&x));
        let perm = apply_permutation(&x, &plan).unwrap();
        assert!(lay.pad(perm.matrix()).unwrap().bit_eq(&padded));
        assert!(lay.unpad(&padded).unwrap().bit_eq(perm.matrix()));
    }

    #[test]
    fn balance_metric() {
        let plan = RoutingPlan::from_assignments(vec![vec![0], vec![0], vec![0], vec![1]], 2).unwrap();
        assert_eq!(plan.balance(), 1.5);
    }
}
