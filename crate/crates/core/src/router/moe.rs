//! Expert-restricted products and conversion of routed activations to V:N:M.

use super::{ExpertBank, PaddedLayout, Permuted, RoutingPlan};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matcore::DenseMatrix;
use crate::venom::{top4_by_l1, VenomMatrix, VenomParams};

fn check_bank(plan: &RoutingPlan, bank: &ExpertBank) -> Result<()> {
    if plan.num_experts() != bank.num_experts() {
        return Err(Error::InvalidParams(format!(
            "plan has {} experts, bank has {}",
            plan.num_experts(),
            bank.num_experts()
        )));
    }
    Ok(())
}

/// Zeroes every entry of a padded matrix outside its block's expert.
pub(crate) fn restrict_to_experts(padded: &DenseMatrix, layout: &PaddedLayout, bank: &ExpertBank) -> DenseMatrix {
    let v = layout.v();
    DenseMatrix::from_fn(padded.rows(), padded.cols(), |r, c| {
        if bank.expert_of_column(c) == layout.block_expert(r / v) {
            padded.get(r, c)
        } else {
            0.0
        }
    })
}

/// Restricts permuted activations to each token's expert columns and encodes
/// them in V:N:M format.
///
/// Rows are the plan's padded layout (`plan.padded(p.v())`): every expert
/// group is zero-padded to a multiple of `V`, so each `V`-row block belongs
/// to one expert. Inside a block, each `M`-wide window keeps the four
/// allowed columns with the largest L1 norm, then the strips are 2:4-pruned
/// by magnitude. A window where the block's expert owns no column is stored
/// as zeros; one where it owns between one and three columns cannot be
/// represented and is reported with its block coordinates.
pub fn moe_to_venom(
    y2: &Permuted,
    plan: &RoutingPlan,
    bank: &ExpertBank,
    p: VenomParams,
) -> Result<VenomMatrix> {
    y2.follows(plan)?;
    check_bank(plan, bank)?;
    if plan.top_k() > 1 {
        return Err(Error::InvalidParams(format!(
            "Venom emission needs top_k = 1, plan has {}",
            plan.top_k()
        )));
    }
    let y = y2.matrix();
    if y.cols() != bank.d_ffn() {
        return Err(Error::ShapeMismatch {
            op: "moe_to_venom",
            left: y.shape(),
            right: (y.rows(), bank.d_ffn()),
        });
    }
    if y.cols() % p.m() != 0 {
        return Err(Error::NotDivisible {
            what: "d_ffn",
            value: y.cols(),
            by: p.m(),
        });
    }
    let (v, m) = (p.v(), p.m());
    let layout = plan.padded(v);
    let padded = layout.pad(y)?;
    let masked = restrict_to_experts(&padded, &layout, bank);

    let nb = y.cols() / m;
    let mut tables = Vec::with_capacity(layout.len() / v * nb);
    let mut norms = vec![0.0; m];
    for br in 0..layout.len() / v {
        let e = layout.block_expert(br);
        for bc in 0..nb {
            let mut allowed = 0;
            for (j, n) in norms.iter_mut().enumerate() {
                let c = bc * m + j;
                if bank.expert_of_column(c) == e {
                    allowed += 1;
                    *n = (br * v..(br + 1) * v).map(|r| masked.get(r, c).abs()).sum();
                } else {
                    // Below any real L1 norm, so never chosen while at least
                    // four columns are allowed.
                    *n = -1.0;
                }
            }
            match allowed {
                0 => tables.push([0, 1, 2, 3]),
                1..=3 => {
                    return Err(Error::InfeasibleWindow {
                        block_row: br,
                        block_col: bc,
                        allowed,
                    })
                }
                _ => tables.push(top4_by_l1(&norms)),
            }
        }
    }
    VenomMatrix::encode_with_tables(&masked, p, tables)
}

/// Expert-batched first-layer product on permuted tokens.
///
/// Row `i` of the result holds `x[i] · w1` on the columns of the token's
/// routed experts and zero elsewhere. Each entry is accumulated over the
/// shared index in ascending order, so it equals the dense product followed
/// by the routing mask bit for bit. Returns the multiply count.
pub fn batched_expert_matmul(
    x: &Permuted,
    plan: &RoutingPlan,
    w1: &DenseMatrix,
    bank: &ExpertBank,
) -> Result<(DenseMatrix, u64)> {
    batched_expert_matmul_with(x, plan, w1, bank, Exec::default())
}

pub fn batched_expert_matmul_with(
    x: &Permuted,
    plan: &RoutingPlan,
    w1: &DenseMatrix,
    bank: &ExpertBank,
    exec: Exec,
) -> Result<(DenseMatrix, u64)> {
    x.follows(plan)?;
    check_bank(plan, bank)?;
    let xm = x.matrix();
    if xm.cols() != w1.rows() || w1.cols() != bank.d_ffn() {
        return Err(Error::ShapeMismatch {
            op: "batched_expert_matmul",
            left: xm.shape(),
            right: w1.shape(),
        });
    }
    let f = w1.cols();
    let mut out = DenseMatrix::zeros(xm.rows(), f);
    let wd = w1.data();
    let count = exec.for_each_row_counted(out.data_mut(), f, |i, orow| {
        let token = plan.permutation()[i];
        let mut mults = 0u64;
        for &e in plan.assignments(token) {
            let cols = bank.columns(e);
            for (k, &xv) in xm.row(i).iter().enumerate() {
                let wrow = &wd[k * f..(k + 1) * f];
                for &c in cols {
                    orow[c] += xv * wrow[c];
                }
            }
            mults += (xm.cols() * cols.len()) as u64;
        }
        mults
    });
    Ok((out, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{gemm, rand_matrix, Dist};
    use crate::router::{apply_permutation, route_tokens, RoutingPlan};
    use crate::venom::{venom_check, venom_encode};

    fn split_bank(d: usize, f: usize, e: usize, seed: u64) -> ExpertBank {
        let means = rand_matrix(d, e, seed, Dist::Normal).unwrap();
        let per = f / e;
        let sets = (0..e).map(|i| (i * per..(i + 1) * per).collect()).collect();
        ExpertBank::with_normalized_means(means, sets).unwrap()
    }

    #[test]
    fn single_expert_reduces_to_venom_encode() {
        let p = VenomParams::new(4, 2, 8).unwrap();
        let y = rand_matrix(4, 16, 1, Dist::Normal).unwrap();
        let bank = split_bank(3, 16, 1, 2);
        let plan = RoutingPlan::from_assignments(vec![vec![0]; 4], 1).unwrap();
        let yp = apply_permutation(&y, &plan).unwrap();
        let got = moe_to_venom(&yp, &plan, &bank, p).unwrap();
        assert_eq!(got, venom_encode(&y, p).unwrap());
    }

    #[test]
    fn compliant_aligned_input_is_fixed_point() {
        let p = VenomParams::new(2, 2, 8).unwrap();
        let bank = split_bank(3, 16, 2, 3);
        let plan = RoutingPlan::from_assignments(vec![vec![0], vec![0], vec![1], vec![1]], 2).unwrap();
        let raw = rand_matrix(4, 16, 4, Dist::Normal).unwrap();
        // Expert 0 rows use window 0 only, expert 1 rows window 1 only.
        let y = DenseMatrix::from_fn(4, 16, |r, c| {
            let keep = if r < 2 { [0, 2] } else { [9, 11] };
            if keep.contains(&c) { raw.get(r, c) } else { 0.0 }
        });
        let yp = apply_permutation(&y, &plan).unwrap();
        let out = moe_to_venom(&yp, &plan, &bank, p).unwrap();
        assert!(out.decode().bit_eq(&y));
    }

    #[test]
    fn output_compliant_and_routed() {
        let p = VenomParams::new(4, 2, 8).unwrap();
        let (b, d, f, e) = (22, 6, 64, 4);
        let bank = split_bank(d, f, e, 5);
        let x = rand_matrix(b, d, 6, Dist::Normal).unwrap();
        let plan = route_tokens(&x, &bank, 1).unwrap();
        let y = rand_matrix(b, f, 7, Dist::Normal).unwrap();
        let yp = apply_permutation(&y, &plan).unwrap();
        let out = moe_to_venom(&yp, &plan, &bank, p).unwrap();
        let dec = out.decode();
        assert!(venom_check(&dec, &p).unwrap());
        let lay = plan.padded(p.v());
        for r in 0..lay.len() {
            for c in 0..f {
                if dec.get(r, c) != 0.0 {
                    let tok = plan.permutation()[lay.source(r).unwrap()];
                    assert_eq!(bank.expert_of_column(c), plan.primary(tok));
                }
            }
        }
    }

    #[test]
    fn unpermuted_and_infeasible_rejected() {
        let p = VenomParams::new(1, 2, 8).unwrap();
        let bank = split_bank(2, 16, 2, 8);
        let plan = RoutingPlan::from_assignments(vec![vec![1], vec![0]], 2).unwrap();
        let y = rand_matrix(2, 16, 9, Dist::Normal).unwrap();
        let wrong = Permuted::new(y.clone(), vec![0, 1]).unwrap();
        assert!(matches!(moe_to_venom(&wrong, &plan, &bank, p), Err(Error::Unpermuted)));

        let sets: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3, 4, 5, 14, 15], (6..14).collect()];
        let bad = ExpertBank::with_normalized_means(rand_matrix(2, 2, 1, Dist::Normal).unwrap(), sets).unwrap();
        let yp = apply_permutation(&y, &plan).unwrap();
        match moe_to_venom(&yp, &plan, &bad, p) {
            Err(Error::InfeasibleWindow { block_col, allowed, .. }) => {
                assert_eq!(block_col, 1);
                assert_eq!(allowed, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batched_matches_masked_gemm() {
        let (b, d, f) = (7, 5, 16);
        let bank = split_bank(d, f, 2, 10);
        let x = rand_matrix(b, d, 11, Dist::Normal).unwrap();
        let w1 = rand_matrix(d, f, 12, Dist::Normal).unwrap();
        for k in 1..=2 {
            let plan = route_tokens(&x, &bank, k).unwrap();
            let xp = apply_permutation(&x, &plan).unwrap();
            let (got, mults) = batched_expert_matmul(&xp, &plan, &w1, &bank).unwrap();
            let dense = gemm(xp.matrix(), &w1).unwrap();
            let want = DenseMatrix::from_fn(b, f, |i, c| {
                let tok = plan.permutation()[i];
                if plan.assignments(tok).contains(&bank.expert_of_column(c)) {
                    dense.get(i, c)
                } else {
                    0.0
                }
            });
            assert!(got.bit_eq(&want));
            assert_eq!(mults, (b * d * (f / 2) * k) as u64);
        }
    }

    #[test]
    fn batched_single_expert_is_gemm() {
        let bank = split_bank(4, 8, 1, 13);
        let x = rand_matrix(5, 4, 14, Dist::Normal).unwrap();
        let w1 = rand_matrix(4, 8, 15, Dist::Normal).unwrap();
        let plan = route_tokens(&x, &bank, 1).unwrap();
        let xp = apply_permutation(&x, &plan).unwrap();
        let (got, _) = batched_expert_matmul(&xp, &plan, &w1, &bank).unwrap();
        assert!(got.bit_eq(&gemm(&x, &w1).unwrap()));
    }
}
