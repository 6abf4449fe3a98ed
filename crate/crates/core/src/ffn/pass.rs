//! Forward and backward passes.

use serde::Serialize;

use super::weights::EffWeight;
use super::{squared_relu, squared_relu_backward, ActMode, FfnParams, SparsityPolicy};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matcore::{gemm_with, DenseMatrix};
use crate::router::{
    apply_permutation, moe_to_venom, restrict_to_experts, route_tokens, ExpertBank, PaddedLayout,
    RoutingPlan,
};
use crate::sparse24::{sparsify24, spmm24_t, spmm24_with, SparsifyMode, Sparse24Matrix};
use crate::venom::{venom_spmm_t, venom_spmm_with, VenomMatrix};

/// The six products of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Product {
    /// `y1 = x · W1`
    Y1,
    /// `y3 = y2 · W2`
    Y3,
    /// `dy2 = dy3 · W2ᵀ`
    Dy2,
    /// `dW2 = y2ᵀ · dy3`
    DW2,
    /// `dx = dy1 · W1ᵀ`
    Dx,
    /// `dW1 = xᵀ · dy1`
    DW1,
}

/// Which operand of a product was packed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    None,
    Weight24,
    Act24,
    Venom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProductRecord {
    pub product: Product,
    pub sparse: Operand,
    pub mults: u64,
    pub dense_mults: u64,
}

/// Record of which operand each product ran with and what it cost.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct OperandLog {
    records: Vec<ProductRecord>,
}

impl OperandLog {
    fn push(&mut self, product: Product, sparse: Operand, mults: u64, dense_mults: usize) {
        self.records.push(ProductRecord {
            product,
            sparse,
            mults,
            dense_mults: dense_mults as u64,
        });
    }

    pub fn records(&self) -> &[ProductRecord] {
        &self.records
    }

    pub fn get(&self, product: Product) -> Option<&ProductRecord> {
        self.records.iter().find(|r| r.product == product)
    }

    pub fn mults(&self) -> u64 {
        self.records.iter().map(|r| r.mults).sum()
    }

    pub fn dense_mults(&self) -> u64 {
        self.records.iter().map(|r| r.dense_mults).sum()
    }

    /// Share of dense-equivalent multiplies that ran with a sparse operand.
    pub fn sparse_coverage(&self) -> f64 {
        let total = self.dense_mults();
        if total == 0 {
            return 0.0;
        }
        let sparse: u64 = self
            .records
            .iter()
            .filter(|r| r.sparse != Operand::None)
            .map(|r| r.dense_mults)
            .sum();
        sparse as f64 / total as f64
    }
}

/// The activation mask a forward pass used.
#[derive(Debug, Clone, PartialEq)]
pub enum ActPattern {
    Dense,
    Act24(Sparse24Matrix),
    Venom {
        plan: RoutingPlan,
        layout: PaddedLayout,
        matrix: VenomMatrix,
        bank: ExpertBank,
    },
    /// Routing ran but every activation was kept.
    Routed { plan: RoutingPlan, layout: PaddedLayout },
}

/// Tensors saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct FfnTape {
    x: DenseMatrix,
    y1: DenseMatrix,
    y2: DenseMatrix,
    pattern: ActPattern,
    tag: String,
    log: OperandLog,
}

impl FfnTape {
    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn y1(&self) -> &DenseMatrix {
        &self.y1
    }

    /// `relu(y1)²` before any activation mask.
    pub fn y2(&self) -> &DenseMatrix {
        &self.y2
    }

    /// The activations that actually entered the second product, in token
    /// order.
    pub fn used_y2(&self) -> DenseMatrix {
        match &self.pattern {
            ActPattern::Dense | ActPattern::Routed { .. } => self.y2.clone(),
            ActPattern::Act24(s) => s.decode(),
            ActPattern::Venom { layout, matrix, .. } => layout
                .scatter_tokens(&matrix.decode())
                .expect("layout matches its own matrix"),
        }
    }

    pub fn pattern(&self) -> &ActPattern {
        &self.pattern
    }

    pub fn plan(&self) -> Option<&RoutingPlan> {
        match &self.pattern {
            ActPattern::Venom { plan, .. } | ActPattern::Routed { plan, .. } => Some(plan),
            _ => None,
        }
    }

    pub fn policy_tag(&self) -> &str {
        &self.tag
    }

    pub fn log(&self) -> &OperandLog {
        &self.log
    }
}

#[derive(Debug, Clone)]
pub struct FfnGrads {
    pub dx: DenseMatrix,
    pub dw1: DenseMatrix,
    pub dw2: DenseMatrix,
    /// All six products, forward first.
    pub log: OperandLog,
}

fn weight_operand(sparse: bool) -> Operand {
    if sparse {
        Operand::Weight24
    } else {
        Operand::None
    }
}

pub fn ffn_forward(
    x: &DenseMatrix,
    p: &FfnParams,
    pol: &SparsityPolicy,
    bank: Option<&ExpertBank>,
) -> Result<(DenseMatrix, FfnTape)> {
    ffn_forward_with(x, p, pol, bank, Exec::default(), None)
}

/// Forward pass. With `frozen`, the activation mask and routing of an
/// earlier tape are reused instead of recomputed, which makes the output a
/// smooth function of `x` and the weights (used by finite differences).
pub fn ffn_forward_with(
    x: &DenseMatrix,
    p: &FfnParams,
    pol: &SparsityPolicy,
    bank: Option<&ExpertBank>,
    exec: Exec,
    frozen: Option<&FfnTape>,
) -> Result<(DenseMatrix, FfnTape)> {
    pol.validate()?;
    if x.cols() != p.d_in() {
        return Err(Error::ShapeMismatch {
            op: "ffn_forward",
            left: x.shape(),
            right: p.w1.shape(),
        });
    }
    let tag = pol.tag();
    if let Some(t) = frozen {
        if t.tag != tag || t.x.shape() != x.shape() {
            return Err(Error::PolicyMismatch(format!(
                "frozen tape from `{}` on {:?}, called with `{tag}` on {:?}",
                t.tag,
                t.x.shape(),
                x.shape()
            )));
        }
    }
    let (b, d_in, f, d_out) = (x.rows(), p.d_in(), p.hidden(), p.d_out());
    let w1 = EffWeight::new(&p.w1, pol.w1_sparse, pol.w1t_sparse, pol)?;
    let w2 = EffWeight::new(&p.w2, pol.w2_sparse, pol.w2t_sparse, pol)?;
    let mut log = OperandLog::default();

    let (y1, n) = w1.mul(x, exec)?;
    log.push(Product::Y1, weight_operand(w1.fwd_sparse()), n, b * d_in * f);
    let y2 = squared_relu(&y1);

    let frozen_pattern = frozen.map(|t| &t.pattern);
    let mismatch = || Error::PolicyMismatch("frozen tape has a different activation pattern".into());
    let (y3, pattern) = match pol.act_mode {
        ActMode::Dense | ActMode::Act24 if pol.all_keep || pol.act_mode == ActMode::Dense => {
            let (y3, n) = w2.mul(&y2, exec)?;
            log.push(Product::Y3, weight_operand(w2.fwd_sparse()), n, b * f * d_out);
            (y3, ActPattern::Dense)
        }
        ActMode::Dense | ActMode::Act24 => {
            let s = match frozen_pattern {
                Some(ActPattern::Act24(s)) => s.with_values_from(&y2)?,
                Some(_) => return Err(mismatch()),
                None => sparsify24(&y2, SparsifyMode::GreedyMagnitude)?,
            };
            let (y3, n) = spmm24_with(&s, &w2.fwd, exec)?;
            log.push(Product::Y3, Operand::Act24, n, b * f * d_out);
            (y3, ActPattern::Act24(s))
        }
        ActMode::Venom => {
            let vp = pol.venom.expect("validated");
            let bank = match (frozen_pattern, bank) {
                (Some(ActPattern::Venom { bank, .. }), _) => bank,
                (_, Some(bank)) => bank,
                (_, None) => {
                    return Err(Error::PolicyMismatch(
                        "venom activations need an expert bank".into(),
                    ))
                }
            };
            let cfg = pol.router_config();
            if bank.d_ffn() != f || bank.num_experts() != cfg.num_experts {
                return Err(Error::PolicyMismatch(format!(
                    "bank has {} experts over {} columns; policy wants {} over {f}",
                    bank.num_experts(),
                    bank.d_ffn(),
                    cfg.num_experts
                )));
            }
            let plan = match frozen_pattern {
                Some(ActPattern::Venom { plan, .. } | ActPattern::Routed { plan, .. }) => plan.clone(),
                Some(_) => return Err(mismatch()),
                None => route_tokens(x, bank, cfg.top_k)?,
            };
            let layout = plan.padded(vp.v());
            if pol.all_keep {
                let (y3p, n) = w2.mul(&layout.gather_tokens(&y2)?, exec)?;
                log.push(Product::Y3, Operand::None, n, b * f * d_out);
                (layout.scatter_tokens(&y3p)?, ActPattern::Routed { plan, layout })
            } else {
                let matrix = match frozen_pattern {
                    Some(ActPattern::Venom { matrix, .. }) => matrix
                        .with_values_from(&restrict_to_experts(&layout.gather_tokens(&y2)?, &layout, bank))?,
                    Some(_) => return Err(mismatch()),
                    None => moe_to_venom(&apply_permutation(&y2, &plan)?, &plan, bank, vp)?,
                };
                let (y3p, n) = venom_spmm_with(&matrix, &w2.fwd, exec)?;
                log.push(Product::Y3, Operand::Venom, n, b * f * d_out);
                let y3 = layout.scatter_tokens(&y3p)?;
                (
                    y3,
                    ActPattern::Venom {
                        plan,
                        layout,
                        matrix,
                        bank: bank.clone(),
                    },
                )
            }
        }
    };
    let tape = FfnTape {
        x: x.clone(),
        y1,
        y2,
        pattern,
        tag,
        log,
    };
    Ok((y3, tape))
}

pub fn ffn_backward(
    dy3: &DenseMatrix,
    tape: &FfnTape,
    p: &FfnParams,
    pol: &SparsityPolicy,
) -> Result<FfnGrads> {
    ffn_backward_with(dy3, tape, p, pol, Exec::default())
}

/// Backward pass for the loss whose gradient on `y3` is `dy3`. Weight
/// sparsifiers are re-evaluated from `p`; activation masks come from the
/// tape.
pub fn ffn_backward_with(
    dy3: &DenseMatrix,
    tape: &FfnTape,
    p: &FfnParams,
    pol: &SparsityPolicy,
    exec: Exec,
) -> Result<FfnGrads> {
    if tape.tag != pol.tag() {
        return Err(Error::PolicyMismatch(format!(
            "tape from `{}`, backward called with `{}`",
            tape.tag,
            pol.tag()
        )));
    }
    let x = &tape.x;
    let (b, d_in, f, d_out) = (x.rows(), p.d_in(), p.hidden(), p.d_out());
    if dy3.shape() != (b, d_out) || tape.y1.shape() != (b, f) || x.cols() != d_in {
        return Err(Error::ShapeMismatch {
            op: "ffn_backward",
            left: dy3.shape(),
            right: (b, d_out),
        });
    }
    let w1 = EffWeight::new(&p.w1, pol.w1_sparse, pol.w1t_sparse, pol)?;
    let w2 = EffWeight::new(&p.w2, pol.w2_sparse, pol.w2t_sparse, pol)?;
    let mut log = tape.log.clone();

    let (dy2, n) = w2.mul_t(dy3, exec)?;
    log.push(Product::Dy2, weight_operand(w2.bwd_sparse()), n, b * d_out * f);

    let (dw2_eff, dx, dw1_eff) = match &tape.pattern {
        ActPattern::Dense | ActPattern::Routed { .. } => {
            let (dw2, n) = gemm_with(&tape.y2.transpose(), dy3, exec)?;
            log.push(Product::DW2, Operand::None, n, f * b * d_out);
            let dy1 = squared_relu_backward(&dy2, &tape.y1)?;
            let (dx, n) = w1.mul_t(&dy1, exec)?;
            log.push(Product::Dx, weight_operand(w1.bwd_sparse()), n, b * f * d_in);
            let (dw1, n) = gemm_with(&x.transpose(), &dy1, exec)?;
            log.push(Product::DW1, Operand::None, n, d_in * b * f);
            (dw2, dx, dw1)
        }
        ActPattern::Act24(s) => {
            let (dw2, n) = spmm24_t(s, dy3)?;
            log.push(Product::DW2, Operand::Act24, n, f * b * d_out);
            let dy1 = s.with_values_from(&squared_relu_backward(&dy2, &tape.y1)?)?;
            let (dx, n) = spmm24_with(&dy1, &w1.bwd.transpose(), exec)?;
            log.push(Product::Dx, Operand::Act24, n, b * f * d_in);
            let (dw1t, n) = spmm24_t(&dy1, x)?;
            log.push(Product::DW1, Operand::Act24, n, d_in * b * f);
            (dw2, dx, dw1t.transpose())
        }
        ActPattern::Venom {
            layout,
            matrix,
            bank,
            ..
        } => {
            let (dw2, n) = venom_spmm_t(matrix, &layout.gather_tokens(dy3)?)?;
            log.push(Product::DW2, Operand::Venom, n, f * b * d_out);
            let dy1 = squared_relu_backward(&dy2, &tape.y1)?;
            let dy1 = matrix.with_values_from(&restrict_to_experts(&layout.gather_tokens(&dy1)?, layout, bank))?;
            let (dxp, n) = venom_spmm_with(&dy1, &w1.bwd.transpose(), exec)?;
            log.push(Product::Dx, Operand::Venom, n, b * f * d_in);
            let (dw1t, n) = venom_spmm_t(&dy1, &layout.gather_tokens(x)?)?;
            log.push(Product::DW1, Operand::Venom, n, d_in * b * f);
            (dw2, layout.scatter_tokens(&dxp)?, dw1t.transpose())
        }
    };
    Ok(FfnGrads {
        dx,
        dw1: w1.pullback(&dw1_eff)?,
        dw2: w2.pullback(&dw2_eff)?,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{gemm, rand_matrix, Dist};
    use crate::router::{cluster_columns, RouterConfig};
    use crate::sparse24::sparsify24_dense;
    use crate::venom::VenomParams;

    fn setup(b: usize, d: usize, f: usize, seed: u64) -> (DenseMatrix, FfnParams) {
        (
            rand_matrix(b, d, seed, Dist::Normal).unwrap(),
            FfnParams::random(d, f, d, seed + 100).unwrap(),
        )
    }

    fn venom_setup(seed: u64) -> (DenseMatrix, FfnParams, ExpertBank, SparsityPolicy) {
        let (x, p) = setup(12, 8, 32, seed);
        let cfg = RouterConfig::with_experts(4);
        let bank = cluster_columns(&p.w1, &cfg, seed).unwrap();
        let (p, bank) = p.align_to_bank(&bank).unwrap();
        let pol = SparsityPolicy::venom(VenomParams::new(2, 2, 8).unwrap(), cfg);
        (x, p, bank, pol)
    }

    #[test]
    fn dense_matches_gemm_chain() {
        let (x, p) = setup(5, 8, 16, 1);
        let (y3, tape) = ffn_forward(&x, &p, &SparsityPolicy::dense(), None).unwrap();
        let y1 = gemm(&x, &p.w1).unwrap();
        let want = gemm(&squared_relu(&y1), &p.w2).unwrap();
        assert!(y3.bit_eq(&want));
        let g = ffn_backward(&y3, &tape, &p, &SparsityPolicy::dense()).unwrap();
        let dy2 = gemm(&y3, &p.w2.transpose()).unwrap();
        let dy1 = squared_relu_backward(&dy2, &y1).unwrap();
        assert!(g.dw2.bit_eq(&gemm(&squared_relu(&y1).transpose(), &y3).unwrap()));
        assert!(g.dx.bit_eq(&gemm(&dy1, &p.w1.transpose()).unwrap()));
        assert!(g.dw1.bit_eq(&gemm(&x.transpose(), &dy1).unwrap()));
        assert_eq!(g.log.sparse_coverage(), 0.0);
    }

    #[test]
    fn compliant_weight_greedy_is_noop() {
        let (x, p) = setup(4, 8, 16, 2);
        let w1 = sparsify24_dense(&p.w1, SparsifyMode::GreedyMagnitude).unwrap();
        let p = FfnParams::new(w1, p.w2).unwrap();
        let pol = SparsityPolicy::w1().with_weight_mode(SparsifyMode::GreedyMagnitude);
        let (sparse, tape) = ffn_forward(&x, &p, &pol, None).unwrap();
        let (dense, _) = ffn_forward(&x, &p, &SparsityPolicy::dense(), None).unwrap();
        assert!(sparse.bit_eq(&dense));
        assert_eq!(tape.log().get(Product::Y1).unwrap().sparse, Operand::Weight24);
    }

    #[test]
    fn all_keep_equals_dense_bitwise() {
        let (x, p, bank, pol) = venom_setup(3);
        let (yd, td) = ffn_forward(&x, &p, &SparsityPolicy::dense(), None).unwrap();
        let gd = ffn_backward(&yd, &td, &p, &SparsityPolicy::dense()).unwrap();
        let vp = VenomParams::new(2, 2, 8).unwrap();
        for pol in [
            SparsityPolicy::full(vp, RouterConfig::with_experts(4)).with_all_keep(),
            SparsityPolicy { w1t_sparse: true, w2_sparse: true, ..pol }.with_all_keep(),
            SparsityPolicy::act24().with_all_keep(),
        ] {
            let (y, t) = ffn_forward(&x, &p, &pol, Some(&bank)).unwrap();
            assert!(y.bit_eq(&yd), "{}", pol.tag());
            let g = ffn_backward(&y, &t, &p, &pol).unwrap();
            assert!(g.dx.bit_eq(&gd.dx) && g.dw1.bit_eq(&gd.dw1) && g.dw2.bit_eq(&gd.dw2));
        }
    }

    #[test]
    fn venom_forward_matches_decode_oracle() {
        let (x, p, bank, pol) = venom_setup(4);
        let (y3, tape) = ffn_forward(&x, &p, &pol, Some(&bank)).unwrap();
        let want = gemm(&tape.used_y2(), &p.w2).unwrap();
        assert!(y3.max_abs_diff(&want) < 1e-10);
        assert!(tape.used_y2().zero_fraction() > 0.75);
    }

    #[test]
    fn venom_operands_are_activations() {
        let vp = VenomParams::new(2, 2, 8).unwrap();
        let (x, p, bank, _) = venom_setup(5);
        let pol = SparsityPolicy::full(vp, RouterConfig::with_experts(4));
        let (y3, tape) = ffn_forward(&x, &p, &pol, Some(&bank)).unwrap();
        let g = ffn_backward(&y3, &tape, &p, &pol).unwrap();
        for prod in [Product::Y3, Product::DW2, Product::Dx, Product::DW1] {
            assert_eq!(g.log.get(prod).unwrap().sparse, Operand::Venom);
        }
        assert_eq!(g.log.get(Product::Y1).unwrap().sparse, Operand::Weight24);
        assert_eq!(g.log.get(Product::Dy2).unwrap().sparse, Operand::Weight24);
        assert_eq!(g.log.sparse_coverage(), 1.0);
        assert!(g.log.mults() < g.log.dense_mults());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (x, p) = setup(4, 8, 16, 6);
        for pol in [SparsityPolicy::dense(), SparsityPolicy::w1_w1t(), SparsityPolicy::act24()] {
            let (_, tape) = ffn_forward(&x, &p, &pol, None).unwrap();
            let g = ffn_backward(&DenseMatrix::zeros(4, 8), &tape, &p, &pol).unwrap();
            assert_eq!(g.dx.nnz() + g.dw1.nnz() + g.dw2.nnz(), 0);
        }
    }

    #[test]
    fn mismatches_rejected() {
        let (x, p) = setup(4, 8, 16, 7);
        let (_, tape) = ffn_forward(&x, &p, &SparsityPolicy::w1(), None).unwrap();
        assert!(matches!(
            ffn_backward(&DenseMatrix::zeros(4, 8), &tape, &p, &SparsityPolicy::dense()),
            Err(Error::PolicyMismatch(_))
        ));
        let vp = VenomParams::new(2, 2, 8).unwrap();
        let pol = SparsityPolicy::venom(vp, RouterConfig::with_experts(4));
        assert!(matches!(ffn_forward(&x, &p, &pol, None), Err(Error::PolicyMismatch(_))));
        assert!(ffn_forward(&x.transpose(), &p, &SparsityPolicy::dense(), None).is_err());
    }

    #[test]
    fn sequential_equals_parallel() {
        let (x, p, bank, pol) = venom_setup(8);
        let (a, ta) = ffn_forward_with(&x, &p, &pol, Some(&bank), Exec::Sequential, None).unwrap();
        let (b, tb) = ffn_forward_with(&x, &p, &pol, Some(&bank), Exec::Parallel, None).unwrap();
        assert!(a.bit_eq(&b));
        let ga = ffn_backward_with(&a, &ta, &p, &pol, Exec::Sequential).unwrap();
        let gb = ffn_backward_with(&b, &tb, &p, &pol, Exec::Parallel).unwrap();
        assert!(ga.dw1.bit_eq(&gb.dw1) && ga.dx.bit_eq(&gb.dx));
    }
}
