//! Squared-ReLU feed-forward block with switchable sparse operands.
//!
//! `y1 = x·W1`, `y2 = relu(y1)²`, `y3 = y2·W2`, and the matching backward
//! products. A [`SparsityPolicy`] decides which operand of each product is
//! sparse: the weights through 2:4 sparsification of `W` and/or `Wᵀ`, the
//! activations through 2:4 or routed V:N:M.

mod gradcheck;
mod pass;
mod weights;

pub use gradcheck::{gradcheck, gradcheck_with, GradShape, GradcheckReport};
pub use pass::{
    ffn_backward, ffn_backward_with, ffn_forward, ffn_forward_with, ActPattern, FfnGrads, FfnTape,
    Operand, OperandLog, Product, ProductRecord,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{rand_matrix, DenseMatrix, Dist};
use crate::router::{ExpertBank, RouterConfig};
use crate::sparse24::SparsifyMode;
use crate::venom::VenomParams;

/// Weights of one block: `w1` is `d_in × hidden`, `w2` is `hidden × d_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

impl FfnParams {
    pub fn new(w1: DenseMatrix, w2: DenseMatrix) -> Result<Self> {
        if w1.cols() != w2.rows() {
            return Err(Error::ShapeMismatch {
                op: "ffn params",
                left: w1.shape(),
                right: w2.shape(),
            });
        }
        Ok(Self { w1, w2 })
    }

    /// Normal entries scaled by `1/sqrt(fan_in)`.
    pub fn random(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Result<Self> {
        let w1 = rand_matrix(d_in, hidden, seed, Dist::Normal)?.scale(1.0 / (d_in as f64).sqrt());
        let w2 = rand_matrix(hidden, d_out, seed.wrapping_add(1), Dist::Normal)?
            .scale(1.0 / (hidden as f64).sqrt());
        Self::new(w1, w2)
    }

    pub fn d_in(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.cols()
    }

    /// Reorders hidden units so each expert of `bank` owns a contiguous
    /// range, returning the relabelled bank. The block computes the same
    /// function afterwards; only the hidden-unit order changes.
    pub fn align_to_bank(&self, bank: &ExpertBank) -> Result<(Self, ExpertBank)> {
        if bank.d_ffn() != self.hidden() {
            return Err(Error::InvalidParams(format!(
                "bank covers {} hidden units, block has {}",
                bank.d_ffn(),
                self.hidden()
            )));
        }
        let order = bank.contiguous_order();
        let rows: Vec<Option<usize>> = order.iter().copied().map(Some).collect();
        let params = Self {
            w1: self.w1.gather_cols(&order),
            w2: self.w2.gather_rows(&rows),
        };
        Ok((params, bank.to_contiguous()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    #[default]
    Dense,
    /// Greedy 2:4 on `y2`.
    Act24,
    /// Routed V:N:M on `y2`.
    Venom,
}

/// Which weight the backward transposed product uses when both `W` and
/// `Wᵀ` sparsification are requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransposeMask {
    /// One effective weight, the `Wᵀ` sparsifier applied after the `W`
    /// sparsifier, used by every product. Gradients are exact.
    #[default]
    Shared,
    /// Forward uses `sparsify24(W)`; the transposed backward product uses an
    /// independent `sparsify24(Wᵀ)`. Gradients pass straight through the
    /// second mask, so they are not the gradient of the forward function.
    BackwardOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparsityPolicy {
    pub w1_sparse: bool,
    pub w1t_sparse: bool,
    pub w2_sparse: bool,
    pub w2t_sparse: bool,
    pub act_mode: ActMode,
    pub venom: Option<VenomParams>,
    pub router: Option<RouterConfig>,
    pub weight_mode: SparsifyMode,
    pub transpose_mask: TransposeMask,
    /// Replace every mask by keep-all while still running the routing
    /// plumbing. Used to check that the sparse paths reduce to dense.
    pub all_keep: bool,
}

impl Default for SparsityPolicy {
    fn default() -> Self {
        Self::dense()
    }
}

impl SparsityPolicy {
    pub fn dense() -> Self {
        Self {
            w1_sparse: false,
            w1t_sparse: false,
            w2_sparse: false,
            w2t_sparse: false,
            act_mode: ActMode::Dense,
            venom: None,
            router: None,
            weight_mode: SparsifyMode::SoftThreshold,
            transpose_mask: TransposeMask::Shared,
            all_keep: false,
        }
    }

    pub fn w1() -> Self {
        Self {
            w1_sparse: true,
            ..Self::dense()
        }
    }

    pub fn w1t() -> Self {
        Self {
            w1t_sparse: true,
            ..Self::dense()
        }
    }

    pub fn w1_w1t() -> Self {
        Self {
            w1_sparse: true,
            w1t_sparse: true,
            ..Self::dense()
        }
    }

    pub fn w2() -> Self {
        Self {
            w2_sparse: true,
            ..Self::dense()
        }
    }

    pub fn w2t() -> Self {
        Self {
            w2t_sparse: true,
            ..Self::dense()
        }
    }

    pub fn w1_w2() -> Self {
        Self {
            w1_sparse: true,
            w2_sparse: true,
            ..Self::dense()
        }
    }

    pub fn act24() -> Self {
        Self {
            act_mode: ActMode::Act24,
            ..Self::dense()
        }
    }

    pub fn venom(p: VenomParams, router: RouterConfig) -> Self {
        Self {
            act_mode: ActMode::Venom,
            venom: Some(p),
            router: Some(router),
            ..Self::dense()
        }
    }

    /// The complete recipe: soft-thresholded `W1` in the first product,
    /// soft-thresholded `W2ᵀ` for `dy2`, routed V:N:M activations for the
    /// other four products.
    pub fn full(p: VenomParams, router: RouterConfig) -> Self {
        Self {
            w1_sparse: true,
            w2t_sparse: true,
            ..Self::venom(p, router)
        }
    }

    pub fn with_weight_mode(mut self, mode: SparsifyMode) -> Self {
        self.weight_mode = mode;
        self
    }

    pub fn with_all_keep(mut self) -> Self {
        self.all_keep = true;
        self
    }

    pub fn any_weight_sparse(&self) -> bool {
        self.w1_sparse || self.w1t_sparse || self.w2_sparse || self.w2t_sparse
    }

    pub fn is_dense(&self) -> bool {
        !self.any_weight_sparse() && self.act_mode == ActMode::Dense
    }

    pub fn router_config(&self) -> RouterConfig {
        self.router.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        match (self.act_mode, self.venom) {
            (ActMode::Venom, None) => Err(Error::PolicyMismatch(
                "venom activations need venom parameters".into(),
            )),
            (ActMode::Dense | ActMode::Act24, Some(_)) => Err(Error::PolicyMismatch(
                "venom parameters given without venom activations".into(),
            )),
            _ => {
                let r = self.router_config();
                if r.num_experts == 0 || r.top_k == 0 || r.top_k > r.num_experts {
                    return Err(Error::PolicyMismatch(format!(
                        "router needs 1 <= top_k <= num_experts, got {} of {}",
                        r.top_k, r.num_experts
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    /// Short label such as `w1+w2t+venom(64:2:16)`.
    pub fn tag(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for (on, name) in [
            (self.w1_sparse, "w1"),
            (self.w1t_sparse, "w1t"),
            (self.w2_sparse, "w2"),
            (self.w2t_sparse, "w2t"),
        ] {
            if on {
                parts.push(name.into());
            }
        }
        match (self.act_mode, self.venom) {
            (ActMode::Act24, _) => parts.push("act24".into()),
            (ActMode::Venom, Some(p)) => parts.push(format!("venom({}:{}:{})", p.v(), p.n(), p.m())),
            _ => {}
        }
        let mut tag = if parts.is_empty() {
            "dense".to_string()
        } else {
            parts.join("+")
        };
        if self.any_weight_sparse() && self.weight_mode == SparsifyMode::GreedyMagnitude {
            tag.push_str("-hard");
        }
        if self.transpose_mask == TransposeMask::BackwardOnly {
            tag.push_str("-bwdmask");
        }
        if self.all_keep {
            tag.push_str("-keep");
        }
        tag
    }
}

/// `max(y, 0)²` elementwise.
pub fn squared_relu(y1: &DenseMatrix) -> DenseMatrix {
    y1.map(|v| if v > 0.0 { v * v } else { 0.0 })
}

/// `2·dy2·max(y1, 0)` elementwise.
pub fn squared_relu_backward(dy2: &DenseMatrix, y1: &DenseMatrix) -> Result<DenseMatrix> {
    if dy2.shape() != y1.shape() {
        return Err(Error::ShapeMismatch {
            op: "squared_relu_backward",
            left: dy2.shape(),
            right: y1.shape(),
        });
    }
    let data = dy2
        .data()
        .iter()
        .zip(y1.data())
        .map(|(&g, &y)| if y > 0.0 { 2.0 * g * y } else { 0.0 })
        .collect();
    Ok(DenseMatrix::from_vec_unchecked(y1.rows(), y1.cols(), data))
}
