//! Neuron-level expert routing.
//!
//! Columns of the first FFN weight are clustered offline into disjoint
//! experts. At run time every token is scored against the expert means,
//! tokens are grouped by expert, and the squared-ReLU activations are
//! restricted to each token's expert columns and emitted in V:N:M format.

mod bank;
mod cluster;
mod moe;
mod routing;

pub use bank::{load_bank, save_bank, BankManifest, ExpertBank};
pub use cluster::cluster_columns;
pub(crate) use moe::restrict_to_experts;
pub use moe::{batched_expert_matmul, batched_expert_matmul_with, moe_to_venom};
pub use routing::{
    apply_permutation, invert_permutation, route_tokens, PaddedLayout, Permuted, RoutingPlan,
};

use serde::{Deserialize, Serialize};

/// How expert token groups are aligned to `V`-row blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupPad {
    /// Append zero rows to each group until its size is a multiple of `V`;
    /// the padding is dropped again on the inverse permutation.
    #[default]
    ZeroRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub group_pad: GroupPad,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            num_experts: 16,
            top_k: 1,
            group_pad: GroupPad::ZeroRows,
        }
    }
}

impl RouterConfig {
    pub fn with_experts(num_experts: usize) -> Self {
        Self {
            num_experts,
            ..Self::default()
        }
    }
}
