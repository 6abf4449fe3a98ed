//! Sparse feed-forward training kit.
//!
//! Reference CPU implementations of 2:4 weight sparsification by soft
//! thresholding, V:N:M ("Venom") activation sparsity produced by
//! neuron-level expert routing, the sparse forward/backward operand
//! placement of a squared-ReLU FFN block, and the FLOP and schedule
//! arithmetic used to reason about end-to-end training speedups.

mod codec;
pub mod error;
pub mod exec;
pub mod ffn;
pub mod matcore;
pub mod roofline;
pub mod router;
pub mod schedule;
pub mod sparse24;
pub mod trainkit;
pub mod venom;

pub use error::{Error, Result};
pub use exec::Exec;
pub use matcore::{gemm, rand_matrix, DenseMatrix, Dist, Shape3};
