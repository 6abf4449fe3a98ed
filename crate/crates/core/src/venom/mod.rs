//! V:N:M ("Venom") sparse format.
//!
//! A matrix is tiled into blocks of `V` consecutive rows by `M` consecutive
//! columns. Each block keeps four columns; the resulting four-column strips
//! are 2:4 pruned by greedy magnitude. At most `N = 2` of every `M` entries
//! in a row survive, so the sparsity is `1 - N/M`.

mod io;
mod matrix;
mod spmm;

pub use io::{read_venom, write_venom};
pub(crate) use matrix::top4_by_l1;
pub use matrix::{venom_check, venom_decode, venom_encode, VenomMatrix};
pub use spmm::{dense_venom_spmm, venom_spmm, venom_spmm_counted, venom_spmm_t, venom_spmm_with};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block geometry of the V:N:M format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct VenomParams {
    v: usize,
    n: usize,
    m: usize,
}

#[derive(Deserialize)]
struct RawParams {
    v: usize,
    n: usize,
    m: usize,
}

impl TryFrom<RawParams> for VenomParams {
    type Error = Error;

    fn try_from(r: RawParams) -> Result<Self> {
        VenomParams::new(r.v, r.n, r.m)
    }
}

pub const ALLOWED_M: [usize; 4] = [8, 16, 32, 64];

impl VenomParams {
    pub fn new(v: usize, n: usize, m: usize) -> Result<Self> {
        if v == 0 {
            return Err(Error::InvalidParams("V must be at least 1".into()));
        }
        if n != 2 {
            return Err(Error::InvalidParams(format!("N must be 2, got {n}")));
        }
        if !ALLOWED_M.contains(&m) {
            return Err(Error::InvalidParams(format!(
                "M must be one of {ALLOWED_M:?}, got {m}"
            )));
        }
        Ok(Self { v, n, m })
    }

    /// The three configurations benchmarked for activation sparsity.
    pub fn presets() -> [VenomParams; 3] {
        [
            VenomParams { v: 64, n: 2, m: 16 },
            VenomParams { v: 64, n: 2, m: 32 },
            VenomParams { v: 64, n: 2, m: 64 },
        ]
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Fraction of zeros guaranteed by the format.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.n as f64 / self.m as f64
    }

    /// Ideal multiply reduction versus a dense product, `M / N`.
    pub fn speedup_ceiling(&self) -> f64 {
        self.m as f64 / self.n as f64
    }
}

/// `1 - N/M`.
pub fn venom_sparsity(p: &VenomParams) -> f64 {
    p.sparsity()
}
