//! Sparse/dense step plans and their end-to-end speedup.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::SparsityPolicy;
use crate::router::RouterConfig;
use crate::venom::VenomParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOrder {
    /// Dense warmup, then the sparse steps, then dense steps to recover.
    #[default]
    SparseFirst,
}

/// Steps `[0, venom_warmup)` are dense, `[venom_warmup, venom_warmup +
/// sparse_steps)` sparse, the rest dense. Warmup counts as dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_steps: usize,
    pub sparse_steps: usize,
    pub venom_warmup: usize,
    #[serde(default)]
    pub order: PhaseOrder,
    pub sparse_policy: SparsityPolicy,
}

pub const DEFAULT_WARMUP: usize = 1000;

/// Schedule whose sparse steps run the full recipe with `(64, 2, 16)`
/// activations and 16 experts.
pub fn build_schedule(total: usize, sparse: usize, warmup: usize) -> Result<TrainSchedule> {
    let p = VenomParams::new(64, 2, 16)?;
    TrainSchedule::new(total, sparse, warmup, SparsityPolicy::full(p, RouterConfig::default()))
}

impl TrainSchedule {
    pub fn new(total: usize, sparse: usize, warmup: usize, sparse_policy: SparsityPolicy) -> Result<Self> {
        if warmup.checked_add(sparse).is_none_or(|end| end > total) {
            return Err(Error::InvalidParams(format!(
                "warmup {warmup} + sparse {sparse} exceeds {total} total steps"
            )));
        }
        sparse_policy.validate()?;
        Ok(Self {
            total_steps: total,
            sparse_steps: sparse,
            venom_warmup: warmup,
            order: PhaseOrder::SparseFirst,
            sparse_policy,
        })
    }

    /// Every step sparse, no warmup.
    pub fn all_sparse(total: usize, sparse_policy: SparsityPolicy) -> Result<Self> {
        Self::new(total, total, 0, sparse_policy)
    }

    pub fn all_dense(total: usize) -> Self {
        Self::new(total, 0, 0, SparsityPolicy::dense()).expect("always feasible")
    }

    pub fn sparse_range(&self) -> Range<usize> {
        self.venom_warmup..self.venom_warmup + self.sparse_steps
    }

    pub fn dense_steps(&self) -> usize {
        self.total_steps - self.sparse_steps
    }

    pub fn sparse_fraction(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.sparse_steps as f64 / self.total_steps as f64
        }
    }

    pub fn is_sparse(&self, step: usize) -> bool {
        self.sparse_range().contains(&step)
    }

    pub fn policy_at(&self, step: usize) -> SparsityPolicy {
        if self.is_sparse(step) {
            self.sparse_policy.clone()
        } else {
            SparsityPolicy::dense()
        }
    }
}

/// `total / (dense + sparse / s)`: the wall-clock gain of the schedule when
/// a sparse step is `s` times faster than a dense one.
pub fn schedule_speedup(s: &TrainSchedule, per_iter_speedup: f64) -> Result<f64> {
    if !(per_iter_speedup >= 1.0 && per_iter_speedup.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "per-iteration speedup must be a finite value >= 1, got {per_iter_speedup}"
        )));
    }
    if s.total_steps == 0 {
        return Ok(1.0);
    }
    let cost = s.dense_steps() as f64 + s.sparse_steps as f64 / per_iter_speedup;
    Ok(s.total_steps as f64 / cost)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(build_schedule(60000, 30000, 1000).unwrap().sparse_range(), 1000..31000);
        assert_eq!(build_schedule(48000, 10000, 1000).unwrap().sparse_range(), 1000..11000);
        let s = build_schedule(10, 0, 0).unwrap();
        assert!((0..10).all(|i| !s.is_sparse(i) && s.policy_at(i).is_dense()));
        assert!(build_schedule(10, 8, 3).is_err());
    }

    #[test]
    fn phases_and_policies() {
        let s = build_schedule(10, 4, 2).unwrap();
        let sparse: Vec<bool> = (0..10).map(|i| s.is_sparse(i)).collect();
        assert_eq!(sparse, [false, false, true, true, true, true, false, false, false, false]);
        assert_eq!(s.policy_at(3).tag(), "w1+w2t+venom(64:2:16)");
        assert_eq!(s.dense_steps(), 6);
    }

    #[test]
    fn speedup_values() {
        let s = build_schedule(60000, 30000, 1000).unwrap();
        assert!((schedule_speedup(&s, 2.2).unwrap() - 1.375).abs() < 1e-12);
        assert_eq!(schedule_speedup(&s, 1.0).unwrap(), 1.0);
        assert_eq!(schedule_speedup(&build_schedule(10, 0, 0).unwrap(), 3.0).unwrap(), 1.0);
        let s7 = build_schedule(48000, 10000, 1000).unwrap();
        let v = schedule_speedup(&s7, 2.2).unwrap();
        assert!((v - 48000.0 / (38000.0 + 10000.0 / 2.2)).abs() < 1e-12);
        assert!(schedule_speedup(&s, 0.5).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let s = build_schedule(100, 40, 10).unwrap();
        let back: TrainSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
