//! Central-difference verification of the backward pass.

use serde::{Deserialize, Serialize};

use super::weights::EffWeight;
use super::{ffn_backward_with, ffn_forward_with, ActMode, FfnParams, FfnTape, SparsityPolicy};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::matcore::{rand_matrix, DenseMatrix, Dist};
use crate::router::{cluster_columns, ExpertBank};

const STEP: f64 = 1e-6;
const MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradShape {
    pub batch: usize,
    pub d_model: usize,
    pub d_ffn: usize,
}

impl GradShape {
    pub fn new(batch: usize, d_model: usize, d_ffn: usize) -> Self {
        Self {
            batch,
            d_model,
            d_ffn,
        }
    }
}

/// Worst relative error per gradient tensor: `max|analytic − numeric|`
/// over `max|numeric|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub policy: String,
    pub shape: GradShape,
    pub seed: u64,
    pub dx: f64,
    pub dw1: f64,
    pub dw2: f64,
    pub checked: usize,
    /// Coordinates skipped because a step of `±h` changes a weight
    /// sparsifier's group ordering or signs.
    pub excluded: usize,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.dx.max(self.dw1).max(self.dw2)
    }
}

pub fn gradcheck(policy: &SparsityPolicy, shape: GradShape, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(policy, shape, seed, Exec::default())
}

struct Problem<'a> {
    pol: &'a SparsityPolicy,
    bank: Option<ExpertBank>,
    tape: FfnTape,
}

impl Problem<'_> {
    fn loss(&self, x: &DenseMatrix, p: &FfnParams) -> Result<f64> {
        let (y3, _) = ffn_forward_with(x, p, self.pol, self.bank.as_ref(), Exec::Sequential, Some(&self.tape))?;
        Ok(0.5 * y3.sum_sq())
    }
}

/// Checks the backward pass of `policy` against central differences of
/// `½‖y3‖²` at a random point. Activation masks and routing are frozen at
/// the point; weight sparsifiers stay live. Coordinates run on `exec`.
pub fn gradcheck_with(
    policy: &SparsityPolicy,
    shape: GradShape,
    seed: u64,
    exec: Exec,
) -> Result<GradcheckReport> {
    let GradShape {
        batch,
        d_model,
        d_ffn,
    } = shape;
    if [batch, d_model, d_ffn].iter().any(|&d| d == 0 || d > MAX_DIM) {
        return Err(Error::InvalidParams(format!(
            "gradcheck dims must be in 1..={MAX_DIM}, got {batch}x{d_model}x{d_ffn}"
        )));
    }
    policy.validate()?;
    let x = rand_matrix(batch, d_model, seed, Dist::Normal)?;
    let mut params = FfnParams::random(d_model, d_ffn, d_model, seed.wrapping_add(1))?;
    let mut bank = None;
    if policy.act_mode == ActMode::Venom {
        let b = cluster_columns(&params.w1, &policy.router_config(), seed)?;
        let (aligned, b) = params.align_to_bank(&b)?;
        b.check_venom_windows(&policy.venom.expect("validated"))?;
        params = aligned;
        bank = Some(b);
    }

    let (y3, tape) = ffn_forward_with(&x, &params, policy, bank.as_ref(), exec, None)?;
    let grads = ffn_backward_with(&y3, &tape, &params, policy, exec)?;
    let prob = Problem { pol: policy, bank, tape };

    let sig1 = EffWeight::new(&params.w1, policy.w1_sparse, policy.w1t_sparse, policy)?.signature();
    let sig2 = EffWeight::new(&params.w2, policy.w2_sparse, policy.w2t_sparse, policy)?.signature();

    let sizes = [x.len(), params.w1.len(), params.w2.len()];
    let total: usize = sizes.iter().sum();
    let numeric: Vec<Result<Option<f64>>> = exec.map(total, |mut i| {
        let tensor = if i < sizes[0] {
            0
        } else if i < sizes[0] + sizes[1] {
            i -= sizes[0];
            1
        } else {
            i -= sizes[0] + sizes[1];
            2
        };
        let eval = |d: f64| -> Result<Option<f64>> {
            match tensor {
                0 => {
                    let (r, c) = (i / x.cols(), i % x.cols());
                    prob.loss(&x.with_entry(r, c, x.get(r, c) + d), &params).map(Some)
                }
                1 => {
                    let w = &params.w1;
                    let w = w.with_entry(i / w.cols(), i % w.cols(), w.data()[i] + d);
                    if EffWeight::new(&w, policy.w1_sparse, policy.w1t_sparse, policy)?.signature() != sig1 {
                        return Ok(None);
                    }
                    prob.loss(&x, &FfnParams { w1: w, w2: params.w2.clone() }).map(Some)
                }
                _ => {
                    let w = &params.w2;
                    let w = w.with_entry(i / w.cols(), i % w.cols(), w.data()[i] + d);
                    if EffWeight::new(&w, policy.w2_sparse, policy.w2t_sparse, policy)?.signature() != sig2 {
                        return Ok(None);
                    }
                    prob.loss(&x, &FfnParams { w1: params.w1.clone(), w2: w }).map(Some)
                }
            }
        };
        match (eval(STEP)?, eval(-STEP)?) {
            (Some(up), Some(down)) => Ok(Some((up - down) / (2.0 * STEP))),
            _ => Ok(None),
        }
    });

    let analytic = [&grads.dx, &grads.dw1, &grads.dw2];
    let mut errs = [0.0f64; 3];
    let (mut checked, mut excluded) = (0, 0);
    let mut offset = 0;
    for (t, &size) in sizes.iter().enumerate() {
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for j in 0..size {
            match numeric[offset + j].as_ref().map_err(|e| Error::Corrupt(e.to_string()))? {
                Some(n) => {
                    checked += 1;
                    diff = diff.max((analytic[t].data()[j] - n).abs());
                    scale = scale.max(n.abs());
                }
                None => excluded += 1,
            }
        }
        errs[t] = diff / scale.max(1e-12);
        offset += size;
    }
    Ok(GradcheckReport {
        policy: policy.tag(),
        shape,
        seed,
        dx: errs[0],
        dw1: errs[1],
        dw2: errs[2],
        checked,
        excluded,
    })
}
