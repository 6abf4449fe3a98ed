//! Small teacher-student regression harness for comparing sparsity
//! schedules.
//!
//! A fixed random dense block (the teacher) labels a fixed set of Gaussian
//! inputs; a student block of the same shape is trained on them by
//! full-batch gradient descent, switching sparsity policy per step.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ffn::{ffn_backward_with, ffn_forward_with, squared_relu, ActMode, FfnParams};
use crate::matcore::{gemm, rand_matrix, DenseMatrix, Dist};
use crate::router::{cluster_columns, ExpertBank};
use crate::schedule::TrainSchedule;

/// Window for the final smoothed loss.
pub const SMOOTHING_WINDOW: usize = 100;

const DIVERGED_LOSS: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub teacher: FfnParams,
    pub noise_std: f64,
    pub seed: u64,
    inputs: DenseMatrix,
    targets: DenseMatrix,
}

impl ToyTask {
    /// Draws the teacher, `samples` inputs and their noisy targets from
    /// `seed`.
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        samples: usize,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if [input_dim, hidden_dim, output_dim].iter().any(|d| d % 4 != 0) {
            return Err(Error::InvalidParams(format!(
                "dims must be multiples of 4, got {input_dim}x{hidden_dim}x{output_dim}"
            )));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidParams(format!("noise_std {noise_std}")));
        }
        let teacher = FfnParams::random(input_dim, hidden_dim, output_dim, seed)?;
        let inputs = rand_matrix(samples, input_dim, seed.wrapping_add(2), Dist::Normal)?;
        let clean = gemm(&squared_relu(&gemm(&inputs, &teacher.w1)?), &teacher.w2)?;
        let noise = rand_matrix(samples, output_dim, seed.wrapping_add(3), Dist::Normal)?;
        let targets = clean.add(&noise.scale(noise_std))?;
        Ok(Self {
            input_dim,
            hidden_dim,
            output_dim,
            teacher,
            noise_std,
            seed,
            inputs,
            targets,
        })
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn targets(&self) -> &DenseMatrix {
        &self.targets
    }

    /// Student starting point, independent of the teacher.
    pub fn student_init(&self) -> Result<FfnParams> {
        FfnParams::random(
            self.input_dim,
            self.hidden_dim,
            self.output_dim,
            self.seed.wrapping_add(0x5eed),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Fraction of zeros in `relu(y1)²` before any activation mask.
    pub act_zero_frac: Vec<f64>,
    pub policy_tags: Vec<String>,
    pub schedule: TrainSchedule,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub min_loss: f64,
    pub p95_jump: f64,
    pub max_jump: f64,
    pub act_zero_first: f64,
    pub act_zero_last: f64,
    pub schedule: TrainSchedule,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    step: usize,
    loss: f64,
    act_zero_frac: f64,
    policy_tag: &'a str,
}

impl TrainReport {
    /// Mean of the last [`SMOOTHING_WINDOW`] losses.
    pub fn final_loss(&self) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(SMOOTHING_WINDOW)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    /// `|loss[s+1] − loss[s]|` for every step.
    pub fn loss_jumps(&self) -> Vec<f64> {
        self.losses.windows(2).map(|w| (w[1] - w[0]).abs()).collect()
    }

    /// Nearest-rank quantile of the per-step jumps.
    pub fn jump_quantile(&self, q: f64) -> f64 {
        let mut j = self.loss_jumps();
        if j.is_empty() {
            return 0.0;
        }
        j.sort_by(f64::total_cmp);
        let rank = ((q * j.len() as f64).ceil() as usize).clamp(1, j.len());
        j[rank - 1]
    }

    pub fn sparsity_trace(&self) -> &[f64] {
        &self.act_zero_frac
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            steps: self.losses.len(),
            seed: self.seed,
            lr: self.lr,
            initial_loss: self.losses.first().copied().unwrap_or(f64::NAN),
            final_loss: self.final_loss(),
            min_loss: self.losses.iter().copied().fold(f64::INFINITY, f64::min),
            p95_jump: self.jump_quantile(0.95),
            max_jump: self.loss_jumps().into_iter().fold(0.0, f64::max),
            act_zero_first: self.act_zero_frac.first().copied().unwrap_or(f64::NAN),
            act_zero_last: self.act_zero_frac.last().copied().unwrap_or(f64::NAN),
            schedule: self.schedule.clone(),
        }
    }

    /// CSV with header `step,loss,act_zero_frac,policy_tag`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (step, ((&loss, &act_zero_frac), tag)) in self
            .losses
            .iter()
            .zip(&self.act_zero_frac)
            .zip(&self.policy_tags)
            .enumerate()
        {
            w.serialize(CsvRow {
                step,
                loss,
                act_zero_frac,
                policy_tag: tag,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn run_training(task: &ToyTask, schedule: &TrainSchedule, lr: f64, steps: usize) -> Result<TrainReport> {
    run_training_with(task, schedule, lr, steps, Exec::default())
}

/// Gradient descent on `1/(2n)·Σ‖y − t‖²` over the task's full sample set.
///
/// At the first sparse step of a routed policy the student's hidden units
/// are clustered into experts and reordered so each expert is contiguous;
/// the bank is kept for the rest of the run.
pub fn run_training_with(
    task: &ToyTask,
    schedule: &TrainSchedule,
    lr: f64,
    steps: usize,
    exec: Exec,
) -> Result<TrainReport> {
    if steps != schedule.total_steps {
        return Err(Error::InvalidParams(format!(
            "{steps} steps requested for a {}-step schedule",
            schedule.total_steps
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidParams(format!("learning rate {lr}")));
    }
    let sparse = &schedule.sparse_policy;
    if sparse.act_mode == ActMode::Venom {
        let m = sparse.venom.expect("validated").m();
        if task.hidden_dim % m != 0 {
            return Err(Error::NotDivisible {
                what: "hidden_dim",
                value: task.hidden_dim,
                by: m,
            });
        }
    }
    let x = task.inputs();
    let n = x.rows() as f64;
    let mut params = task.student_init()?;
    let mut bank: Option<ExpertBank> = None;
    let mut report = TrainReport {
        losses: Vec::with_capacity(steps),
        act_zero_frac: Vec::with_capacity(steps),
        policy_tags: Vec::with_capacity(steps),
        schedule: schedule.clone(),
        lr,
        seed: task.seed,
    };

    for step in 0..steps {
        let pol = schedule.policy_at(step);
        if pol.act_mode == ActMode::Venom && bank.is_none() {
            let b = cluster_columns(&params.w1, &pol.router_config(), task.seed)?;
            let (aligned, b) = params.align_to_bank(&b)?;
            b.check_venom_windows(&pol.venom.expect("validated"))?;
            params = aligned;
            bank = Some(b);
        }
        let (y3, tape) = ffn_forward_with(x, &params, &pol, bank.as_ref(), exec, None)?;
        let resid = y3.sub(task.targets())?;
        let loss = 0.5 * resid.sum_sq() / n;
        if !loss.is_finite() || loss > DIVERGED_LOSS {
            return Err(Error::Diverged { step });
        }
        report.losses.push(loss);
        report.act_zero_frac.push(tape.y2().zero_fraction());
        report.policy_tags.push(pol.tag());

        let g = ffn_backward_with(&resid.scale(1.0 / n), &tape, &params, &pol, exec)?;
        params = FfnParams {
            w1: params.w1.sub(&g.dw1.scale(lr))?,
            w2: params.w2.sub(&g.dw2.scale(lr))?,
        };
    }
    Ok(report)
}

/// Runs one training per task, in parallel on `exec`; each run itself is
/// sequential.
pub fn run_sweep(
    tasks: &[ToyTask],
    schedule: &TrainSchedule,
    lr: f64,
    exec: Exec,
) -> Vec<Result<TrainReport>> {
    exec.map(tasks.len(), |i| {
        run_training_with(&tasks[i], schedule, lr, schedule.total_steps, Exec::Sequential)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffn::SparsityPolicy;
    use crate::sparse24::SparsifyMode;

    fn task(seed: u64) -> ToyTask {
        ToyTask::new(8, 32, 8, 64, 0.0, seed).unwrap()
    }

    #[test]
    fn dense_run_converges() {
        let t = task(1);
        let r = run_training(&t, &TrainSchedule::all_dense(400), 0.05, 400).unwrap();
        assert!(r.final_loss() < 0.1 * r.losses[0], "{} -> {}", r.losses[0], r.final_loss());
        assert_eq!(r.sparsity_trace().len(), 400);
        assert!((r.act_zero_frac[0] - 0.5).abs() < 0.1);
    }

    #[test]
    fn deterministic() {
        let t = task(2);
        let s = TrainSchedule::new(50, 20, 10, SparsityPolicy::w1()).unwrap();
        let a = run_training(&t, &s, 0.05, 50).unwrap();
        let b = run_training_with(&t, &s, 0.05, 50, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_keep_phase_matches_dense_bitwise() {
        let t = task(3);
        let keep = SparsityPolicy::w1_w2().with_weight_mode(SparsifyMode::GreedyMagnitude).with_all_keep();
        let a = run_training(&t, &TrainSchedule::new(60, 30, 10, keep).unwrap(), 0.05, 60).unwrap();
        let b = run_training(&t, &TrainSchedule::all_dense(60), 0.05, 60).unwrap();
        assert!(a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn divergence_reports_step() {
        let t = task(4);
        match run_training(&t, &TrainSchedule::all_dense(200), 50.0, 200) {
            Err(Error::Diverged { step }) => assert!(step > 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_and_summary() {
        let t = task(5);
        let r = run_training(&t, &TrainSchedule::all_dense(5), 0.05, 5).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss,act_zero_frac,policy_tag\n0,"));
        assert_eq!(text.lines().count(), 6);
        let s = r.summary();
        assert_eq!(s.steps, 5);
        assert!(serde_json::to_string(&s).unwrap().contains("\"final_loss\""));
        assert!(run_training(&t, &TrainSchedule::all_dense(5), 0.05, 6).is_err());
    }
}
