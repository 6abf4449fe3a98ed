//! FLOP accounting for transformer pretraining and Amdahl-style speedups
//! from accelerating only the feed-forward blocks.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::venom::VenomParams;

/// Model and batch shape. Field names follow the usual config-file keys;
/// `num_kv_heads` defaults to `num_heads` and `head_dim` to
/// `d_model / num_heads`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RooflineConfig {
    #[serde(default)]
    pub name: String,
    pub num_layers: u64,
    pub d_model: u64,
    pub d_ffn: u64,
    pub num_heads: u64,
    #[serde(default)]
    pub num_kv_heads: Option<u64>,
    #[serde(default)]
    pub head_dim: Option<u64>,
    pub batch_size: u64,
    pub seq_len: u64,
}

impl RooflineConfig {
    pub fn llama_1b() -> Self {
        Self {
            name: "llama-1b".into(),
            num_layers: 22,
            d_model: 2048,
            d_ffn: 8192,
            num_heads: 16,
            num_kv_heads: None,
            head_dim: None,
            batch_size: 2,
            seq_len: 8192,
        }
    }

    pub fn llama_7b() -> Self {
        Self {
            name: "llama-7b".into(),
            num_layers: 32,
            d_model: 4096,
            d_ffn: 16384,
            num_heads: 32,
            num_kv_heads: None,
            head_dim: None,
            batch_size: 2,
            seq_len: 8192,
        }
    }

    /// 405B-scale shape without grouped-query attention.
    pub fn llama_405b() -> Self {
        Self {
            name: "llama-405b".into(),
            num_layers: 126,
            d_model: 16384,
            d_ffn: 53248,
            num_heads: 128,
            num_kv_heads: None,
            head_dim: None,
            batch_size: 2,
            seq_len: 8192,
        }
    }

    pub fn kv_heads(&self) -> u64 {
        self.num_kv_heads.unwrap_or(self.num_heads)
    }

    pub fn head_dim(&self) -> u64 {
        self.head_dim.unwrap_or(self.d_model / self.num_heads.max(1))
    }

    /// Checks positivity. Returns a warning when the heads do not tile the
    /// model dimension.
    pub fn validate(&self) -> Result<Option<String>> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.kv_heads()),
            ("head_dim", self.head_dim()),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParams(format!("{name} must be positive")));
        }
        if self.num_heads * self.head_dim() != self.d_model {
            return Ok(Some(format!(
                "{}: num_heads * head_dim = {} differs from d_model = {}",
                self.name,
                self.num_heads * self.head_dim(),
                self.d_model
            )));
        }
        Ok(None)
    }

    pub fn tokens(&self) -> u64 {
        self.batch_size * self.seq_len
    }

    /// Per-layer FFN parameters, `3DF`.
    fn ffn_params(&self) -> u128 {
        3 * self.d_model as u128 * self.d_ffn as u128
    }

    /// Per-layer attention projection parameters, `2D(N+K)H`.
    fn attn_params(&self) -> u128 {
        2 * self.d_model as u128 * (self.num_heads + self.kv_heads()) as u128 * self.head_dim() as u128
    }

    /// `(3DF + 2D(N+K)H)·L`.
    pub fn params(&self) -> u128 {
        (self.ffn_params() + self.attn_params()) * self.num_layers as u128
    }
}

/// `6·B·T·(3DF + 2D(N+K)H)·L`.
pub fn total_flops(c: &RooflineConfig) -> u128 {
    6 * c.tokens() as u128 * c.params()
}

/// `3DF / (3DF + 2D(N+K)H)`; independent of batch, sequence and depth.
pub fn ffn_fraction(c: &RooflineConfig) -> f64 {
    let ffn = c.ffn_params() as f64;
    ffn / (ffn + c.attn_params() as f64)
}

/// `1 / ((1 − p) + p/s)`.
pub fn amdahl(p: f64, s: f64) -> f64 {
    1.0 / ((1.0 - p) + p / s)
}

/// Whole-step speedup when only the FFN share runs `ffn_speedup` times
/// faster.
pub fn end_to_end_speedup(c: &RooflineConfig, ffn_speedup: f64) -> Result<f64> {
    if !(ffn_speedup >= 1.0 && ffn_speedup.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "FFN speedup must be a finite value >= 1, got {ffn_speedup}"
        )));
    }
    Ok(amdahl(ffn_fraction(c), ffn_speedup))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub params: u64,
    pub ffn_frac: f64,
    pub attn_linear_frac: f64,
    pub sdpa_frac: f64,
}

/// FLOP shares per config with the attention score/value products
/// (`12·B·T²·D·L`) added to the two linear terms.
pub fn flop_fraction_sweep(configs: &[RooflineConfig]) -> Result<Vec<SweepRow>> {
    if configs.is_empty() {
        return Err(Error::InvalidParams("empty config list".into()));
    }
    configs
        .iter()
        .map(|c| {
            c.validate()?;
            let l = c.num_layers as f64;
            let bt = c.tokens() as f64;
            let ffn = 6.0 * bt * c.ffn_params() as f64 * l;
            let attn = 6.0 * bt * c.attn_params() as f64 * l;
            let sdpa = 12.0 * bt * c.seq_len as f64 * c.d_model as f64 * l;
            let total = ffn + attn + sdpa;
            let (ffn_frac, attn_linear_frac, sdpa_frac) = if total > 0.0 {
                (ffn / total, attn / total, sdpa / total)
            } else {
                (0.0, 0.0, 0.0)
            };
            Ok(SweepRow {
                model: c.name.clone(),
                params: u64::try_from(c.params()).unwrap_or(u64::MAX),
                ffn_frac,
                attn_linear_frac,
                sdpa_frac,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Memory,
    Compute,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepCost {
    pub step: &'static str,
    pub bytes: u128,
    pub flops: u128,
    pub bound: Bound,
}

impl StepCost {
    fn new(step: &'static str, bytes: u128, flops: u128, balance: f64) -> Self {
        // Memory-bound when the step moves more bytes per FLOP than the
        // machine can feed.
        let bound = if flops == 0 || bytes as f64 > balance * flops as f64 {
            Bound::Memory
        } else {
            Bound::Compute
        };
        Self {
            step,
            bytes,
            flops,
            bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub machine_balance: f64,
    pub steps: Vec<StepCost>,
}

impl OverheadReport {
    pub fn step(&self, name: &str) -> Option<&StepCost> {
        self.steps.iter().find(|s| s.step == name)
    }
}

const BYTES: u128 = 8;

/// Byte and FLOP estimates, per layer, for converting activations to V:N:M
/// and running the sparse products. Token count is `batch_size·seq_len`;
/// values are 8-byte reals. `machine_balance` is in bytes per FLOP.
pub fn conversion_overhead_model(
    c: &RooflineConfig,
    p: VenomParams,
    num_experts: u64,
    machine_balance: f64,
) -> Result<OverheadReport> {
    if num_experts == 0 || !(machine_balance > 0.0) {
        return Err(Error::InvalidParams(
            "need at least one expert and a positive machine balance".into(),
        ));
    }
    let t = c.tokens() as u128;
    let (d, f, e) = (c.d_model as u128, c.d_ffn as u128, num_experts as u128);
    let (n, m) = (p.n() as u128, p.m() as u128);
    let per_expert = f / e;
    let steps = vec![
        StepCost::new("routing", t * d * BYTES, 2 * t * d * e, machine_balance),
        StepCost::new("permutation", 2 * t * d * BYTES, 0, machine_balance),
        StepCost::new("sparsify24_scan", 2 * d * f * BYTES, 0, machine_balance),
        StepCost::new(
            "expert_matmul",
            (t * d + d * f + t * per_expert) * BYTES,
            2 * t * d * per_expert,
            machine_balance,
        ),
        StepCost::new(
            "venom_matmul",
            (t * f * n / m + f * d + t * d) * BYTES,
            2 * t * f * d * n / m,
            machine_balance,
        ),
    ];
    Ok(OverheadReport {
        machine_balance,
        steps,
    })
}
