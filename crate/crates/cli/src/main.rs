//! `sfk`: command-line front end for the sparse FFN kit.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sfk::ffn::{gradcheck_with, GradShape, SparsityPolicy};
use sfk::matcore::{gemm_with, load_matrix, rand_matrix, read_matrix, save_matrix, Dist, Dtype};
use sfk::roofline::{
    end_to_end_speedup, ffn_fraction, flop_fraction_sweep, total_flops, write_sweep_csv, RooflineConfig,
};
use sfk::router::RouterConfig;
use sfk::schedule::{schedule_speedup, TrainSchedule, DEFAULT_WARMUP};
use sfk::sparse24::{
    decode24, is_24_compliant, read_s24, sparsify24, sparsify24_transposed, spmm24_with, write_s24, SparsifyMode,
};
use sfk::trainkit::{run_training_with, ToyTask};
use sfk::venom::{read_venom, venom_check, venom_encode, venom_spmm_with, write_venom, VenomParams};
use sfk::{DenseMatrix, Exec};

/// Largest m·n·k `bench` runs without `--force`.
const BENCH_LIMIT: u128 = 1 << 33;

#[derive(Parser)]
#[command(name = "sfk", version, about = "2:4 and V:N:M sparse FFN toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Soft-threshold or greedy 2:4 sparsification of an SFK1 matrix into S24F.
    Sparsify24 {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Soft)]
        mode: Mode,
        /// Group down columns instead of along rows (packs the transpose).
        #[arg(long)]
        transpose: bool,
    },
    /// Encode an SFK1 matrix as V:N:M (VNMF).
    VenomEncode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_venom)]
        venom: VenomParams,
    },
    /// Check a file for 2:4 or V:N:M compliance.
    Check {
        #[arg(long = "in")]
        input: PathBuf,
        /// Check a dense file against these V:N:M parameters instead of 2:4.
        #[arg(long, value_parser = parse_venom)]
        venom: Option<VenomParams>,
    },
    /// Multiply a packed S24F or VNMF matrix by a dense SFK1 matrix.
    Spmm {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare FFN gradients with central finite differences.
    Gradcheck {
        /// Preset name (dense, w1, w1t, w1_w1t, w2, w2t, w1_w2, act24, venom, full) or a JSON file.
        #[arg(long, default_value = "dense")]
        policy: String,
        #[arg(long, value_parser = parse_triple, default_value = "8,16,32")]
        shape: (usize, usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, value_parser = parse_venom, default_value = "2,2,8")]
        venom: VenomParams,
        #[arg(long, default_value_t = 4)]
        experts: usize,
        /// Defaults to 1e-5 for dense and 1e-4 otherwise.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// FLOP fractions and Amdahl speedups for transformer configs.
    Roofline {
        /// Preset (llama-1b, llama-7b, llama-405b) or JSON file holding one config or a list.
        #[arg(long, required = true)]
        config: Vec<String>,
        /// Write the FLOP-fraction sweep as CSV.
        #[arg(long)]
        sweep: bool,
        /// CSV destination; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan a sparse-then-dense schedule and its end-to-end speedup.
    Schedule {
        #[arg(long)]
        total: usize,
        #[arg(long)]
        sparse: usize,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        /// Per-iteration speedup of the sparse phase.
        #[arg(long, default_value_t = 2.2)]
        speedup: f64,
        #[arg(long, value_parser = parse_venom, default_value = "64,2,16")]
        venom: VenomParams,
        #[arg(long, default_value_t = 16)]
        experts: usize,
        /// Write the schedule as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student FFN on a teacher-generated toy task.
    Train {
        #[arg(long, value_parser = parse_triple, default_value = "32,128,32")]
        dims: (usize, usize, usize),
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON schedule file; overrides --policy/--sparse/--warmup.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        policy: String,
        #[arg(long, value_parser = parse_venom, default_value = "8,2,16")]
        venom: VenomParams,
        #[arg(long, default_value_t = 8)]
        experts: usize,
        /// Sparse steps; defaults to all steps after warmup.
        #[arg(long)]
        sparse: Option<usize>,
        #[arg(long, default_value_t = 0)]
        warmup: usize,
        /// Per-step CSV of loss, activation zero fraction and policy.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON summary.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Instrumented multiply counts for dense, 2:4 and V:N:M products.
    Bench {
        #[arg(long, value_parser = parse_triple)]
        shape: (usize, usize, usize),
        #[arg(long, value_enum, default_value_t = Format::Dense)]
        format: Format,
        #[arg(long, value_parser = parse_venom, default_value = "64,2,16")]
        venom: VenomParams,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Allow m·n·k above 2^33.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Soft,
    Greedy,
}

impl From<Mode> for SparsifyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Soft => SparsifyMode::SoftThreshold,
            Mode::Greedy => SparsifyMode::GreedyMagnitude,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Dense,
    S24,
    Venom,
}

/// Refused because of a size guard (exit 3).
#[derive(Debug)]
struct Guard(String);

/// A result failed its own consistency check (exit 4).
#[derive(Debug)]
struct Invariant(String);

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Guard {}
impl std::error::Error for Invariant {}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

fn parse_triple(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    match parse_list(s)?[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated integers, got {s:?}")),
    }
}

fn parse_venom(s: &str) -> std::result::Result<VenomParams, String> {
    let (v, n, m) = parse_triple(s)?;
    VenomParams::new(v, n, m).map_err(|e| e.to_string())
}

fn exec() -> Exec {
    match std::env::var("SFK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(1) => Exec::Sequential,
        _ => Exec::Parallel,
    }
}

#[cfg(feature = "parallel")]
fn init_threads() {
    if let Some(n) = std::env::var("SFK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn init_threads() {}

fn policy_named(name: &str, venom: VenomParams, experts: usize) -> Result<SparsityPolicy> {
    let router = RouterConfig::with_experts(experts);
    let pol = match name {
        "dense" => SparsityPolicy::dense(),
        "w1" => SparsityPolicy::w1(),
        "w1t" => SparsityPolicy::w1t(),
        "w1_w1t" => SparsityPolicy::w1_w1t(),
        "w2" => SparsityPolicy::w2(),
        "w2t" => SparsityPolicy::w2t(),
        "w1_w2" => SparsityPolicy::w1_w2(),
        "act24" => SparsityPolicy::act24(),
        "venom" => SparsityPolicy::venom(venom, router),
        "full" => SparsityPolicy::full(venom, router),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("unknown policy or unreadable file {path:?}"))?;
            SparsityPolicy::from_json(&text)?
        }
    };
    pol.validate()?;
    Ok(pol)
}

fn magic(path: &Path) -> Result<(Vec<u8>, [u8; 4])> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let head = bytes.get(..4).context("file shorter than its magic")?;
    let m = head.try_into().unwrap();
    Ok((bytes, m))
}

fn cmd_sparsify24(input: &Path, out: &Path, mode: Mode, transpose: bool) -> Result<()> {
    let a = load_matrix(input)?;
    let s = if transpose {
        sparsify24_transposed(&a, mode.into())?
    } else {
        sparsify24(&a, mode.into())?
    };
    let d = decode24(&s);
    if !is_24_compliant(&d) {
        bail!(Invariant("sparsified output is not 2:4 compliant".into()));
    }
    fs::write(out, write_s24(&s))?;
    let src = if transpose { a.transpose() } else { a };
    let dropped = src
        .data()
        .iter()
        .zip(d.data())
        .filter(|(x, y)| **x != 0.0 && **y == 0.0)
        .count();
    let rel = src.sub(&d)?.sum_sq().sqrt() / src.sum_sq().sqrt().max(f64::MIN_POSITIVE);
    println!("shape {}x{}", s.rows(), s.cols());
    println!("nnz fraction {:.6}", s.nnz() as f64 / s.rows().max(1) as f64 / s.cols().max(1) as f64);
    println!("mask dropped {dropped} of {} input nonzeros; relative change {rel:.6}", src.nnz());
    Ok(())
}

fn cmd_venom_encode(input: &Path, out: &Path, p: VenomParams) -> Result<()> {
    let a = load_matrix(input)?;
    let v = venom_encode(&a, p)?;
    if !venom_check(&v.decode(), &p)? {
        bail!(Invariant("encoded matrix fails venom_check".into()));
    }
    fs::write(out, write_venom(&v))?;
    println!("shape {}x{}", v.rows(), v.cols());
    println!("structural sparsity {:.6}", p.sparsity());
    println!("measured zero fraction {:.6}", v.decode().zero_fraction());
    Ok(())
}

fn cmd_check(input: &Path, venom: Option<VenomParams>) -> Result<()> {
    let (bytes, m) = magic(input)?;
    let (kind, ok) = match &m {
        b"SFK1" => {
            let (a, _) = read_matrix(&bytes)?;
            match venom {
                Some(p) => ("dense vs V:N:M", venom_check(&a, &p)?),
                None => ("dense vs 2:4", is_24_compliant(&a)),
            }
        }
        b"S24F" => ("S24F", is_24_compliant(&decode24(&read_s24(&bytes)?))),
        b"VNMF" => {
            let v = read_venom(&bytes)?;
            ("VNMF", venom_check(&v.decode(), &v.params())?)
        }
        _ => bail!("unrecognised magic {:?}", String::from_utf8_lossy(&m)),
    };
    if ok {
        println!("{kind}: compliant");
        Ok(())
    } else {
        bail!("{kind}: not compliant")
    }
}

fn cmd_spmm(a: &Path, b: &Path, out: &Path) -> Result<()> {
    let rhs = load_matrix(b)?;
    let (bytes, m) = magic(a)?;
    let (c, mults, shape) = match &m {
        b"S24F" => {
            let s = read_s24(&bytes)?;
            let (c, n) = spmm24_with(&s, &rhs, exec())?;
            (c, n, s.shape())
        }
        b"VNMF" => {
            let v = read_venom(&bytes)?;
            let (c, n) = venom_spmm_with(&v, &rhs, exec())?;
            (c, n, v.shape())
        }
        _ => bail!("--a must be S24F or VNMF, found magic {:?}", String::from_utf8_lossy(&m)),
    };
    save_matrix(&c, out, Dtype::F64)?;
    let dense = (shape.0 * shape.1 * rhs.cols()) as u64;
    println!("output {}x{}", c.rows(), c.cols());
    println!("mults {mults} dense_mults {dense} ratio {}", dense as f64 / mults.max(1) as f64);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    policy: &str,
    shape: (usize, usize, usize),
    seed: u64,
    seeds: u64,
    venom: VenomParams,
    experts: usize,
    tol: Option<f64>,
) -> Result<()> {
    let pol = policy_named(policy, venom, experts)?;
    let tol = tol.unwrap_or(if pol.is_dense() { 1e-5 } else { 1e-4 });
    let shape = GradShape::new(shape.0, shape.1, shape.2);
    let mut worst = 0.0f64;
    for s in seed..seed + seeds {
        let r = gradcheck_with(&pol, shape, s, exec())?;
        worst = worst.max(r.max_error());
        println!("{}", serde_json::to_string(&r)?);
    }
    println!("policy {} worst {worst:.3e} tol {tol:e}", pol.tag());
    if worst >= tol {
        bail!(Invariant(format!("gradient error {worst:.3e} exceeds {tol:e}")));
    }
    Ok(())
}

fn load_configs(specs: &[String]) -> Result<Vec<RooflineConfig>> {
    let mut out = Vec::new();
    for s in specs {
        match s.as_str() {
            "llama-1b" => out.push(RooflineConfig::llama_1b()),
            "llama-7b" => out.push(RooflineConfig::llama_7b()),
            "llama-405b" => out.push(RooflineConfig::llama_405b()),
            path => {
                let text = fs::read_to_string(path).with_context(|| format!("unknown preset or unreadable file {path:?}"))?;
                let v: serde_json::Value = serde_json::from_str(&text)?;
                if v.is_array() {
                    out.extend(serde_json::from_value::<Vec<RooflineConfig>>(v)?);
                } else {
                    out.push(serde_json::from_value(v)?);
                }
            }
        }
    }
    for c in &out {
        if let Some(w) = c.validate()? {
            eprintln!("warning: {}: {w}", c.name);
        }
    }
    Ok(out)
}

fn cmd_roofline(config: &[String], sweep: bool, out: Option<&Path>) -> Result<()> {
    let configs = load_configs(config)?;
    if configs.len() == 1 || !sweep {
        for c in &configs {
            println!("{}: total_flops {} ffn_frac {}", c.name, total_flops(c), ffn_fraction(c));
            for s in [1.5, 7.0] {
                println!("{}: end_to_end_speedup(s={s}) {:.6}", c.name, end_to_end_speedup(c, s)?);
            }
        }
    }
    if sweep {
        let rows = flop_fraction_sweep(&configs)?;
        match out {
            Some(p) => write_sweep_csv(&rows, fs::File::create(p)?)?,
            None => write_sweep_csv(&rows, io::stdout().lock())?,
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_schedule(
    total: usize,
    sparse: usize,
    warmup: usize,
    speedup: f64,
    venom: VenomParams,
    experts: usize,
    out: Option<&Path>,
) -> Result<()> {
    let pol = SparsityPolicy::full(venom, RouterConfig::with_experts(experts));
    let s = TrainSchedule::new(total, sparse, warmup, pol)?;
    let e2e = schedule_speedup(&s, speedup)?;
    println!("sparse steps {:?}, dense steps {}", s.sparse_range(), s.dense_steps());
    println!("sparse fraction {:.6}", s.sparse_fraction());
    println!("end-to-end speedup at {speedup}x per sparse step: {e2e:.6}");
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&s)?)?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (i, h, o) = args.dims;
    let task = ToyTask::new(i, h, o, args.samples, args.noise, args.seed)?;
    let schedule = match &args.schedule {
        Some(p) => {
            let s: TrainSchedule = serde_json::from_str(&fs::read_to_string(p)?)?;
            s.sparse_policy.validate()?;
            s
        }
        None => {
            let pol = policy_named(&args.policy, args.venom, args.experts)?;
            let sparse = args.sparse.unwrap_or(args.steps.saturating_sub(args.warmup));
            TrainSchedule::new(args.steps, sparse, args.warmup, pol)?
        }
    };
    let report = run_training_with(&task, &schedule, args.lr, schedule.total_steps, exec())?;
    let summary = report.summary();
    if let Some(p) = &args.out {
        report.write_csv(fs::File::create(p)?)?;
    }
    if let Some(p) = &args.summary {
        fs::write(p, serde_json::to_string_pretty(&summary)?)?;
    }
    println!(
        "steps {} initial {:.6} final(smoothed) {:.6} p95 jump {:.3e} act zero {:.3}->{:.3}",
        summary.steps,
        summary.initial_loss,
        summary.final_loss,
        summary.p95_jump,
        summary.act_zero_first,
        summary.act_zero_last
    );
    Ok(())
}

struct TrainArgs {
    dims: (usize, usize, usize),
    samples: usize,
    noise: f64,
    steps: usize,
    lr: f64,
    seed: u64,
    schedule: Option<PathBuf>,
    policy: String,
    venom: VenomParams,
    experts: usize,
    sparse: Option<usize>,
    warmup: usize,
    out: Option<PathBuf>,
    summary: Option<PathBuf>,
}

fn cmd_bench(
    (m, n, k): (usize, usize, usize),
    format: Format,
    p: VenomParams,
    repeat: usize,
    seed: u64,
    force: bool,
) -> Result<()> {
    let volume = m as u128 * n as u128 * k as u128;
    if volume > BENCH_LIMIT && !force {
        bail!(Guard(format!("m*n*k = {volume} exceeds 2^33; pass --force to run anyway")));
    }
    let a = rand_matrix(m, k, seed, Dist::Normal)?;
    let b = rand_matrix(k, n, seed.wrapping_add(1), Dist::Normal)?;
    let dense = volume as u64;
    let run: Box<dyn Fn() -> sfk::Result<(DenseMatrix, u64)>> = match format {
        Format::Dense => Box::new(|| gemm_with(&a, &b, exec())),
        Format::S24 => {
            let s = sparsify24(&a, SparsifyMode::SoftThreshold)?;
            Box::new(move || spmm24_with(&s, &b, exec()))
        }
        Format::Venom => {
            let v = venom_encode(&a, p)?;
            Box::new(move || venom_spmm_with(&v, &b, exec()))
        }
    };
    let mut mults = 0;
    let t = Instant::now();
    for _ in 0..repeat.max(1) {
        mults = run()?.1;
    }
    let secs = t.elapsed().as_secs_f64() / repeat.max(1) as f64;
    let expected = match format {
        Format::Dense => 1.0,
        Format::S24 => 2.0,
        Format::Venom => (p.m() / p.n()) as f64,
    };
    let ratio = dense as f64 / mults.max(1) as f64;
    println!("shape (m,n,k) = ({m},{n},{k})");
    println!("mults {mults} dense_mults {dense}");
    println!("multiply-count ratio {ratio} (theoretical {expected})");
    println!("wall time {secs:.6}s per run (reference-only, not comparable to paper GPU numbers)");
    if ratio != expected {
        bail!(Invariant(format!("ratio {ratio} differs from {expected}")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Sparsify24 {
            input,
            out,
            mode,
            transpose,
        } => cmd_sparsify24(&input, &out, mode, transpose),
        Cmd::VenomEncode { input, out, venom } => cmd_venom_encode(&input, &out, venom),
        Cmd::Check { input, venom } => cmd_check(&input, venom),
        Cmd::Spmm { a, b, out } => cmd_spmm(&a, &b, &out),
        Cmd::Gradcheck {
            policy,
            shape,
            seed,
            seeds,
            venom,
            experts,
            tol,
        } => cmd_gradcheck(&policy, shape, seed, seeds, venom, experts, tol),
        Cmd::Roofline { config, sweep, out } => cmd_roofline(&config, sweep, out.as_deref()),
        Cmd::Schedule {
            total,
            sparse,
            warmup,
            speedup,
            venom,
            experts,
            out,
        } => cmd_schedule(total, sparse, warmup, speedup, venom, experts, out.as_deref()),
        Cmd::Train {
            dims,
            samples,
            noise,
            steps,
            lr,
            seed,
            schedule,
            policy,
            venom,
            experts,
            sparse,
            warmup,
            out,
            summary,
        } => cmd_train(TrainArgs {
            dims,
            samples,
            noise,
            steps,
            lr,
            seed,
            schedule,
            policy,
            venom,
            experts,
            sparse,
            warmup,
            out,
            summary,
        }),
        Cmd::Bench {
            shape,
            format,
            venom,
            repeat,
            seed,
            force,
        } => cmd_bench(shape, format, venom, repeat, seed, force),
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(io::stderr(), "error: {e:#}");
            if e.downcast_ref::<Guard>().is_some() {
                ExitCode::from(3)
            } else if e.downcast_ref::<Invariant>().is_some() {
                ExitCode::from(4)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
