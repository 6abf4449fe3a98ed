//! Sequential vs parallel execution of the core kernels.
//!
//! Build with `--no-default-features` to see the pure sequential fallback;
//! there the `parallel` cases take the sequential path too.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sfk::ffn::{gradcheck_with, GradShape, SparsityPolicy};
use sfk::matcore::{gemm_with, rand_matrix, Dist};
use sfk::sparse24::{sparsify24, spmm24_with, SparsifyMode};
use sfk::venom::{venom_encode, venom_spmm_with, VenomParams};
use sfk::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn kernels(c: &mut Criterion) {
    let (m, k, n) = (256, 512, 128);
    let a = rand_matrix(m, k, 1, Dist::Normal).unwrap();
    let b = rand_matrix(k, n, 2, Dist::Normal).unwrap();
    let s24 = sparsify24(&a, SparsifyMode::SoftThreshold).unwrap();
    let vm = venom_encode(&a, VenomParams::new(64, 2, 16).unwrap()).unwrap();

    let mut g = c.benchmark_group("matmul_256x512x128");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("gemm", name), &exec, |bch, &e| {
            bch.iter(|| gemm_with(black_box(&a), black_box(&b), e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("spmm24", name), &exec, |bch, &e| {
            bch.iter(|| spmm24_with(black_box(&s24), black_box(&b), e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("venom_spmm_64_2_16", name), &exec, |bch, &e| {
            bch.iter(|| venom_spmm_with(black_box(&vm), black_box(&b), e).unwrap())
        });
    }
    g.finish();
}

fn gradchecks(c: &mut Criterion) {
    let shape = GradShape::new(4, 8, 16);
    let pol = SparsityPolicy::w1();
    let mut g = c.benchmark_group("gradcheck_w1_4x8x16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |bch, &e| {
            bch.iter(|| gradcheck_with(&pol, shape, 0, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, kernels, gradchecks);
criterion_main!(benches);
