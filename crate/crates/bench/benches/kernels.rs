//! Row-major against packed-strip matmul at decode-sized row counts.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use specdec_bench::random_vec;
use specdec_core::tensor::kernels::{matmul, matmul_packed, PackedMatrix};

fn matmul_shapes(c: &mut Criterion) {
    let (k, m) = (128, 4096);
    let w = random_vec(k * m, 1);
    let packed = PackedMatrix::pack(&w, k, m);
    let mut group = c.benchmark_group("matmul_128x4096");
    for n in [1, 5, 11] {
        let x = random_vec(n * k, 2);
        let mut out = vec![0.0f32; n * m];
        group.throughput(Throughput::Elements((n * k * m) as u64));
        group.bench_with_input(BenchmarkId::new("row_major", n), &n, |b, &n| {
            b.iter(|| matmul(black_box(&x), n, k, black_box(&w), m, &mut out))
        });
        group.bench_with_input(BenchmarkId::new("packed", n), &n, |b, &n| {
            b.iter(|| matmul_packed(black_box(&x), n, black_box(&packed), &mut out))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul_shapes);
criterion_main!(benches);
