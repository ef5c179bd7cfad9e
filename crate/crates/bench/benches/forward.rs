//! Target forward cost against the number of tokens verified at once.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use specdec_bench::{prompt, toy_target};

fn forward_width(c: &mut Criterion) {
    let target = toy_target(8, 4096);
    let context = prompt(64, 1);
    let mut cache = target.new_cache();
    target.forward_causal(&context, &mut cache).expect("prefill fits");
    let mut group = c.benchmark_group("heavy_forward");
    group.sample_size(20);
    for n in [1, 5, 11] {
        let step = prompt(n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut c = cache.clone();
                black_box(target.forward_causal(&step, &mut c).expect("step fits"))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_width);
criterion_main!(benches);
