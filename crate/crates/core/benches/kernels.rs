use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use plastinet::kernels::{seq, ConvGeom};
use plastinet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(n: usize, seed: u64) -> Vec<f64> {
    Tensor::uniform(&[n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_data()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 256] {
        let a = random(n * n, 1);
        let b = random(n * n, 2);
        group.bench_with_input(BenchmarkId::new("seq", n), &n, |bench, &n| {
            bench.iter(|| seq::matmul(black_box(&a), black_box(&b), n, n, n))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", n), &n, |bench, &n| {
            bench.iter(|| plastinet::kernels::par::matmul(black_box(&a), black_box(&b), n, n, n))
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let g = ConvGeom { batch: 64, in_ch: 3, height: 16, width: 16, out_ch: 16, kh: 3, kw: 3, stride: 1, pad: 1 };
    let input = random(g.batch * g.in_ch * g.height * g.width, 3);
    let kernel = random(g.out_ch * g.in_ch * g.kh * g.kw, 4);
    let out = random(g.batch * g.out_ch * g.out_h() * g.out_w(), 5);
    let mut group = c.benchmark_group("conv2d");
    group.bench_function("forward/seq", |b| b.iter(|| seq::conv2d_forward(black_box(&input), &kernel, &g)));
    group.bench_function("backward/seq", |b| b.iter(|| seq::conv2d_backward(black_box(&input), &kernel, &out, &g)));
    #[cfg(feature = "parallel")]
    {
        use plastinet::kernels::par;
        group.bench_function("forward/par", |b| b.iter(|| par::conv2d_forward(black_box(&input), &kernel, &g)));
        group.bench_function("backward/par", |b| b.iter(|| par::conv2d_backward(black_box(&input), &kernel, &out, &g)));
    }
    group.finish();
}

criterion_group!(benches, matmul, conv);
criterion_main!(benches);
