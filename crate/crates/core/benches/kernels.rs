//! Scan and convolution throughput. The scan group compares the associative
//! parallel scan with the step-by-step recurrence; the convolution group runs
//! the same kernel on the rayon pool and on a single worker. Build with
//! `--no-default-features` to measure the sequential fallback.

use cmunet::ssm::{selective_scan, ScanInputs, ScanMode};
use cmunet_tensor::{no_grad, Conv2dSpec, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scan_instance(l: usize, d: usize, n: usize) -> (ScanInputs<f32>, Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(l as u64);
    let inputs = ScanInputs {
        x: Tensor::randn(&[1, l, d], 1.0, &mut rng),
        delta: Tensor::uniform(&[1, l, d], 1e-3, 0.2, &mut rng),
        bsel: Tensor::randn(&[1, l, n], 1.0, &mut rng),
        csel: Tensor::randn(&[1, l, n], 1.0, &mut rng),
    };
    (inputs, Tensor::uniform(&[d, n], -4.0, -0.05, &mut rng), Tensor::randn(&[d], 1.0, &mut rng))
}

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("selective_scan");
    g.sample_size(10);
    for l in [1024, 4096, 16384] {
        let (inp, a, d) = scan_instance(l, 16, 8);
        g.throughput(Throughput::Elements(l as u64));
        for (name, mode) in [("sequential", ScanMode::Sequential), ("parallel", ScanMode::Parallel)] {
            g.bench_with_input(BenchmarkId::new(name, l), &l, |b, _| {
                b.iter(|| no_grad(|| selective_scan(&inp, &a, &d, mode)).unwrap())
            });
        }
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&[2, 32, 64, 64], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[32, 32, 3, 3], 0.1, &mut rng);
    let spec = Conv2dSpec { stride: 1, padding: 1, groups: 1 };
    let run = || no_grad(|| x.conv2d(&w, None, spec)).unwrap();

    let mut g = c.benchmark_group("conv2d_3x3");
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        g.bench_function("rayon", |b| b.iter(run));
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function("one_worker", |b| b.iter(|| single.install(run)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function("sequential", |b| b.iter(run));
    g.finish();
}

criterion_group!(benches, scan, conv);
criterion_main!(benches);
