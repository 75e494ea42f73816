use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mcl_core::augment::{two_views, AugPolicy};
use mcl_core::ops::{conv2d, conv2d_backward};
use mcl_core::optim::{Lars, OptimConfig};
use mcl_core::par;
use mcl_core::pyramid::{NetConfig, NetworkPair};
use mcl_core::ssl::{ssl_step, SslConfig};
use mcl_core::{SeededRng, Tensor};

fn input(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 2654435761) % 1000) as f32 / 1000.0)
}

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn conv(c: &mut Criterion) {
    let x = input(&[32, 16, 32, 32]);
    let w = input(&[32, 16, 3, 3]);
    let dy = input(&[32, 32, 32, 32]);
    let mut group = c.benchmark_group("conv3x3_b32");
    for (name, on) in modes() {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| conv2d(&x, &w, None, 1, 1).unwrap()));
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| conv2d_backward(&x, &w, 1, 1, &dy, true, true).unwrap())
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn augmentation(c: &mut Criterion) {
    let batch = input(&[64, 3, 64, 64]);
    let policies = [AugPolicy::byol((64, 64), 0, true), AugPolicy::byol((64, 64), 1, true)];
    let mut group = c.benchmark_group("two_views_b64");
    for (name, on) in modes() {
        par::set_enabled(on);
        group.bench_function(name, |b| b.iter(|| two_views(&batch, &policies, 7).unwrap()));
    }
    group.finish();
    par::set_enabled(true);
}

fn train_step(c: &mut Criterion) {
    let cfg = NetConfig {
        stem_channels: 8,
        stage_channels: vec![8, 16, 32, 32],
        pyramid_channels: 16,
        head_convs: 1,
        proj_hidden: 64,
        embed_dim: 32,
        ..NetConfig::default()
    };
    let views = [input(&[16, 3, 64, 64]), input(&[16, 3, 64, 64]).map(|v| 1.0 - v)];
    let mut group = c.benchmark_group("ssl_step_b16");
    group.sample_size(10);
    for (name, on) in modes() {
        par::set_enabled(on);
        group.bench_function(name, |b| {
            let mut pair = NetworkPair::<f32>::new(&cfg, 1).unwrap();
            let mut opt = Lars::new(OptimConfig::default(), &pair.online).unwrap();
            b.iter(|| {
                ssl_step(&mut pair, &mut opt, [&views[0], &views[1]], &SslConfig::default(), 0.05, 0.99, SeededRng::new(3, 0))
                    .unwrap()
            })
        });
    }
    group.finish();
    par::set_enabled(true);
}

criterion_group!(benches, conv, augmentation, train_step);
criterion_main!(benches);
