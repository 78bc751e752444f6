//! Kernel and training-step throughput. Run once with default features and
//! once with `--no-default-features`; the group names carry the build flavor
//! so the two reports sit side by side under `target/criterion`.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use srtod::config::RunConfig;
use srtod::detector::Mode;
use srtod::experiment::new_trainer;
use srtod::nn::kernels::{conv2d_backward, conv2d_forward, conv_transpose2d_forward};
use srtod::par::is_parallel;
use srtod::synthdata::{generate_scenes, Scene};
use srtod::Tensor;

fn flavor() -> &'static str {
    if is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn input(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 2_654_435_761) % 1000) as f32 / 1000.0 - 0.5)
}

fn convolutions(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("conv/{}", flavor()));
    let n = 8;
    for (cin, cout, hw) in [(8, 8, 128), (16, 16, 64), (32, 32, 32)] {
        let x = input(&[n, cin, hw, hw]);
        let w = input(&[cout, cin, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 1, 1);
        g.throughput(Throughput::Elements((n * cout * hw * hw) as u64));
        let id = format!("{cin}x{hw}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| {
            b.iter(|| conv2d_forward(black_box(x), &w, None, 1, 1))
        });
        g.bench_with_input(BenchmarkId::new("backward", &id), &x, |b, x| {
            b.iter(|| conv2d_backward(black_box(x), &w, &y, 1, 1, true))
        });
    }
    let x = input(&[n, 16, 64, 64]);
    let w = input(&[16, 8, 4, 4]);
    g.bench_function("transpose/16x64", |b| {
        b.iter(|| conv_transpose2d_forward(black_box(&x), &w, None, 2, 1))
    });
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("train_step/{}", flavor()));
    g.sample_size(10);
    let mut cfg = RunConfig::default();
    cfg.backbone.channels = 32;
    cfg.head.tower_depth = 2;
    let scenes = generate_scenes(&cfg.scene, 8, 0).unwrap();
    let batch: Vec<&Scene> = scenes.iter().collect();
    for mode in [Mode::Baseline, Mode::Srtod] {
        cfg.mode = mode;
        let mut t = new_trainer(&cfg).unwrap();
        g.bench_function(mode.label(), |b| b.iter(|| t.training_step(&batch, 1e-3).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, convolutions, training_step);
criterion_main!(benches);
