//! Parallel versus sequential execution of the hot paths: a 3×3 convolution
//! forward and backward, and one training step of a desk-width network.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resfeat::data::synthetic::class_images;
use resfeat::data::Batch;
use resfeat::network::{preset, Model};
use resfeat::ops;
use resfeat::par;
use resfeat::train::{TrainConfig, Trainer};
use resfeat::Tensor4;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor4::<f32>::randn([32, 32, 16, 16], &mut rng);
    let w = Tensor4::<f32>::randn([32, 32, 3, 3], &mut rng);
    let dy = Tensor4::<f32>::randn([32, 32, 16, 16], &mut rng);
    let mut g = c.benchmark_group("conv3x3");
    for (name, on) in modes() {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| ops::conv2d_forward(black_box(&x), black_box(&w), None, 1).unwrap())
        });
        g.bench_function(BenchmarkId::new("backward_weight", name), |b| {
            b.iter(|| ops::conv2d_backward_weight(black_box(&dy), black_box(&x), w.shape(), 1).unwrap())
        });
    }
    par::set_parallel(true);
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let spec = preset("preact-resnet18-Al-Bli-cifar10-desk").unwrap();
    let data = class_images(32, 10, [3, 32, 32], 0.2, 2).unwrap();
    let batch = Batch { images: data.images, labels: data.labels };
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, on) in modes() {
        par::set_parallel(on);
        let model = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut t = Trainer::new(model, TrainConfig::for_spec(&spec)).unwrap();
        g.bench_function(name, |b| b.iter(|| t.step(black_box(&batch), 0.01).unwrap()));
    }
    par::set_parallel(true);
    g.finish();
}

criterion_group!(benches, conv, train_step);
criterion_main!(benches);
