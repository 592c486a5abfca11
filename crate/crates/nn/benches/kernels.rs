use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gridsight_core::grid::{GridMap, GridSpec, SemanticClass};
use gridsight_core::imageio::RgbImage;
use gridsight_core::par::Execution;
use gridsight_nn::tensor::{Graph, Tensor};
use gridsight_nn::ved::{TrainSample, Ved, VedConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("seq", Execution::Sequential), ("par", Execution::Parallel)];

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[8, 32, 32, 64], 1.0, &mut rng);
    let w = Tensor::randn(&[64, 32, 3, 3], 0.1, &mut rng);
    let b = Tensor::zeros(&[64]);
    let mut group = c.benchmark_group("conv3x3_8x32x32x64");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("forward", name), &exec, |bench, &exec| {
            bench.iter(|| {
                let mut g = Graph::with_execution(exec);
                let (xv, wv, bv) = (g.input(x.clone()), g.param(w.clone()), g.param(b.clone()));
                g.conv2d(xv, wv, bv).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", name), &exec, |bench, &exec| {
            bench.iter(|| {
                let mut g = Graph::with_execution(exec);
                let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
                let y = g.conv2d(xv, wv, bv).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                g.take_grad(wv)
            })
        });
    }
    group.finish();
}

fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

fn bench_ved(c: &mut Criterion) {
    let cfg = VedConfig {
        epochs: 1,
        batch_size: 8,
        ..VedConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = GridSpec::default();
    let samples: Vec<TrainSample> = (0..8)
        .map(|_| TrainSample {
            image: random_image(cfg.input_width, cfg.input_height, &mut rng),
            truth: GridMap::filled(spec, SemanticClass::Road),
        })
        .collect();
    let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let model = Ved::new(cfg.clone()).unwrap();
    let mut group = c.benchmark_group("ved_desk_batch8");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("train_step", name), &exec, |bench, &exec| {
            bench.iter(|| {
                let mut m = Ved::new(cfg.clone()).unwrap();
                m.train(&samples, exec, |_| {}).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("inference", name), &exec, |bench, &exec| {
            bench.iter(|| model.probabilities(&images, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_ved);
criterion_main!(benches);
