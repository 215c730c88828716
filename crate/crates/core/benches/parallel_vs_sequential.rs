//! Parallel against sequential execution of the data-parallel hot paths.

use calid::denoiser::{Denoiser, DenoiserConfig};
use calid::eval::{collect_cases, score_case};
use calid::io::manifest::{generate_dataset, DatasetConfig};
use calid::metrics::GradientPyramid;
use calid::parallel::set_parallel;
use calid::phantom::random_phantom;
use calid::tensor::Tensor;
use calid::vae::{Vae, VaeConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn images(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect())
}

fn vae_encode(c: &mut Criterion) {
    let vae = Vae::new(&VaeConfig::default(), 0).unwrap();
    let x = images(&[8, 1, 1, 64, 64]);
    let mut g = c.benchmark_group("vae_encode_b8");
    for (name, on) in MODES {
        set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| vae.encode(black_box(&x)).unwrap()));
    }
    g.finish();
}

fn denoiser_forward(c: &mut Criterion) {
    let cfg = DenoiserConfig { base_channels: 16, ..Default::default() };
    let den = Denoiser::new(&cfg, 0).unwrap();
    let z = images(&[4, 4, 1, 16, 16]);
    let nb = images(&[4, 1, 1, 64, 64]);
    let cond = den.condition(&nb, &nb, &z, &[500; 4]).unwrap();
    let mut g = c.benchmark_group("denoiser_b4");
    g.sample_size(10);
    for (name, on) in MODES {
        set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| den.predict_noise(black_box(&z), &[500; 4], &cond).unwrap())
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let data: Vec<_> = (0..4).map(|i| random_phantom(64, 6, 1, 0.02, i).unwrap()).map(|(_, v, m)| (v, m)).collect();
    let cases = collect_cases(&data, &[0], false).unwrap();
    let extractor = GradientPyramid::default();
    let mut g = c.benchmark_group("score_cases");
    g.sample_size(10);
    for (name, on) in MODES {
        set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                calid::parallel::map_indices(cases.len(), |i| score_case(&cases[i], &cases[i].prev, 0.5, &extractor).unwrap())
            })
        });
    }
    g.finish();
}

fn dataset(c: &mut Criterion) {
    let cfg = DatasetConfig { train_subjects: 6, test_subjects: 2, ..Default::default() };
    let mut g = c.benchmark_group("phantom_dataset_8");
    g.sample_size(10);
    for (name, on) in MODES {
        set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let dir = tempfile::tempdir().unwrap();
                generate_dataset(&cfg, 1, dir.path()).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, vae_encode, denoiser_forward, scoring, dataset);
criterion_main!(benches);
