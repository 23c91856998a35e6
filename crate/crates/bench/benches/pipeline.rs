//! Throughput benchmarks for the hot paths: generator forward, feature
//! extraction, ridge fitting, SSIM, and one CMA-ES generation.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use latentdecode::cmaes::{CmaesConfig, CmaesState};
use latentdecode::dataio::Matrix;
use latentdecode::metrics;
use latentdecode::oracle::{
    FeatureExtractorOracle, GeneratorOracle, GeneratorSpec, InstanceFeature, NoiseVector,
    ToyFeatureExtractor, ToyGenerator,
};
use latentdecode::ridge;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_pair() -> (ToyGenerator, ToyFeatureExtractor) {
    (
        ToyGenerator::new(GeneratorSpec::toy(), 7).unwrap(),
        ToyFeatureExtractor::new(GeneratorSpec::toy(), 8).unwrap(),
    )
}

fn sample_latents(seed: u64) -> (InstanceFeature, NoiseVector) {
    let spec = GeneratorSpec::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h: Vec<f64> = (0..spec.h_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let z: Vec<f64> = (0..spec.z_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (
        InstanceFeature::new(h).unwrap(),
        NoiseVector::new(z, spec.level_dim).unwrap(),
    )
}

fn bench_generator_forward(c: &mut Criterion) {
    let (gen, _) = toy_pair();
    let (h, z) = sample_latents(1);
    c.bench_function("generator_forward_toy", |b| {
        b.iter(|| gen.generate(&h, &z).unwrap())
    });
}

fn bench_feature_extraction(c: &mut Criterion) {
    let (gen, feat) = toy_pair();
    let (h, z) = sample_latents(2);
    let img = gen.generate(&h, &z).unwrap();
    c.bench_function("mid_features_toy", |b| {
        b.iter(|| feat.mid_features(&img).unwrap())
    });
    c.bench_function("instance_features_toy", |b| {
        b.iter(|| feat.instance_features(&img).unwrap())
    });
}

fn bench_ridge_fit(c: &mut Criterion) {
    let (n, v, t) = (200, 300, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..n * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = Matrix::from_f64(n, v, &x).unwrap();
    let y = Matrix::from_f64(n, t, &y).unwrap();
    c.bench_function("ridge_fit_200x300_to_64", |b| {
        b.iter(|| ridge::fit(&x, &y, 1.0).unwrap())
    });
}

fn bench_ssim(c: &mut Criterion) {
    let (gen, _) = toy_pair();
    let (h1, z1) = sample_latents(4);
    let (h2, z2) = sample_latents(5);
    let a = gen.generate(&h1, &z1).unwrap();
    let b_img = gen.generate(&h2, &z2).unwrap();
    c.bench_function("ssim_32x32", |b| {
        b.iter(|| metrics::ssim(&a, &b_img).unwrap())
    });
}

fn bench_cmaes_generation(c: &mut Criterion) {
    let dim = GeneratorSpec::toy().z_dim;
    let config = CmaesConfig::new(vec![0.0; dim], 1.0, 10_000, 17);
    let sphere = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    c.bench_function("cmaes_generation_dim35", |b| {
        b.iter_batched(
            || CmaesState::new(config.clone()).unwrap(),
            |mut state| {
                let asked = state.ask().unwrap();
                let fitness: Vec<f64> = asked.iter().map(|x| sphere(x)).collect();
                state.tell(&asked, &fitness).unwrap();
                state
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_generator_forward,
    bench_feature_extraction,
    bench_ridge_fit,
    bench_ssim,
    bench_cmaes_generation
);
criterion_main!(benches);
