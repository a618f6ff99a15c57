use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylefield::feat::{FeatureMap, FeaturePipeline, FeatureSpace};
use stylefield::fixtures::{box_scene_spec, build_scene, build_style_image, StyleKind};
use stylefield::loss::LossConfig;
use stylefield::matching::nnfm_match;
use stylefield::par;
use stylefield::render::{backward_radiance, render_view, RenderOptions};
use stylefield::stylize::{step_gradients, OptimConfig, TaskSpec};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn run<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    if parallel {
        f()
    } else {
        par::sequential(f)
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    let data = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(h, w, c, data, FeatureSpace::Texture).unwrap()
}

fn bench_render(c: &mut Criterion) {
    let scene = build_scene(&box_scene_spec(0)).unwrap();
    let opts = RenderOptions::default();
    let cam = &scene.cameras[0];
    let (_, aux) = render_view(&scene.grid, cam, &opts).unwrap();
    let grad = scene.images[0].clone();
    let mut group = c.benchmark_group("render");
    for (name, parallel) in modes() {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| run(parallel, || render_view(black_box(&scene.grid), cam, &opts).unwrap()))
        });
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| run(parallel, || backward_radiance(black_box(&scene.grid), &aux, &grad).unwrap()))
        });
    }
    group.finish();
}

fn bench_match(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rendered = random_map(&mut rng, 32, 32, 16);
    let style = random_map(&mut rng, 32, 32, 16);
    let mut group = c.benchmark_group("nnfm_match");
    for (name, parallel) in modes() {
        group.bench_function(name, |b| {
            b.iter(|| run(parallel, || nnfm_match(black_box(&rendered), &style).unwrap()))
        });
    }
    group.finish();
}

fn bench_step(c: &mut Criterion) {
    let pipeline = FeaturePipeline::default();
    let scene = build_scene(&box_scene_spec(0)).unwrap();
    let mut views = scene.views().unwrap();
    for v in &mut views {
        v.cache_content_features(&pipeline).unwrap();
    }
    let style = build_style_image(StyleKind::Stripes, 0, 32).target(&pipeline).unwrap();
    let task = TaskSpec::object_select(style, LossConfig::default(), OptimConfig::default());
    let all: Vec<usize> = (0..views.len()).collect();
    let opts = RenderOptions::default();
    let mut group = c.benchmark_group("finetune_step");
    group.sample_size(20);
    for (name, parallel) in modes() {
        group.bench_function(name, |b| {
            b.iter(|| run(parallel, || step_gradients(black_box(&scene.grid), &views, &all, &task, &pipeline, &opts).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_match, bench_step);
criterion_main!(benches);
