//! Data-parallel core vs the sequential fallback on the pipeline's hot
//! loops: batch ray tracing, a full training step, and grid evaluation
//! for meshing. The sequential path is the same code with the worker cap
//! set to one thread, which is also what `IDR_THREADS=1` selects.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use idr::camera::pixel_ray;
use idr::dataset::{Dataset, View};
use idr::loss::LossWeights;
use idr::mesh::{marching_cubes, GridBounds};
use idr::nets::{Renderer, RendererConfig, SdfNetConfig, SdfNetwork};
use idr::parallel;
use idr::synth::{
    generate_cameras, generate_views, AnalyticSdf, LightAttachment, PhongMaterial, Scene,
    SceneLighting,
};
use idr::trace::{sphere_trace, TraceConfig};
use idr::train::{sample_box_points, sample_pixel_batch, train_step, Model};

fn toy_scene() -> Scene {
    Scene {
        sdf: AnalyticSdf::smooth_union(
            AnalyticSdf::sphere(0.42).at([0.0, 0.22, 0.0]),
            AnalyticSdf::torus(0.45, 0.15).at([0.0, -0.18, 0.0]),
            0.08,
        ),
        material: PhongMaterial {
            k_d: 0.75,
            k_s: 0.3,
            o_d: [0.85, 0.6, 0.35],
            o_s: [1.0, 1.0, 1.0],
            n_s: 24.0,
        },
        lighting: SceneLighting {
            ambient: [0.18, 0.18, 0.18],
            diffuse: [0.85, 0.85, 0.85],
            position: [2.0, 2.0, 2.5],
            attachment: LightAttachment::World,
        },
        background: [0.0; 3],
    }
}

fn toy_dataset() -> Dataset {
    let scene = toy_scene();
    let cameras = generate_cameras(6, 2.5, 48, 48, 3);
    let views = generate_views(&scene, &cameras, 48, 48);
    Dataset {
        views: views
            .iter()
            .enumerate()
            .map(|(i, (img, mask))| View {
                camera: i,
                width: 48,
                height: 48,
                rgb: img.pixels.iter().map(|p| p.map(|v| (v - 0.5) * 2.0)).collect(),
                mask: mask.pixels.clone(),
            })
            .collect(),
        cameras,
    }
}

fn toy_model(dataset: &Dataset) -> Model {
    let gcfg = SdfNetConfig {
        depth: 4,
        hidden: 48,
        feature_size: 32,
        skip_layer: 2,
        ..SdfNetConfig::default()
    };
    let rcfg = RendererConfig {
        depth: 3,
        hidden: 64,
        feature_size: 32,
        ..RendererConfig::default()
    };
    Model::new(
        SdfNetwork::geometric_init(gcfg, 1).unwrap(),
        Renderer::init(rcfg, 2).unwrap(),
        dataset.cameras.clone(),
    )
}

fn with_mode<R>(sequential: bool, f: impl FnOnce() -> R) -> R {
    parallel::set_threads(if sequential { Some(1) } else { None });
    let out = f();
    parallel::set_threads(None);
    out
}

fn bench_trace_batch(c: &mut Criterion) {
    let dataset = toy_dataset();
    let model = toy_model(&dataset);
    let cfg = TraceConfig::default();
    let batch = sample_pixel_batch(&dataset, 64, 0, 7);
    let rays: Vec<_> = batch
        .iter()
        .map(|p| {
            pixel_ray(
                &dataset.cameras.cameras[p.view],
                p.x as f64 + 0.5,
                p.y as f64 + 0.5,
                0,
            )
            .unwrap()
        })
        .collect();

    let mut group = c.benchmark_group("trace_batch");
    for seq in [false, true] {
        let name = if seq { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(name), &seq, |b, &seq| {
            b.iter(|| {
                with_mode(seq, || {
                    let hits = parallel::map_chunks(rays.len().div_ceil(32), |ci| {
                        let lo = ci * 32;
                        let hi = (lo + 32).min(rays.len());
                        rays[lo..hi]
                            .iter()
                            .filter(|r| {
                                sphere_trace(&model.geometry, r.origin, r.dir, &cfg)
                                    .map(|t| t.hit())
                                    .unwrap_or(false)
                            })
                            .count()
                    });
                    black_box(hits.iter().sum::<usize>())
                })
            })
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let dataset = toy_dataset();
    let model = toy_model(&dataset);
    let batch = sample_pixel_batch(&dataset, 16, 0, 7);
    let extras = sample_box_points(48, 0, 7);
    let weights = LossWeights::default();
    let cfg = TraceConfig {
        fallback_samples: 48,
        ..TraceConfig::default()
    };

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for seq in [false, true] {
        let name = if seq { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(name), &seq, |b, &seq| {
            b.iter(|| {
                with_mode(seq, || {
                    let (stats, grads) =
                        train_step(&model, &dataset, &batch, &extras, 50.0, &weights, &cfg)
                            .unwrap();
                    black_box((stats.total, grads.theta[0]))
                })
            })
        });
    }
    group.finish();
}

fn bench_marching_cubes(c: &mut Criterion) {
    let sdf = AnalyticSdf::smooth_union(
        AnalyticSdf::sphere(0.42).at([0.0, 0.22, 0.0]),
        AnalyticSdf::torus(0.45, 0.15).at([0.0, -0.18, 0.0]),
        0.08,
    );
    let mut group = c.benchmark_group("marching_cubes_64");
    group.sample_size(10);
    for seq in [false, true] {
        let name = if seq { "sequential" } else { "parallel" };
        group.bench_with_input(BenchmarkId::from_parameter(name), &seq, |b, &seq| {
            b.iter(|| {
                with_mode(seq, || {
                    black_box(marching_cubes(&sdf, 64, &GridBounds::default(), 0.0).vertices.len())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_trace_batch, bench_train_step, bench_marching_cubes);
criterion_main!(benches);
