//! Benchmarks for the data-parallel hot paths: per-pixel rendering, SDF grid
//! sampling, and per-ray CDF evaluation. With the default `parallel` feature
//! each benchmark runs once on a single thread and once on all cores so the
//! two schedules can be compared directly; built with
//! `--no-default-features` the sequential fallback is what gets measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;

use gvkf::camera::Camera;
use gvkf::field::{cdf_phi, RayField};
use gvkf::gaussian::RayKernel;
use gvkf::mesh::{marching_cubes, sample_sdf_grid, SigmaMode};
use gvkf::render::{render_scene, RenderOptions};
use gvkf::scene::make_sphere_scene;

fn thread_variants() -> Vec<(&'static str, Option<usize>)> {
    if cfg!(feature = "parallel") {
        vec![("threads-1", Some(1)), ("threads-all", None)]
    } else {
        vec![("sequential", Some(1))]
    }
}

fn camera() -> Camera {
    Camera::new(
        Vector3::new(0.0, 0.3, -3.2),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        50.0,
        96,
        96,
        0.01,
        50.0,
    )
    .unwrap()
}

fn bench_render(c: &mut Criterion) {
    let scene = make_sphere_scene(1000, 1.0, 0.03, 0.95, 0.02).unwrap();
    let cam = camera();
    let opts = RenderOptions::default();
    let mut group = c.benchmark_group("render_96x96_1000g");
    for (name, threads) in thread_variants() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &threads| {
            b.iter(|| {
                gvkf::with_thread_cap(threads, || {
                    render_scene(&scene, &cam, &opts).unwrap().color
                })
            })
        });
    }
    group.finish();
}

fn bench_mesh(c: &mut Criterion) {
    let scene = make_sphere_scene(1000, 1.0, 0.03, 0.95, 0.02).unwrap();
    let mut group = c.benchmark_group("sdf_grid_32_plus_mc");
    group.sample_size(20);
    for (name, threads) in thread_variants() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &threads| {
            b.iter(|| {
                gvkf::with_thread_cap(threads, || {
                    let grid =
                        sample_sdf_grid(&scene, None, 32, 8.0, SigmaMode::PerRay, None).unwrap();
                    marching_cubes(&grid, 0.0).faces.len()
                })
            })
        });
    }
    group.finish();
}

fn bench_cdf(c: &mut Criterion) {
    // Pure single-thread kernel math; the baseline the parallel paths chop up.
    let kernels: Vec<RayKernel> = (0..64)
        .map(|i| RayKernel {
            t_peak: 0.5 + i as f64 * 0.3,
            sharpness: 2.0 + (i % 7) as f64,
            peak: 1.0,
            alpha: 0.05 + 0.9 * ((i * 37 % 100) as f64 / 100.0),
            color: [0.5; 3],
            source: i,
        })
        .collect();
    let field = RayField::new(kernels, [0.0; 3]);
    c.bench_function("cdf_phi_64_kernels", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for i in 0..256 {
                acc += cdf_phi(&field, i as f64 * 0.1);
            }
            acc
        })
    });
}

fn bench_scene_decode(c: &mut Criterion) {
    let scene = gvkf::scene::make_neural_sphere_scene(400, 1.0, 0.2, 42).unwrap();
    let cam_pos = Vector3::new(0.0, 0.0, -4.0);
    c.bench_function("neural_decode_400pts", |b| {
        b.iter(|| scene.primitives(Some(&cam_pos)).unwrap().len())
    });
}

criterion_group!(benches, bench_render, bench_mesh, bench_cdf, bench_scene_decode);
criterion_main!(benches);
