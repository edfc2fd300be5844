use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use longseg_bench::fixture;
use longseg_core::applik::{self, VoxelData};
use longseg_core::atlas::{self, rasterize_prior};
use longseg_core::longit::{self, LongConfig};
use longseg_core::xsect::{self, FitConfig};

fn deformation(c: &mut Criterion) {
    let (_, mesh) = fixture(32, 4);
    let mut x = mesh.reference.clone();
    for (i, p) in x.0.iter_mut().enumerate() {
        p[0] += 0.01 * ((i * 7919) % 13) as f64;
    }
    c.bench_function("deformation_energy_gradient 32^3/4", |b| {
        b.iter(|| atlas::deformation_energy_gradient(black_box(&x), &mesh.reference, &mesh))
    });
}

fn rasterize(c: &mut Criterion) {
    let mut g = c.benchmark_group("rasterize_prior");
    for size in [32, 48] {
        let (vol, mesh) = fixture(size, 4);
        g.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| rasterize_prior(black_box(&mesh.reference), &mesh, &vol.grid))
        });
    }
    g.finish();
}

fn appearance(c: &mut Criterion) {
    let (vol, mesh) = fixture(32, 4);
    let prior = rasterize_prior(&mesh.reference, &mesh, &vol.grid).unwrap();
    let vd = VoxelData::new(&vol, [2, 2, 2]).unwrap();
    let rows: Vec<f64> = vd
        .voxels
        .iter()
        .flat_map(|&v| prior[v * 5..(v + 1) * 5].to_vec())
        .collect();
    let (gauss, bias) = applik::initialize_appearance_data(&vd, &rows, 5, [2, 2, 2]).unwrap();
    c.bench_function("bias_field_update 32^3", |b| {
        b.iter(|| applik::update_bias_field_data(&vd, black_box(&rows), &gauss, bias.orders))
    });
}

fn fits(c: &mut Criterion) {
    let mut g = c.benchmark_group("fits");
    g.sample_size(10);
    let (vol, mesh) = fixture(24, 4);
    g.bench_function("fit_cross 24^3", |b| {
        b.iter(|| xsect::fit_cross(black_box(&vol), &mesh, &FitConfig::default()))
    });
    let vols = vec![vol.clone(), vol.clone()];
    let cfg = LongConfig {
        outer_iterations: 2,
        ..Default::default()
    };
    g.bench_function("fit_longitudinal 24^3 T=2", |b| {
        b.iter(|| longit::fit_longitudinal(black_box(&vols), &mesh, &cfg))
    });
    g.finish();
}

criterion_group!(benches, deformation, rasterize, appearance, fits);
criterion_main!(benches);
