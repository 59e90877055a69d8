use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use relevis_bench::{blob_map, random_volume, trained_like_model, PHANTOM_DIMS};
use relevis_core::analyze::{
    extract_clusters, occlusion_scan, slice_profile, Connectivity, OcclusionConfig,
};
use relevis_core::lrp::{relevance_map_f64, RuleConfig};
use relevis_core::nn::Model;
use relevis_core::Dims;

fn lrp(c: &mut Criterion) {
    let m = trained_like_model(PHANTOM_DIMS, 3);
    let m64: Model<f64> = m.cast();
    let v = random_volume(PHANTOM_DIMS, 4);
    let mut g = c.benchmark_group("relevance_map");
    for (name, rule) in [
        ("default", RuleConfig::default()),
        ("alpha1beta0", RuleConfig::alpha1beta0()),
    ] {
        g.bench_function(BenchmarkId::new(name, PHANTOM_DIMS), |b| {
            b.iter(|| relevance_map_f64(&m64, black_box(&v), 1, &rule).unwrap())
        });
    }
    g.finish();
}

fn clusters(c: &mut Criterion) {
    let mut g = c.benchmark_group("extract_clusters");
    for dims in [PHANTOM_DIMS, Dims::new(100, 100, 120)] {
        let map = blob_map(dims, 40, 5);
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            g.bench_function(BenchmarkId::new(conn.to_string(), dims), |b| {
                b.iter(|| extract_clusters(black_box(&map), 0.2, 5, conn).unwrap())
            });
        }
    }
    g.finish();
}

fn profiles(c: &mut Criterion) {
    let map = blob_map(Dims::new(100, 100, 120), 40, 6);
    c.bench_function("slice_profile/100x100x120", |b| {
        b.iter(|| {
            (0..3)
                .map(|a| slice_profile(black_box(&map), a).unwrap())
                .collect::<Vec<_>>()
        })
    });
}

fn occlusion(c: &mut Criterion) {
    let dims = Dims::new(16, 16, 20);
    let m = trained_like_model(dims, 7);
    let v = random_volume(dims, 8);
    let cfg = OcclusionConfig {
        cube_edge: Some(4),
        stride: 4,
        ..Default::default()
    };
    let mut g = c.benchmark_group("occlusion_scan");
    g.sample_size(10);
    g.bench_function("16x16x20/stride4", |b| {
        b.iter(|| occlusion_scan(&m, black_box(&v), &cfg, None).unwrap())
    });
    g.finish();
}

criterion_group!(benches, lrp, clusters, profiles, occlusion);
criterion_main!(benches);
