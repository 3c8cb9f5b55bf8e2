use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geossl_core::diffcore::{DenseArray, Tape};
use geossl_core::geo::{haversine, pairwise_geo, GeoCoordinate};
use geossl_core::harness::knn_evaluate;
use geossl_core::losses::{info_nce, rank_reg, EmbeddingBatch, LossConfig};
use geossl_core::softrank::{isotonic_l2, soft_rank, Direction, SoftRankConfig};
use geossl_core::synthdata::sample_locations;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> DenseArray {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v = normal_vec(rng, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    DenseArray::new(vec![rows, dim], data).unwrap()
}

fn bench_softrank(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("soft_rank");
    for n in [16, 64, 256] {
        let s = normal_vec(&mut rng, n);
        let cfg = SoftRankConfig::new(1e-3, Direction::Descending).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| {
            b.iter(|| soft_rank(black_box(s), cfg).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("isotonic_l2");
    for n in [16, 64, 256, 1024] {
        let y = normal_vec(&mut rng, n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &y, |b, y| {
            b.iter(|| isotonic_l2(black_box(y)).unwrap())
        });
    }
    g.finish();
}

fn bench_geo(c: &mut Criterion) {
    let pts = sample_locations(2, 3);
    c.bench_function("haversine", |b| {
        b.iter(|| haversine(black_box(pts[0]), black_box(pts[1])))
    });

    let mut g = c.benchmark_group("pairwise_geo");
    for k in [64, 256] {
        let coords: Vec<GeoCoordinate> = sample_locations(k, 4);
        g.bench_with_input(BenchmarkId::from_parameter(k), &coords, |b, coords| {
            b.iter(|| pairwise_geo(black_box(coords), 2500.0).unwrap())
        });
    }
    g.finish();
}

fn bench_losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = LossConfig::default();
    let mut g = c.benchmark_group("loss_forward_backward");
    for k in [64, 128] {
        let z = unit_rows(&mut rng, k, 32);
        let zp = unit_rows(&mut rng, k, 32);
        let queue = Arc::new(unit_rows(&mut rng, 1024, 32));
        let gb = pairwise_geo(&sample_locations(k, 6), cfg.d_max).unwrap();
        g.bench_function(BenchmarkId::new("rank_reg", k), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let batch =
                    EmbeddingBatch::new(tape.leaf(z.clone()), tape.constant(zp.clone()), None)
                        .unwrap();
                let loss = rank_reg(&batch, &gb, &cfg).unwrap();
                tape.backward(loss).unwrap()
            })
        });
        g.bench_function(BenchmarkId::new("info_nce_queue1024", k), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let batch = EmbeddingBatch::new(
                    tape.leaf(z.clone()),
                    tape.constant(zp.clone()),
                    Some(Arc::clone(&queue)),
                )
                .unwrap();
                let loss = info_nce(&batch, cfg.tau).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_knn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n_train, n_test, dim) = (4096, 1024, 64);
    let train = unit_rows(&mut rng, n_train, dim);
    let test = unit_rows(&mut rng, n_test, dim);
    let ytrain: Vec<usize> = (0..n_train).map(|i| i % 5).collect();
    let ytest: Vec<usize> = (0..n_test).map(|i| i % 5).collect();
    c.bench_function("knn_4096x1024_d64", |b| {
        b.iter(|| knn_evaluate(&train, &ytrain, &test, &ytest, 10, 0.9).unwrap())
    });
}

criterion_group!(benches, bench_softrank, bench_geo, bench_losses, bench_knn);
criterion_main!(benches);
