use geossl_core::diffcore::DenseArray;
use geossl_core::geo::GeoCoordinate;
use geossl_core::harness::{
    export_embeddings, knn_evaluate, linear_probe, pretrain, read_csv, run_ablation,
    spearman_alignment, summary_rows, train, write_csv, Axis, CsvRow, HarnessError, ProbeConfig,
    RunConfig, TemporalViews, CSV_COLUMNS,
};
use geossl_core::losses::{GeoKind, LossConfig};
use geossl_core::model::write_checkpoint;
use geossl_core::synthdata::{generate, sample_locations, Dataset, SynthConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `n` points per class around well separated class centers.
fn clusters(
    classes: usize,
    n: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> (DenseArray, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..n {
            let mut row = gaussian(&mut rng, d)
                .into_iter()
                .map(|v| v * spread)
                .collect::<Vec<_>>();
            row[c] += 1.0;
            data.extend(row);
            labels.push(c);
        }
    }
    (DenseArray::new(vec![classes * n, d], data).unwrap(), labels)
}

fn probe(epochs: usize) -> ProbeConfig {
    ProbeConfig {
        epochs,
        lr: 0.1,
        batch: 64,
        momentum: 0.9,
        seed: 0,
    }
}

fn tiny_data(seed: u64) -> Dataset {
    generate(&SynthConfig {
        n_locations: 256,
        height: 8,
        width: 8,
        timestamps: 2,
        harmonics: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn tiny_run(loss: LossConfig, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        loss,
        ..RunConfig::default()
    };
    let t = &mut cfg.train;
    t.batch_size = 32;
    t.epochs = 2;
    t.hidden = 16;
    t.embed_dim = 8;
    t.proj_dim = 8;
    t.queue_capacity = 64;
    t.seed = seed;
    cfg.eval.probe_epochs = 2;
    cfg
}

fn checkpoint_bytes(cfg: &RunConfig, data: &Dataset) -> Vec<u8> {
    let (enc, _) = train(cfg, data).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&enc, &mut buf).unwrap();
    buf
}

#[test]
fn knn_separated_clusters_are_perfect() {
    let (train, ytrain) = clusters(3, 40, 5, 0.05, 1);
    let (test, ytest) = clusters(3, 20, 5, 0.05, 2);
    assert_eq!(
        knn_evaluate(&train, &ytrain, &test, &ytest, 10, 0.9).unwrap(),
        1.0
    );
}

#[test]
fn knn_permuted_labels_are_at_chance() {
    let (train, ytrain) = clusters(5, 200, 8, 0.3, 3);
    let (test, ytest) = clusters(5, 200, 8, 0.3, 4);
    let mean = (0..20u64)
        .map(|s| {
            let mut shuffled = ytrain.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            knn_evaluate(&train, &shuffled, &test, &ytest, 10, 0.9).unwrap()
        })
        .sum::<f64>()
        / 20.0;
    assert!((mean - 0.2).abs() < 0.02, "mean {mean}");
}

#[test]
fn knn_k1_finds_exact_duplicates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60;
    let train = DenseArray::new(vec![n, 6], gaussian(&mut rng, n * 6)).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let picks: Vec<usize> = (0..n).step_by(3).collect();
    let test_data: Vec<f64> = picks
        .iter()
        .flat_map(|&i| train.data()[i * 6..(i + 1) * 6].to_vec())
        .collect();
    let test = DenseArray::new(vec![picks.len(), 6], test_data).unwrap();
    let ytest: Vec<usize> = picks.iter().map(|&i| labels[i]).collect();
    assert_eq!(
        knn_evaluate(&train, &labels, &test, &ytest, 1, 0.9).unwrap(),
        1.0
    );
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn rotation(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v = gaussian(rng, d);
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / norm).collect());
    }
    q.concat()
}

fn rotate(x: &DenseArray, r: &[f64]) -> DenseArray {
    let (n, d) = x.dims2().unwrap();
    let out = x
        .data()
        .chunks_exact(d)
        .flat_map(|row| (0..d).map(move |j| (0..d).map(|i| row[i] * r[i * d + j]).sum::<f64>()))
        .collect();
    DenseArray::new(vec![n, d], out).unwrap()
}

#[test]
fn knn_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..5 {
        let (train, ytrain) = clusters(4, 50, 6, 0.6, 10 + seed);
        let (test, ytest) = clusters(4, 25, 6, 0.6, 20 + seed);
        let r = rotation(6, &mut rng);
        let plain = knn_evaluate(&train, &ytrain, &test, &ytest, 10, 0.9).unwrap();
        let turned = knn_evaluate(
            &rotate(&train, &r),
            &ytrain,
            &rotate(&test, &r),
            &ytest,
            10,
            0.9,
        )
        .unwrap();
        assert_eq!(plain, turned);
    }
}

#[test]
fn knn_rejects_k_beyond_train_set() {
    let (train, y) = clusters(2, 3, 3, 0.1, 7);
    let err = knn_evaluate(&train, &y, &train, &y, 7, 0.9).unwrap_err();
    assert!(
        matches!(err, HarnessError::BadK { k: 7, train: 6 }),
        "{err}"
    );
    assert!(knn_evaluate(&train, &y, &train, &y, 0, 0.9).is_err());
}

#[test]
fn linear_probe_separates_one_hot_features() {
    let (train, ytrain) = clusters(5, 60, 5, 0.0, 8);
    let (test, ytest) = clusters(5, 20, 5, 0.0, 9);
    let acc = linear_probe(&train, &ytrain, &test, &ytest, &probe(20)).unwrap();
    assert!(acc > 0.99, "acc {acc}");
}

#[test]
fn linear_probe_without_training_predicts_the_first_class() {
    let (train, ytrain) = clusters(5, 30, 5, 0.2, 10);
    let (test, ytest) = clusters(5, 30, 5, 0.2, 11);
    let acc = linear_probe(&train, &ytrain, &test, &ytest, &probe(0)).unwrap();
    assert!((acc - 0.2).abs() < 1e-12, "acc {acc}");
}

fn unit_embedding(coords: &[GeoCoordinate]) -> DenseArray {
    let data = coords.iter().flat_map(|c| c.unit_vector()).collect();
    DenseArray::new(vec![coords.len(), 3], data).unwrap()
}

#[test]
fn spearman_is_one_when_similarity_follows_distance() {
    let coords = sample_locations(60, 1);
    let rho = spearman_alignment(&unit_embedding(&coords), &coords, 3.0e4, 6371.0).unwrap();
    assert!((rho - 1.0).abs() < 1e-12, "rho {rho}");
}

#[test]
fn spearman_is_minus_one_for_the_reversed_construction() {
    // Four points with pairwise angles beyond 90 degrees; embedding u u^T
    // has similarity cos^2, which grows with distance past 90 degrees.
    let coords: Vec<GeoCoordinate> = [(0.0, 80.0), (10.0, -25.0), (125.0, -18.0), (-115.0, -22.0)]
        .iter()
        .map(|&(lon, lat)| GeoCoordinate::from_degrees(lon, lat).unwrap())
        .collect();
    let data = coords
        .iter()
        .flat_map(|c| {
            let u = c.unit_vector();
            (0..9).map(move |k| u[k / 3] * u[k % 3])
        })
        .collect();
    let emb = DenseArray::new(vec![4, 9], data).unwrap();
    let rho = spearman_alignment(&emb, &coords, 3.0e4, 6371.0).unwrap();
    assert!((rho + 1.0).abs() < 1e-12, "rho {rho}");
}

#[test]
fn spearman_of_random_embeddings_is_near_zero() {
    let coords = sample_locations(1000, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let emb = DenseArray::new(vec![1000, 8], gaussian(&mut rng, 8000)).unwrap();
    let rho = spearman_alignment(&emb, &coords, 2500.0, 6371.0).unwrap();
    assert!(rho.abs() < 0.05, "rho {rho}");
}

#[test]
fn spearman_without_neighbors_is_undefined() {
    let coords = sample_locations(50, 4);
    let err = spearman_alignment(&unit_embedding(&coords), &coords, 1.0, 6371.0).unwrap_err();
    assert!(matches!(err, HarnessError::Undefined(_)), "{err}");
    let two = &coords[..2];
    assert!(matches!(
        spearman_alignment(&unit_embedding(two), two, 3.0e4, 6371.0),
        Err(HarnessError::Undefined(_))
    ));
}

#[test]
fn pretrain_is_deterministic() {
    let data = tiny_data(0);
    let cfg = tiny_run(LossConfig::default(), 3);
    assert_eq!(checkpoint_bytes(&cfg, &data), checkpoint_bytes(&cfg, &data));
    let a = pretrain(&cfg, &data).unwrap().report;
    let b = pretrain(&cfg, &data).unwrap().report;
    assert_eq!(
        a.epochs.iter().map(|e| e.loss_total).collect::<Vec<_>>(),
        b.epochs.iter().map(|e| e.loss_total).collect::<Vec<_>>()
    );
    assert_eq!(a.knn_acc_macro, b.knn_acc_macro);
    assert_eq!(a.linear_acc_macro, b.linear_acc_macro);
    assert_eq!(a.spearman_geo, b.spearman_geo);
}

#[test]
fn different_seeds_give_different_runs() {
    let data = tiny_data(0);
    let a = checkpoint_bytes(&tiny_run(LossConfig::default(), 1), &data);
    let b = checkpoint_bytes(&tiny_run(LossConfig::default(), 2), &data);
    assert_ne!(a, b);
}

#[test]
fn alpha_one_georank_matches_the_baseline() {
    let data = tiny_data(1);
    let base = tiny_run(LossConfig::baseline(), 5);
    let geo = tiny_run(
        LossConfig {
            alpha: 1.0,
            geo_kind: GeoKind::Rank,
            ..LossConfig::default()
        },
        5,
    );
    assert_eq!(
        checkpoint_bytes(&base, &data),
        checkpoint_bytes(&geo, &data)
    );
    let (_, hb) = train(&base, &data).unwrap();
    let (_, hg) = train(&geo, &data).unwrap();
    for (b, g) in hb.iter().zip(&hg) {
        assert_eq!(b.loss_ssl, g.loss_ssl);
        assert_eq!(b.loss_total, g.loss_total);
    }
}

#[test]
fn training_lowers_the_loss() {
    let data = generate(&SynthConfig {
        n_locations: 1024,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut cfg = tiny_run(LossConfig::baseline(), 0);
    cfg.train.epochs = 12;
    cfg.train.hidden = 64;
    cfg.train.embed_dim = 32;
    cfg.train.proj_dim = 16;
    cfg.train.queue_capacity = 256;
    let (_, h) = train(&cfg, &data).unwrap();
    let mean = |s: &[geossl_core::harness::EpochStats]| {
        s.iter().map(|e| e.loss_total).sum::<f64>() / s.len() as f64
    };
    assert!(mean(&h[h.len() - 3..]) < mean(&h[..3]), "{h:?}");
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let data = tiny_data(0);
    let cfg = tiny_run(
        LossConfig {
            tau: 1e-310,
            ..LossConfig::default()
        },
        0,
    );
    match train(&cfg, &data) {
        Err(HarnessError::Diverged {
            epoch,
            step,
            source,
        }) => {
            assert_eq!((epoch, step), (1, 0));
            assert!(source.to_string().contains("non-finite"), "{source}");
        }
        other => panic!(
            "expected a non-finite abort, got {:?}",
            other.map(|(_, h)| h)
        ),
    }
}

#[test]
fn rank_loss_needs_three_items_per_batch() {
    let data = tiny_data(0);
    let mut cfg = tiny_run(LossConfig::default(), 0);
    cfg.train.batch_size = 2;
    cfg.train.queue_capacity = 0;
    assert!(matches!(train(&cfg, &data), Err(HarnessError::Config(_))));
}

#[test]
fn subset_larger_than_the_dataset_is_rejected() {
    let data = tiny_data(0);
    let mut cfg = tiny_run(LossConfig::default(), 0);
    cfg.train.subset_size = 10_000;
    assert!(train(&cfg, &data).is_err());
}

#[test]
fn cardinality_ablation_row_arithmetic() {
    let data = tiny_data(2);
    let mut base = tiny_run(LossConfig::default(), 0);
    base.train.epochs = 1;
    base.train.batch_size = 16;
    base.train.queue_capacity = 0;
    let grid = Axis::Cardinality.default_grid();
    let rows = run_ablation(Axis::Cardinality, &grid, &base, &data, 5, 1).unwrap();
    assert_eq!(rows.len(), 24);
    assert_eq!(rows.iter().filter(|r| !r.is_summary()).count(), 20);
    assert_eq!(rows.iter().filter(|r| r.is_summary()).count(), 4);
    for (g, block) in rows.chunks(6).enumerate() {
        assert!(block[..5]
            .iter()
            .all(|r| r.grid_point == grid[g] && !r.is_summary()));
        assert_eq!(
            block[..5]
                .iter()
                .map(|r| r.seed.as_str())
                .collect::<Vec<_>>(),
            ["0", "1", "2", "3", "4"]
        );
        let summary = &block[5];
        assert!(summary.is_summary() && summary.grid_point == grid[g]);
        let knn: Vec<f64> = block[..5]
            .iter()
            .map(|r| r.knn_acc_macro.parse().unwrap())
            .collect();
        let mean = knn.iter().sum::<f64>() / 5.0;
        let (m, _) = summary.knn_acc_macro.split_once('±').unwrap();
        assert!((m.parse::<f64>().unwrap() - mean).abs() < 1e-6);
    }
    let again = run_ablation(Axis::Cardinality, &grid, &base, &data, 5, 2).unwrap();
    let strip = |rows: &[CsvRow]| {
        rows.iter()
            .map(|r| (r.run_id.clone(), r.knn_acc_macro.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&rows), strip(&again));
}

#[test]
fn temporal_axis_runs_both_modes() {
    let data = tiny_data(3);
    let mut base = tiny_run(LossConfig::default(), 0);
    base.train.epochs = 1;
    let grid = Axis::Temporal.default_grid();
    assert_eq!(grid, ["on", "off"]);
    let on = Axis::Temporal.apply("on", &base, &data).unwrap();
    let off = Axis::Temporal.apply("off", &base, &data).unwrap();
    assert_eq!(on.train.temporal_views, TemporalViews::On);
    assert_eq!(off.train.temporal_views, TemporalViews::Off);
    assert!(Axis::Temporal.apply("sometimes", &base, &data).is_err());
    let rows = run_ablation(Axis::Temporal, &grid, &base, &data, 1, 1).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r
        .knn_acc_macro
        .split('±')
        .next()
        .unwrap()
        .parse::<f64>()
        .is_ok()));
}

#[test]
fn grid_points_are_validated() {
    let data = tiny_data(0);
    let base = tiny_run(LossConfig::default(), 0);
    assert!(matches!(
        run_ablation(Axis::PatchSize, &[], &base, &data, 1, 1),
        Err(HarnessError::EmptyGrid(Axis::PatchSize))
    ));
    for (axis, point) in [
        (Axis::Cardinality, "0"),
        (Axis::Cardinality, "1.5"),
        (Axis::PatchSize, "0"),
        (Axis::PatchSize, "99"),
        (Axis::AlphaDmax, "0.5"),
        (Axis::AlphaDmax, "2:100"),
        (Axis::Augmentation, "warp"),
    ] {
        assert!(
            matches!(
                axis.apply(point, &base, &data),
                Err(HarnessError::GridPoint { .. })
            ),
            "{axis} {point}"
        );
    }
    let cfg = Axis::AlphaDmax.apply("0.3:1200", &base, &data).unwrap();
    assert_eq!((cfg.loss.alpha, cfg.loss.d_max), (0.3, 1200.0));
    let cfg = Axis::Augmentation.apply("solarize", &base, &data).unwrap();
    assert_eq!(cfg.train.extra_technique, "solarize");
}

fn sample_rows() -> Vec<CsvRow> {
    let row = |seed: &str, knn: &str| CsvRow {
        run_id: format!("patch_size-8-s{seed}"),
        axis: "patch_size".into(),
        grid_point: "8".into(),
        seed: seed.into(),
        ssl_kind: "infonce".into(),
        geo_kind: "rank".into(),
        alpha: "0.48".into(),
        d_max: "2500".into(),
        epoch: "3".into(),
        loss_ssl: "1.5".into(),
        loss_reg: "0.25".into(),
        loss_total: "0.85".into(),
        knn_acc_macro: knn.into(),
        linear_acc_macro: "0.5".into(),
        spearman_geo: String::new(),
        wallclock_s: "1.25".into(),
    };
    let mut rows = vec![row("0", "0.5"), row("1", "0.7")];
    rows.extend(summary_rows(&rows));
    rows
}

#[test]
fn summary_rows_hold_mean_and_sample_std() {
    let rows = sample_rows();
    let s = &rows[2];
    assert!(s.is_summary());
    assert_eq!(s.knn_acc_macro, "0.600000±0.141421");
    assert_eq!(s.linear_acc_macro, "0.500000±0.000000");
    assert_eq!(s.spearman_geo, "");
}

#[test]
fn csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let rows = sample_rows();
    write_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(read_csv(&path).unwrap(), rows);
    write_csv(&path, &[]).unwrap();
    assert!(read_csv(&path).unwrap().is_empty());
}

#[test]
fn malformed_csv_names_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "").unwrap();
    assert!(matches!(read_csv(&path), Err(HarnessError::Csv(m)) if m.contains("empty")));
    std::fs::write(&path, "run_id,axis\n").unwrap();
    assert!(matches!(read_csv(&path), Err(HarnessError::Csv(m)) if m.contains("column 3")));
    let mut text = CSV_COLUMNS.join(",");
    text.push_str("\na,b,c\n");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_csv(&path), Err(HarnessError::Csv(m)) if m.contains("line 2")));
}

#[test]
fn embeddings_export_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.f32");
    let emb = DenseArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
    export_embeddings(&emb, "demo", &[7, 9], &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 24);
    assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 6.5);
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(path.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["rows"], 2);
    assert_eq!(meta["dim"], 3);
    assert_eq!(meta["records"], serde_json::json!([7, 9]));
    assert!(export_embeddings(&emb, "demo", &[1], &path).is_err());
}
