//! Frozen-encoder protocols: weighted k-NN, linear probe and the
//! geo-alignment diagnostic, plus raw embedding export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{input_patch, push_row, HarnessError, Representation, RunConfig, TAG_PROBE};
use crate::augment::mix_seed;
use crate::diffcore::{DenseArray, Tape};
use crate::geo::{haversine_with_radius, GeoCoordinate};
use crate::model::Encoder;
use crate::synthdata::Dataset;

const EMBED_CHUNK: usize = 512;
const KNN_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub knn_acc_macro: f64,
    pub linear_acc_macro: f64,
    pub spearman_geo: Option<f64>,
}

/// Embeds `records` (center-cropped to `dims`, no augmentation) as `[n, D]`.
pub fn embed_records(
    enc: &Encoder,
    data: &Dataset,
    records: &[usize],
    dims: (usize, usize, usize),
    repr: Representation,
) -> Result<DenseArray, HarnessError> {
    let d_in = dims.0 * dims.1 * dims.2;
    let width = match repr {
        Representation::Features => enc.config().embed_dim,
        Representation::Projection => enc.config().proj_dim,
    };
    let mut out = Vec::with_capacity(records.len() * width);
    for chunk in records.chunks(EMBED_CHUNK) {
        let mut x = Vec::with_capacity(chunk.len() * d_in);
        for &r in chunk {
            push_row(&mut x, &input_patch(data, r, dims)?);
        }
        let (features, z) = enc.embed(&DenseArray::new(vec![chunk.len(), d_in], x)?)?;
        out.extend_from_slice(match repr {
            Representation::Features => features.data(),
            Representation::Projection => z.data(),
        });
    }
    Ok(DenseArray::new(vec![records.len(), width], out)?)
}

fn rows2(a: &DenseArray, what: &str) -> Result<(usize, usize), HarnessError> {
    a.dims2()
        .ok_or_else(|| HarnessError::Config(format!("{what} must be 2-D, got {:?}", a.shape())))
}

/// Row-normalized copy; zero rows stay zero.
fn unit_rows(a: &DenseArray) -> Vec<f64> {
    let (n, d) = a.dims2().expect("checked 2-D");
    let mut out = a.data().to_vec();
    for i in 0..n {
        let row = &mut out[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// `c = a * b^T` for row-major `a: [m, d]`, `b: [n, d]`.
fn gram(a: &[f64], b: &[f64], m: usize, n: usize, d: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    // SAFETY: the slices hold m*d, n*d and m*n elements laid out with the
    // strides passed below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            d,
            n,
            1.0,
            a.as_ptr(),
            d as isize,
            1,
            b.as_ptr(),
            1,
            d as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Index of the largest score, lowest index on ties.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per-class recall averaged over the classes present in `truth`.
pub fn macro_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let classes = truth.iter().copied().max().map_or(0, |m| m + 1);
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        count[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let present: Vec<f64> = hit
        .iter()
        .zip(&count)
        .filter(|(_, &c)| c > 0)
        .map(|(&h, &c)| h as f64 / c as f64)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Weighted k-NN: each test item takes its `k` most cosine-similar training
/// items, scores every class by `sum exp(sim / (1 - sharpening))` over its
/// neighbors and predicts the best class (lowest index on ties). Returns
/// macro accuracy.
pub fn knn_evaluate(
    train: &DenseArray,
    train_labels: &[usize],
    test: &DenseArray,
    test_labels: &[usize],
    k: usize,
    sharpening: f64,
) -> Result<f64, HarnessError> {
    let (n_train, d) = rows2(train, "train embeddings")?;
    let (n_test, d_test) = rows2(test, "test embeddings")?;
    if d != d_test || train_labels.len() != n_train || test_labels.len() != n_test {
        return Err(HarnessError::Config(format!(
            "embedding/label sizes disagree: train {n_train}x{d} ({} labels), test {n_test}x{d_test} ({} labels)",
            train_labels.len(),
            test_labels.len()
        )));
    }
    if k == 0 || k > n_train {
        return Err(HarnessError::BadK { k, train: n_train });
    }
    if !(0.0..1.0).contains(&sharpening) {
        return Err(HarnessError::Config(format!(
            "sharpening {sharpening} not in [0, 1)"
        )));
    }
    let temperature = 1.0 - sharpening;
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |m| m + 1);
    let a = unit_rows(train);
    let b = unit_rows(test);
    let mut pred = Vec::with_capacity(n_test);
    let mut idx: Vec<usize> = Vec::with_capacity(n_train);
    for start in (0..n_test).step_by(KNN_BLOCK) {
        let m = KNN_BLOCK.min(n_test - start);
        let sims = gram(&b[start * d..(start + m) * d], &a, m, n_train, d);
        for row in sims.chunks_exact(n_train) {
            idx.clear();
            idx.extend(0..n_train);
            let by_sim = |x: &usize, y: &usize| row[*y].total_cmp(&row[*x]).then(x.cmp(y));
            if k < n_train {
                idx.select_nth_unstable_by(k - 1, by_sim);
            }
            let mut scores = vec![0.0; classes];
            for &j in &idx[..k] {
                scores[train_labels[j]] += (row[j] / temperature).exp();
            }
            pred.push(argmax(&scores));
        }
    }
    Ok(macro_accuracy(&pred, test_labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub seed: u64,
}

/// Standardizes columns with statistics of `fit`.
fn standardize(fit: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for row in fit.chunks_exact(d) {
        mean.iter_mut()
            .zip(row)
            .for_each(|(m, v)| *m += v / n as f64);
    }
    let mut sd = vec![0.0; d];
    for row in fit.chunks_exact(d) {
        for ((s, v), m) in sd.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let sd = sd
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, sd)
}

fn apply_standardize(x: &[f64], d: usize, mean: &[f64], sd: &[f64]) -> Vec<f64> {
    x.chunks_exact(d)
        .flat_map(|row| row.iter().zip(mean).zip(sd).map(|((v, m), s)| (v - m) / s))
        .collect()
}

/// Softmax regression on frozen, standardized embeddings, trained by
/// mini-batch SGD with momentum from zero weights. With zero epochs every
/// logit ties and the lowest class is predicted. Returns test macro
/// accuracy.
pub fn linear_probe(
    train: &DenseArray,
    train_labels: &[usize],
    test: &DenseArray,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64, HarnessError> {
    let (n, d) = rows2(train, "train embeddings")?;
    let (n_test, d_test) = rows2(test, "test embeddings")?;
    if d != d_test || train_labels.len() != n || test_labels.len() != n_test || n == 0 {
        return Err(HarnessError::Config(format!(
            "probe sizes disagree: train {n}x{d} ({} labels), test {n_test}x{d_test} ({} labels)",
            train_labels.len(),
            test_labels.len()
        )));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(HarnessError::Config(format!("bad probe settings {cfg:?}")));
    }
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |m| m + 1);
    let (mean, sd) = standardize(train.data(), n, d);
    let xs = apply_standardize(train.data(), d, &mean, &sd);
    let mut w = DenseArray::zeros(&[d, classes]);
    let mut b = DenseArray::zeros(&[1, classes]);
    let mut vw = DenseArray::zeros(&[d, classes]);
    let mut vb = DenseArray::zeros(&[1, classes]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_PROBE]));
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let m = chunk.len();
            let mut xb = Vec::with_capacity(m * d);
            let mut yb = vec![0.0; m * classes];
            for (i, &r) in chunk.iter().enumerate() {
                xb.extend_from_slice(&xs[r * d..(r + 1) * d]);
                yb[i * classes + train_labels[r]] = 1.0;
            }
            let tape = Tape::new();
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let logits = tape
                .constant(DenseArray::new(vec![m, d], xb)?)
                .matmul(wv)?
                .add_row(bv)?;
            let picked = logits
                .mul(tape.constant(DenseArray::new(vec![m, classes], yb)?))?
                .sum_axis(1)?;
            let loss = logits.logsumexp_axis(1)?.sub(picked)?.mean()?;
            let grads = tape.backward(loss)?;
            for (param, vel, var) in [(&mut w, &mut vw, wv), (&mut b, &mut vb, bv)] {
                let g = grads.wrt(var);
                for ((p, v), gi) in param
                    .data_mut()
                    .iter_mut()
                    .zip(vel.data_mut())
                    .zip(g.data())
                {
                    *v = cfg.momentum * *v + gi;
                    *p -= cfg.lr * *v;
                }
            }
        }
    }
    let xt = apply_standardize(test.data(), d, &mean, &sd);
    let pred: Vec<usize> = xt
        .chunks_exact(d)
        .map(|row| {
            let scores: Vec<f64> = (0..classes)
                .map(|c| {
                    b.data()[c]
                        + row
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * w.get2(j, c))
                            .sum::<f64>()
                })
                .collect();
            argmax(&scores)
        })
        .collect();
    Ok(macro_accuracy(&pred, test_labels))
}

/// Average ranks (1-based), ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean over anchors of the Spearman correlation between geodesic distance
/// and cosine embedding distance (`1 - cos`), over the anchor's neighbors
/// within `d_max`. Anchors with fewer than three neighbors or with a
/// constant ranking are skipped; if none remain the metric is undefined.
pub fn spearman_alignment(
    emb: &DenseArray,
    coords: &[GeoCoordinate],
    d_max: f64,
    radius: f64,
) -> Result<f64, HarnessError> {
    let (n, d) = rows2(emb, "embeddings")?;
    if n != coords.len() {
        return Err(HarnessError::Config(format!(
            "{n} embeddings for {} coordinates",
            coords.len()
        )));
    }
    if n < 3 {
        return Err(HarnessError::Undefined(format!(
            "{n} samples, need at least 3"
        )));
    }
    let u = unit_rows(emb);
    let (mut total, mut anchors) = (0.0, 0usize);
    let mut geo = Vec::new();
    let mut rep = Vec::new();
    for i in 0..n {
        geo.clear();
        rep.clear();
        let ui = &u[i * d..(i + 1) * d];
        for j in (0..n).filter(|&j| j != i) {
            let g = haversine_with_radius(coords[i], coords[j], radius);
            if g <= d_max {
                let cos: f64 = ui
                    .iter()
                    .zip(&u[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                geo.push(g);
                rep.push(1.0 - cos);
            }
        }
        if geo.len() < 3 {
            continue;
        }
        if let Some(rho) = pearson(&average_ranks(&geo), &average_ranks(&rep)) {
            total += rho;
            anchors += 1;
        }
    }
    if anchors == 0 {
        return Err(HarnessError::Undefined(format!(
            "no anchor has three or more neighbors within {d_max} km"
        )));
    }
    Ok(total / anchors as f64)
}

/// One frozen-encoder protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Knn,
    Linear,
    Spearman,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Knn, Protocol::Linear, Protocol::Spearman];
}

/// Results of the protocols that were run; `None` for the others. An
/// undefined alignment is also `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ProtocolReport {
    pub knn_acc_macro: Option<f64>,
    pub linear_acc_macro: Option<f64>,
    pub spearman_geo: Option<f64>,
}

/// Runs the selected protocols on the dataset's train/test split.
pub fn evaluate_with(
    enc: &Encoder,
    data: &Dataset,
    cfg: &RunConfig,
    protocols: &[Protocol],
) -> Result<ProtocolReport, HarnessError> {
    cfg.eval.validate()?;
    let m = data.manifest();
    if m.train.is_empty() || m.test.is_empty() {
        return Err(HarnessError::Dataset("train/test split missing".into()));
    }
    let dims = cfg.input_dims(data)?;
    if enc.config().input_dim != dims.0 * dims.1 * dims.2 {
        return Err(HarnessError::Dataset(format!(
            "encoder expects {} inputs, dataset patches give {:?}",
            enc.config().input_dim,
            dims
        )));
    }
    let repr = cfg.eval.representation;
    let wants = |p| protocols.contains(&p);
    let test = embed_records(enc, data, &m.test, dims, repr)?;
    let mut out = ProtocolReport::default();
    if wants(Protocol::Knn) || wants(Protocol::Linear) {
        let train = embed_records(enc, data, &m.train, dims, repr)?;
        let ytrain: Vec<usize> = m.train.iter().map(|&r| m.label[r]).collect();
        let ytest: Vec<usize> = m.test.iter().map(|&r| m.label[r]).collect();
        if wants(Protocol::Knn) {
            out.knn_acc_macro = Some(knn_evaluate(
                &train,
                &ytrain,
                &test,
                &ytest,
                cfg.eval.k,
                cfg.eval.sharpening,
            )?);
        }
        if wants(Protocol::Linear) {
            let probe = ProbeConfig {
                epochs: cfg.eval.probe_epochs,
                lr: cfg.eval.probe_lr,
                batch: cfg.eval.probe_batch,
                momentum: 0.9,
                seed: cfg.train.seed,
            };
            out.linear_acc_macro = Some(linear_probe(&train, &ytrain, &test, &ytest, &probe)?);
        }
    }
    if wants(Protocol::Spearman) {
        let coords: Vec<GeoCoordinate> = m.test.iter().map(|&r| data.coord(r)).collect();
        out.spearman_geo = match spearman_alignment(
            &test,
            &coords,
            cfg.eval.spearman_d_max,
            cfg.loss.earth_radius_km,
        ) {
            Ok(rho) => Some(rho),
            Err(HarnessError::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(out)
}

/// Runs all three protocols on the dataset's train/test split.
pub fn evaluate(
    enc: &Encoder,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<EvalReport, HarnessError> {
    let r = evaluate_with(enc, data, cfg, &Protocol::ALL)?;
    Ok(EvalReport {
        knn_acc_macro: r.knn_acc_macro.expect("knn requested"),
        linear_acc_macro: r.linear_acc_macro.expect("linear probe requested"),
        spearman_geo: r.spearman_geo,
    })
}

#[derive(Serialize)]
struct ExportMeta<'a> {
    dataset: &'a str,
    rows: usize,
    dim: usize,
    dtype: &'static str,
    records: &'a [usize],
}

/// Writes `emb` as little-endian `f32` `[N, D]` to `path` and a JSON
/// sidecar (`path` with extension `json`) naming the dataset and records.
pub fn export_embeddings(
    emb: &DenseArray,
    dataset: &str,
    records: &[usize],
    path: &Path,
) -> Result<(), HarnessError> {
    let (rows, dim) = rows2(emb, "embeddings")?;
    if records.len() != rows {
        return Err(HarnessError::Config(format!(
            "{} records for {rows} rows",
            records.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for &v in emb.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let meta = ExportMeta {
        dataset,
        rows,
        dim,
        dtype: "f32-le",
        records,
    };
    let file = File::create(path.with_extension("json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &meta)?;
    Ok(())
}
