//! Pre-training loop, evaluation protocols and the ablation drivers.
//!
//! A run is fully determined by its [`RunConfig`] and the dataset: every
//! random draw (initialization, batch order, timestamps, augmentations) is
//! derived from `train.seed` with [`mix_seed`].

mod ablation;
mod eval;

pub use ablation::{
    mean_std, read_csv, report_rows, run_ablation, summary_rows, write_csv, Axis, CsvRow,
    CSV_COLUMNS,
};
pub use eval::{
    embed_records, evaluate, evaluate_with, export_embeddings, knn_evaluate, linear_probe,
    macro_accuracy, spearman_alignment, EvalReport, ProbeConfig, Protocol, ProtocolReport,
};

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{mix_seed, AugError, AugPipeline, AugSpec, Patch, Technique};
use crate::diffcore::{DenseArray, DiffError, Tape};
use crate::geo::{pairwise_geo_with_radius, GeoError};
use crate::losses::{objective, EmbeddingBatch, GeoKind, LossConfig, LossError, SslKind};
use crate::model::{
    momentum_at, Encoder, EncoderConfig, MemoryQueue, ModelError, Sgd, TargetEncoder,
};
use crate::synthdata::{Dataset, SynthError};

// Seed-derivation tags, one per independent random stream.
const TAG_INIT: u64 = 1;
const TAG_SUBSET: u64 = 2;
const TAG_ORDER: u64 = 3;
const TAG_TIME: u64 = 4;
const TAG_AUG: u64 = 5;
const TAG_PROBE: u64 = 6;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("dataset does not fit the run: {0}")]
    Dataset(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: ssl {ssl}, reg {reg}, total {total}")]
    NonFinite {
        epoch: usize,
        step: usize,
        ssl: f64,
        reg: f64,
        total: f64,
    },
    #[error("loss failed at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        #[source]
        source: LossError,
    },
    #[error("k = {k} must be in 1..={train} (training set size)")]
    BadK { k: usize, train: usize },
    #[error("spearman alignment undefined: {0}")]
    Undefined(String),
    #[error("ablation axis {0} got an empty grid")]
    EmptyGrid(Axis),
    #[error("grid point {point:?} invalid for axis {axis}: {reason}")]
    GridPoint {
        axis: Axis,
        point: String,
        reason: String,
    },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Aug(#[from] AugError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How positive pairs are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalViews {
    /// One timestamp per location, drawn once per run; both views augment
    /// that image.
    #[default]
    Single,
    /// Two different timestamps of one location, each augmented.
    On,
    /// Every (location, timestamp) is an independent image; both views are
    /// augmentations of the same image.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugPreset {
    None,
    #[default]
    Geometric,
    Standard,
}

/// Which network output the evaluation protocols read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Backbone output, before the projection head.
    #[default]
    Features,
    /// Normalized projection-head output, the space the losses act on.
    Projection,
}

/// Optimization and data settings of one pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Largest global L2 norm of the gradient before rescaling; 0 disables
    /// clipping.
    pub grad_clip: f64,
    /// Negatives kept from past batches; 0 disables the queue.
    pub queue_capacity: usize,
    pub temporal_views: TemporalViews,
    /// Training locations used; 0 keeps all of them.
    pub subset_size: usize,
    /// Side of the centered square crop fed to the encoder; 0 keeps the
    /// full patch.
    pub crop_size: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub augmentation: AugPreset,
    /// Explicit pipeline used instead of the preset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<AugPipeline>,
    /// One more technique appended to the preset; empty for none.
    pub extra_technique: String,
    pub extra_p: f64,
    pub extra_strength: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            queue_capacity: 1024,
            temporal_views: TemporalViews::Single,
            subset_size: 0,
            crop_size: 0,
            hidden: 128,
            embed_dim: 64,
            proj_dim: 32,
            augmentation: AugPreset::Geometric,
            pipeline: None,
            extra_technique: String::new(),
            extra_p: 0.2,
            extra_strength: 1.0,
            seed: 0,
        }
    }
}

/// Frozen-encoder evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    /// Vote temperature is `1 - sharpening`.
    pub sharpening: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub representation: Representation,
    /// Neighborhood radius of the alignment diagnostic, km.
    pub spearman_d_max: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            sharpening: 0.9,
            probe_epochs: 30,
            probe_lr: 0.1,
            probe_batch: 256,
            representation: Representation::Features,
            spearman_d_max: 2500.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.k == 0 {
            return bad("eval.k must be positive".into());
        }
        if !(0.0..1.0).contains(&self.sharpening) {
            return bad(format!("eval.sharpening {} not in [0, 1)", self.sharpening));
        }
        if !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return bad(format!("eval.probe_lr {} must be > 0", self.probe_lr));
        }
        if self.probe_batch == 0 {
            return bad("eval.probe_batch must be positive".into());
        }
        if !(self.spearman_d_max > 0.0) {
            return bad(format!(
                "eval.spearman_d_max {} must be > 0",
                self.spearman_d_max
            ));
        }
        Ok(())
    }
}

/// Everything that determines a run besides the dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.loss.validate()?;
        self.eval.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(HarnessError::Config(m));
        let min_k = match (self.loss.geo_kind, self.loss.ssl_kind) {
            (GeoKind::Rank, _) => 3,
            (_, SslKind::Infonce) => 2,
            _ => 1,
        };
        if t.batch_size < min_k {
            return bad(format!(
                "batch_size {} below {min_k} required by the selected losses",
                t.batch_size
            ));
        }
        if t.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("lr {} must be > 0", t.lr));
        }
        if !(t.grad_clip >= 0.0 && t.grad_clip.is_finite()) {
            return bad(format!("grad_clip {} must be finite and >= 0", t.grad_clip));
        }
        if t.queue_capacity != 0 && t.queue_capacity < t.batch_size {
            return bad(format!(
                "queue_capacity {} smaller than batch_size {}",
                t.queue_capacity, t.batch_size
            ));
        }
        EncoderConfig {
            input_dim: 1,
            hidden: t.hidden,
            embed_dim: t.embed_dim,
            proj_dim: t.proj_dim,
        }
        .validate()?;
        Sgd::new(t.lr, t.momentum, t.weight_decay)?;
        self.pipeline(None)?;
        Ok(())
    }

    /// Augmentation pipeline: the preset plus the optional extra technique.
    pub fn pipeline(&self, size: Option<(usize, usize)>) -> Result<AugPipeline, HarnessError> {
        let t = &self.train;
        let base = match (&t.pipeline, t.augmentation) {
            (Some(p), _) => {
                p.validate()?;
                p.clone()
            }
            (None, AugPreset::None) => AugPipeline::default(),
            (None, AugPreset::Geometric) => AugPipeline::geometric(size),
            (None, AugPreset::Standard) => AugPipeline::standard(size),
        };
        if t.extra_technique.is_empty() {
            return Ok(base);
        }
        let technique = Technique::with_strength(&t.extra_technique, t.extra_strength)?;
        Ok(base.with(AugSpec::new(technique, t.extra_p)?)?)
    }

    /// Shape of the encoder trained on `data` under this configuration.
    pub fn encoder_config(&self, data: &Dataset) -> Result<EncoderConfig, HarnessError> {
        Ok(encoder_config(self, self.input_dims(data)?))
    }

    /// Patch geometry `(c, side_h, side_w)` seen by the encoder.
    pub fn input_dims(&self, data: &Dataset) -> Result<(usize, usize, usize), HarnessError> {
        let (c, h, w) = data.dims();
        match self.train.crop_size {
            0 => Ok((c, h, w)),
            s if s <= h && s <= w => Ok((c, s, s)),
            s => Err(HarnessError::Dataset(format!(
                "crop_size {s} exceeds the {h}x{w} patches"
            ))),
        }
    }
}

/// Mean losses over the steps of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss_ssl: f64,
    /// 0 when no regularizer is configured.
    pub loss_reg: f64,
    pub loss_total: f64,
    /// Seconds since the run started.
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub epochs: Vec<EpochStats>,
    pub knn_acc_macro: f64,
    pub linear_acc_macro: f64,
    /// `None` when no test pair falls within the alignment radius.
    pub spearman_geo: Option<f64>,
    pub wallclock_s: f64,
}

/// Trained online encoder with its report.
#[derive(Debug, Clone)]
pub struct Trained {
    pub encoder: Encoder,
    pub report: RunReport,
}

/// Distinct locations of the training split, ascending.
pub fn train_locations(data: &Dataset) -> Vec<usize> {
    let m = data.manifest();
    m.train
        .iter()
        .map(|&r| m.location[r])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// One training item: the records its two views are drawn from.
#[derive(Debug, Clone, Copy)]
enum Item {
    Location(usize),
    Record(usize),
}

fn training_items(cfg: &RunConfig, data: &Dataset) -> Result<Vec<Item>, HarnessError> {
    let mut locs = train_locations(data);
    let t = &cfg.train;
    if t.subset_size > locs.len() {
        return Err(HarnessError::Config(format!(
            "subset_size {} exceeds the {} training locations",
            t.subset_size,
            locs.len()
        )));
    }
    if t.subset_size > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[t.seed, TAG_SUBSET]));
        locs.shuffle(&mut rng);
        locs.truncate(t.subset_size);
        locs.sort_unstable();
    }
    let items: Vec<Item> = match t.temporal_views {
        TemporalViews::On => locs.into_iter().map(Item::Location).collect(),
        TemporalViews::Single => {
            let ts = data.manifest().timestamps;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[t.seed, TAG_TIME]));
            locs.into_iter()
                .map(|l| Item::Record(data.record_of(l, rng.random_range(0..ts))))
                .collect()
        }
        TemporalViews::Off => {
            let ts = data.manifest().timestamps;
            locs.into_iter()
                .flat_map(|l| (0..ts).map(move |s| (l, s)))
                .map(|(l, s)| Item::Record(data.record_of(l, s)))
                .collect()
        }
    };
    if items.len() < t.batch_size {
        return Err(HarnessError::Dataset(format!(
            "{} training items cannot fill a batch of {}",
            items.len(),
            t.batch_size
        )));
    }
    Ok(items)
}

/// Normalized, cropped patch of `record`.
fn input_patch(
    data: &Dataset,
    record: usize,
    dims: (usize, usize, usize),
) -> Result<Patch, HarnessError> {
    let p = data.patch(record)?;
    let (_, h, w) = p.dims();
    if (h, w) == (dims.1, dims.2) {
        Ok(p)
    } else {
        Ok(p.center_crop(dims.1, dims.2)?)
    }
}

/// Encoder input scaling: `[0, 255]` to `[0, 1]`.
fn push_row(x: &mut Vec<f64>, p: &Patch) {
    x.extend(p.data().iter().map(|&v| f64::from(v) / 255.0));
}

fn encoder_config(cfg: &RunConfig, dims: (usize, usize, usize)) -> EncoderConfig {
    EncoderConfig {
        input_dim: dims.0 * dims.1 * dims.2,
        hidden: cfg.train.hidden,
        embed_dim: cfg.train.embed_dim,
        proj_dim: cfg.train.proj_dim,
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm` (0 = off).
fn clip_global_norm(grads: &mut [DenseArray], max_norm: f64) {
    if max_norm == 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Runs the self-supervised optimization only; returns the online encoder
/// and per-epoch losses.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<(Encoder, Vec<EpochStats>), HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let t = &cfg.train;
    let dims = cfg.input_dims(data)?;
    let pipeline = cfg.pipeline(None)?;
    let mut items = training_items(cfg, data)?;
    let k = t.batch_size;
    let steps_per_epoch = items.len() / k;
    let total_steps = steps_per_epoch * t.epochs;
    let timestamps = data.manifest().timestamps;
    let radius = cfg.loss.earth_radius_km;

    let mut online = Encoder::new(encoder_config(cfg, dims), mix_seed(&[t.seed, TAG_INIT]))?;
    let mut target = TargetEncoder::from_online(&online);
    let mut sgd = Sgd::new(t.lr, t.momentum, t.weight_decay)?;
    let mut queue = (t.queue_capacity > 0).then(|| MemoryQueue::new(t.queue_capacity, t.proj_dim));
    let mut history = Vec::with_capacity(t.epochs);
    let mut step = 0;

    for epoch in 0..t.epochs {
        let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[t.seed, TAG_ORDER, epoch as u64]));
        items.shuffle(&mut order_rng);
        let (mut sum_ssl, mut sum_reg, mut sum_total) = (0.0, 0.0, 0.0);
        for (b, chunk) in items.chunks_exact(k).enumerate() {
            let mut time_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(&[t.seed, TAG_TIME, step as u64]));
            let mut x1 = Vec::with_capacity(k * online.config().input_dim);
            let mut x2 = Vec::with_capacity(k * online.config().input_dim);
            let mut coords = Vec::with_capacity(k);
            for (i, item) in chunk.iter().enumerate() {
                let (r1, r2) = match *item {
                    Item::Record(r) => (r, r),
                    Item::Location(l) if timestamps > 1 => {
                        let t1 = time_rng.random_range(0..timestamps);
                        let t2 = (t1 + time_rng.random_range(1..timestamps)) % timestamps;
                        (data.record_of(l, t1), data.record_of(l, t2))
                    }
                    Item::Location(l) => {
                        let r = data.record_of(l, 0);
                        (r, r)
                    }
                };
                for (view, (r, x)) in [(r1, &mut x1), (r2, &mut x2)].into_iter().enumerate() {
                    let seed = mix_seed(&[t.seed, TAG_AUG, step as u64, i as u64, view as u64]);
                    let p = pipeline.apply(&input_patch(data, r, dims)?, seed)?;
                    push_row(x, &p);
                }
                coords.push(data.coord(r1));
            }
            let d = online.config().input_dim;
            let tape = Tape::new();
            let bound = online.bind(&tape, true);
            let v1 = tape.constant(DenseArray::new(vec![k, d], x1)?);
            let v2 = tape.constant(DenseArray::new(vec![k, d], x2)?);
            let z = online.forward(&bound, v1)?.z;
            let z_target = target.forward_constant(&tape, v2)?.z;
            let batch =
                EmbeddingBatch::new(z, z_target, queue.as_ref().and_then(|q| q.snapshot()))?;
            let geo = match cfg.loss.geo_kind {
                GeoKind::None => None,
                _ => Some(pairwise_geo_with_radius(&coords, cfg.loss.d_max, radius)?),
            };
            let terms = objective(&batch, geo.as_ref(), &cfg.loss).map_err(|source| {
                HarnessError::Diverged {
                    epoch: epoch + 1,
                    step: b,
                    source,
                }
            })?;
            let (ssl, total) = (terms.ssl.item(), terms.total.item());
            let reg = terms.reg.map_or(0.0, |r| r.item());
            if !(ssl.is_finite() && reg.is_finite() && total.is_finite()) {
                return Err(HarnessError::NonFinite {
                    epoch: epoch + 1,
                    step: b,
                    ssl,
                    reg,
                    total,
                });
            }
            let grads = tape.backward(terms.total)?;
            let mut g = bound.gradients(&grads);
            clip_global_norm(&mut g, t.grad_clip);
            sgd.step(&mut online, &g)?;
            target.ema_update(&online, momentum_at(step, total_steps)?)?;
            if let Some(q) = queue.as_mut() {
                q.push(&z_target.value())?;
            }
            sum_ssl += ssl;
            sum_reg += reg;
            sum_total += total;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        history.push(EpochStats {
            epoch: epoch + 1,
            loss_ssl: sum_ssl / n,
            loss_reg: sum_reg / n,
            loss_total: sum_total / n,
            wallclock_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok((online, history))
}

/// Trains, then evaluates with k-NN, a linear probe and the geo-alignment
/// diagnostic on the test split.
pub fn pretrain(cfg: &RunConfig, data: &Dataset) -> Result<Trained, HarnessError> {
    let start = Instant::now();
    let (encoder, epochs) = train(cfg, data)?;
    let eval = evaluate(&encoder, data, cfg)?;
    Ok(Trained {
        encoder,
        report: RunReport {
            epochs,
            knn_acc_macro: eval.knn_acc_macro,
            linear_acc_macro: eval.linear_acc_macro,
            spearman_geo: eval.spearman_geo,
            wallclock_s: start.elapsed().as_secs_f64(),
        },
    })
}
