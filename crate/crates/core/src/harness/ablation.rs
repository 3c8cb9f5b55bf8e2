//! Study-axis sweeps and the metrics CSV.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pretrain, train_locations, HarnessError, RunConfig, RunReport, TemporalViews};
use crate::augment::Technique;
use crate::losses::{GeoKind, SslKind};
use crate::synthdata::Dataset;

/// Column order of every metrics CSV.
pub const CSV_COLUMNS: [&str; 16] = [
    "run_id",
    "axis",
    "grid_point",
    "seed",
    "ssl_kind",
    "geo_kind",
    "alpha",
    "d_max",
    "epoch",
    "loss_ssl",
    "loss_reg",
    "loss_total",
    "knn_acc_macro",
    "linear_acc_macro",
    "spearman_geo",
    "wallclock_s",
];

/// Seed cell of aggregate rows.
pub const SUMMARY_SEED: &str = "summary";

/// One CSV line. Cells are kept as text so summary rows can hold
/// `mean±std`; empty cells mean "not measured".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub axis: String,
    pub grid_point: String,
    pub seed: String,
    pub ssl_kind: String,
    pub geo_kind: String,
    pub alpha: String,
    pub d_max: String,
    pub epoch: String,
    pub loss_ssl: String,
    pub loss_reg: String,
    pub loss_total: String,
    pub knn_acc_macro: String,
    pub linear_acc_macro: String,
    pub spearman_geo: String,
    pub wallclock_s: String,
}

impl CsvRow {
    pub fn is_summary(&self) -> bool {
        self.seed == SUMMARY_SEED
    }

    /// Rows carrying final evaluation metrics.
    pub fn has_metrics(&self) -> bool {
        !self.knn_acc_macro.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Augmentation,
    Cardinality,
    Temporal,
    PatchSize,
    AlphaDmax,
}

impl Axis {
    pub const ALL: [Axis; 5] = [
        Axis::Augmentation,
        Axis::Cardinality,
        Axis::Temporal,
        Axis::PatchSize,
        Axis::AlphaDmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Augmentation => "augmentation",
            Axis::Cardinality => "cardinality",
            Axis::Temporal => "temporal",
            Axis::PatchSize => "patch_size",
            Axis::AlphaDmax => "alpha_dmax",
        }
    }

    /// Grid used when none is given.
    pub fn default_grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Augmentation => &[
                "none",
                "brightness",
                "contrast",
                "sharpness",
                "gaussian_blur",
                "gaussian_noise",
                "solarize",
                "posterize",
                "grayscale",
                "cutout",
                "grid_shuffle",
                "shear",
                "translate",
            ],
            Axis::Cardinality => &["0.125", "0.25", "0.5", "1"],
            Axis::Temporal => &["on", "off"],
            Axis::PatchSize => &["8", "12", "16"],
            Axis::AlphaDmax => &["1:2500", "0.48:1000", "0.48:2500", "0.48:5000"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// The run configuration of one grid point.
    ///
    /// * augmentation: a technique name appended to the preset at
    ///   `train.extra_p`, or `none`.
    /// * cardinality: fraction of the training locations, in `(0, 1]`.
    /// * temporal: `on` or `off`.
    /// * patch_size: crop side in pixels.
    /// * alpha_dmax: `alpha:d_max`.
    pub fn apply(
        self,
        point: &str,
        base: &RunConfig,
        data: &Dataset,
    ) -> Result<RunConfig, HarnessError> {
        let fail = |reason: String| HarnessError::GridPoint {
            axis: self,
            point: point.to_string(),
            reason,
        };
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| fail(e.to_string()));
        let mut cfg = base.clone();
        match self {
            Axis::Augmentation => {
                if point == "none" {
                    cfg.train.extra_technique.clear();
                } else {
                    Technique::with_strength(point, cfg.train.extra_strength)
                        .map_err(|e| fail(e.to_string()))?;
                    cfg.train.extra_technique = point.to_string();
                }
            }
            Axis::Cardinality => {
                let f = num(point)?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(fail("fraction must be in (0, 1]".into()));
                }
                let n = train_locations(data).len();
                cfg.train.subset_size = ((n as f64 * f).round() as usize).max(1);
            }
            Axis::Temporal => {
                cfg.train.temporal_views = match point {
                    "on" => TemporalViews::On,
                    "off" => TemporalViews::Off,
                    _ => return Err(fail("expected on or off".into())),
                };
            }
            Axis::PatchSize => {
                cfg.train.crop_size = point.trim().parse().map_err(|e| fail(format!("{e}")))?;
                if cfg.train.crop_size == 0 {
                    return Err(fail("crop side must be positive".into()));
                }
            }
            Axis::AlphaDmax => {
                let (a, d) = point
                    .split_once(':')
                    .ok_or_else(|| fail("expected alpha:d_max".into()))?;
                cfg.loss.alpha = num(a)?;
                cfg.loss.d_max = num(d)?;
            }
        }
        cfg.validate().map_err(|e| fail(e.to_string()))?;
        cfg.input_dims(data).map_err(|e| fail(e.to_string()))?;
        Ok(cfg)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
                format!("unknown axis {s:?}; expected one of {}", names.join(", "))
            })
    }
}

fn kind_names(cfg: &RunConfig) -> (&'static str, &'static str) {
    let ssl = match cfg.loss.ssl_kind {
        SslKind::Infonce => "infonce",
        SslKind::Consistency => "consistency",
    };
    let geo = match cfg.loss.geo_kind {
        GeoKind::None => "none",
        GeoKind::Basic => "basic",
        GeoKind::Rank => "rank",
    };
    (ssl, geo)
}

/// Per-epoch rows of one run; the last one carries the final metrics.
pub fn report_rows(
    run_id: &str,
    axis: &str,
    grid_point: &str,
    cfg: &RunConfig,
    report: &RunReport,
) -> Vec<CsvRow> {
    let (ssl, geo) = kind_names(cfg);
    let last = report.epochs.len().saturating_sub(1);
    report
        .epochs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let fin = i == last;
            let metric = |v: f64| if fin { v.to_string() } else { String::new() };
            CsvRow {
                run_id: run_id.to_string(),
                axis: axis.to_string(),
                grid_point: grid_point.to_string(),
                seed: cfg.train.seed.to_string(),
                ssl_kind: ssl.to_string(),
                geo_kind: geo.to_string(),
                alpha: cfg.loss.alpha.to_string(),
                d_max: cfg.loss.d_max.to_string(),
                epoch: e.epoch.to_string(),
                loss_ssl: e.loss_ssl.to_string(),
                loss_reg: e.loss_reg.to_string(),
                loss_total: e.loss_total.to_string(),
                knn_acc_macro: metric(report.knn_acc_macro),
                linear_acc_macro: metric(report.linear_acc_macro),
                spearman_geo: match (fin, report.spearman_geo) {
                    (true, Some(r)) => r.to_string(),
                    _ => String::new(),
                },
                wallclock_s: if fin {
                    report.wallclock_s.to_string()
                } else {
                    e.wallclock_s.to_string()
                },
            }
        })
        .collect()
}

/// `(mean, sample std)`; the std of a single value is 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

fn aggregate(rows: &[&CsvRow], cell: impl Fn(&CsvRow) -> &str) -> String {
    let values: Vec<f64> = rows
        .iter()
        .filter_map(|r| cell(r).parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .collect();
    mean_std(&values).map_or(String::new(), |(m, s)| format!("{m:.6}±{s:.6}"))
}

/// One `mean±std` row per `(axis, grid_point)`, over the rows carrying
/// metrics, in order of first appearance.
pub fn summary_rows(rows: &[CsvRow]) -> Vec<CsvRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows.iter().filter(|r| r.has_metrics() && !r.is_summary()) {
        let key = (r.axis.clone(), r.grid_point.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(axis, point)| {
            let group: Vec<&CsvRow> = rows
                .iter()
                .filter(|r| {
                    r.has_metrics() && !r.is_summary() && r.axis == axis && r.grid_point == point
                })
                .collect();
            let first = group[0];
            CsvRow {
                run_id: format!("{axis}-{point}-{SUMMARY_SEED}"),
                axis: axis.clone(),
                grid_point: point.clone(),
                seed: SUMMARY_SEED.to_string(),
                ssl_kind: first.ssl_kind.clone(),
                geo_kind: first.geo_kind.clone(),
                alpha: first.alpha.clone(),
                d_max: first.d_max.clone(),
                epoch: first.epoch.clone(),
                loss_ssl: aggregate(&group, |r| &r.loss_ssl),
                loss_reg: aggregate(&group, |r| &r.loss_reg),
                loss_total: aggregate(&group, |r| &r.loss_total),
                knn_acc_macro: aggregate(&group, |r| &r.knn_acc_macro),
                linear_acc_macro: aggregate(&group, |r| &r.linear_acc_macro),
                spearman_geo: aggregate(&group, |r| &r.spearman_geo),
                wallclock_s: aggregate(&group, |r| &r.wallclock_s),
            }
        })
        .collect()
}

/// Runs `pretrain` for every grid point and `seeds` consecutive seeds
/// starting at `base.train.seed`. Emits each run's final row, followed per
/// grid point by its summary row. Runs go through a rayon pool of
/// `threads` workers (0 lets rayon decide); row order does not depend on
/// scheduling.
pub fn run_ablation(
    axis: Axis,
    grid: &[String],
    base: &RunConfig,
    data: &Dataset,
    seeds: usize,
    threads: usize,
) -> Result<Vec<CsvRow>, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::EmptyGrid(axis));
    }
    if seeds == 0 {
        return Err(HarnessError::Config("at least one seed is required".into()));
    }
    let configs = grid
        .iter()
        .map(|p| axis.apply(p, base, data))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, RunConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(g, cfg)| {
            (0..seeds as u64).map(move |s| {
                let mut c = cfg.clone();
                c.train.seed = base.train.seed + s;
                (g, c)
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let finals: Vec<(usize, CsvRow)> = pool.install(|| {
        jobs.par_iter()
            .map(|(g, cfg)| {
                let point = &grid[*g];
                let run_id = format!("{axis}-{point}-s{}", cfg.train.seed);
                let trained = pretrain(cfg, data)?;
                let row = report_rows(&run_id, axis.name(), point, cfg, &trained.report)
                    .pop()
                    .ok_or_else(|| HarnessError::Config("run produced no epochs".into()))?;
                Ok((*g, row))
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })?;
    let mut out = Vec::with_capacity(finals.len() + grid.len());
    for g in 0..grid.len() {
        let group: Vec<CsvRow> = finals
            .iter()
            .filter(|(i, _)| *i == g)
            .map(|(_, r)| r.clone())
            .collect();
        out.extend(summary_rows(&group));
        let summary = out.pop().expect("group has metrics");
        out.extend(group);
        out.push(summary);
    }
    Ok(out)
}

/// Writes the header and `rows` in [`CSV_COLUMNS`] order.
pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| HarnessError::Csv(e.to_string()))?;
    w.write_record(CSV_COLUMNS)
        .map_err(|e| HarnessError::Csv(e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| HarnessError::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics CSV, reporting the offending line and column on error.
pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, HarnessError> {
    let where_ = path.display();
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| HarnessError::Csv(format!("{where_}: {e}")))?;
    let headers = r
        .headers()
        .map_err(|e| HarnessError::Csv(format!("{where_}: {e}")))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(HarnessError::Csv(format!("{where_}: file is empty")));
    }
    for (i, expected) in CSV_COLUMNS.iter().enumerate() {
        match headers.get(i) {
            Some(h) if h == *expected => {}
            got => {
                return Err(HarnessError::Csv(format!(
                    "{where_}: header column {} is {:?}, expected {expected:?}",
                    i + 1,
                    got.unwrap_or("<missing>")
                )))
            }
        }
    }
    if headers.len() != CSV_COLUMNS.len() {
        return Err(HarnessError::Csv(format!(
            "{where_}: header has {} columns, expected {}",
            headers.len(),
            CSV_COLUMNS.len()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| HarnessError::Csv(format!("{where_}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != CSV_COLUMNS.len() {
            return Err(HarnessError::Csv(format!(
                "{where_}: line {line} has {} columns, expected {}",
                rec.len(),
                CSV_COLUMNS.len()
            )));
        }
        let row: CsvRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| HarnessError::Csv(format!("{where_}: line {line}: {e}")))?;
        rows.push(row);
    }
    Ok(rows)
}
