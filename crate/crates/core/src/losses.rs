//! Training objectives: contrastive (InfoNCE), predictive consistency, the
//! distance-regression geo regularizer, the rank-based geo regularizer and
//! their convex mixture.
//!
//! All functions build scalar nodes on the caller's tape. Embeddings are
//! expected to be row-normalized, so dot products are cosine similarities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DenseArray, DiffError, Var};
use crate::geo::{geo_rank, GeoBatch, GeoError, EARTH_RADIUS_KM};
use crate::softrank::{soft_rank_rows, Direction, SoftRankConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("{loss} needs at least {min} samples, got {got}")]
    TooFewSamples {
        loss: &'static str,
        min: usize,
        got: usize,
    },
    #[error("InfoNCE needs at least one negative")]
    EmptyNegatives,
    #[error("embedding {which} row {row} is not unit-norm (|norm - 1| = {dev:e})")]
    NotNormalized {
        which: &'static str,
        row: usize,
        dev: f64,
    },
    #[error("embedding shapes disagree: {0}")]
    Shape(String),
    #[error("geo batch has {geo} samples but embeddings have {emb}")]
    GeoSize { geo: usize, emb: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SslKind {
    #[default]
    Infonce,
    Consistency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeoKind {
    None,
    Basic,
    #[default]
    Rank,
}

/// Target scaling for the distance-regression regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeoBasicNormalization {
    /// Raw kilometers.
    None,
    /// `2 d / (pi R)`, which shares the `[0, 2]` range of cosine distance.
    #[default]
    MaxGeodesic,
}

/// Denominator of the rank regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankNormalizer {
    /// `K (K - 1)` regardless of the mask.
    #[default]
    AllPairs,
    /// Number of unmasked neighbor pairs.
    ActivePairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the SSL term; `1 - alpha` goes to the geo regularizer.
    pub alpha: f64,
    /// Proximity radius in kilometers.
    pub d_max: f64,
    pub tau: f64,
    /// Soft-rank regularization strength.
    pub epsilon: f64,
    pub ssl_kind: SslKind,
    pub geo_kind: GeoKind,
    pub geo_basic_normalization: GeoBasicNormalization,
    pub rank_normalizer: RankNormalizer,
    pub earth_radius_km: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.48,
            d_max: 2500.0,
            tau: 0.04,
            epsilon: 1e-3,
            ssl_kind: SslKind::Infonce,
            geo_kind: GeoKind::Rank,
            geo_basic_normalization: GeoBasicNormalization::MaxGeodesic,
            rank_normalizer: RankNormalizer::AllPairs,
            earth_radius_km: EARTH_RADIUS_KM,
        }
    }
}

impl LossConfig {
    /// The contrastive baseline: no geo term.
    pub fn baseline() -> Self {
        Self {
            alpha: 1.0,
            geo_kind: GeoKind::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::Config(format!(
                "alpha {} not in [0, 1]",
                self.alpha
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(LossError::Config(format!(
                "epsilon {} must be > 0",
                self.epsilon
            )));
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(LossError::Config(format!(
                "d_max {} must be > 0",
                self.d_max
            )));
        }
        if !(self.earth_radius_km > 0.0 && self.earth_radius_km.is_finite()) {
            return Err(LossError::Config(format!(
                "earth_radius_km {} must be > 0",
                self.earth_radius_km
            )));
        }
        Ok(())
    }
}

const NORM_TOLERANCE: f64 = 1e-9;

fn check_unit_rows(which: &'static str, a: &DenseArray) -> Result<(), LossError> {
    let (r, _) = a
        .dims2()
        .ok_or_else(|| LossError::Shape(format!("{which} must be 2-D, got {:?}", a.shape())))?;
    for i in 0..r {
        let norm = a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let dev = (norm - 1.0).abs();
        if dev > NORM_TOLERANCE {
            return Err(LossError::NotNormalized { which, row: i, dev });
        }
    }
    Ok(())
}

/// Anchor embeddings, their positive views, and optional queued negatives.
#[derive(Clone)]
pub struct EmbeddingBatch<'t> {
    z: Var<'t>,
    z_prime: Var<'t>,
    queue: Option<Arc<DenseArray>>,
}

impl<'t> EmbeddingBatch<'t> {
    pub fn new(
        z: Var<'t>,
        z_prime: Var<'t>,
        queue: Option<Arc<DenseArray>>,
    ) -> Result<Self, LossError> {
        let zv = z.value();
        let pv = z_prime.value();
        if zv.shape() != pv.shape() || zv.ndim() != 2 {
            return Err(LossError::Shape(format!(
                "z {:?} vs z_prime {:?}",
                zv.shape(),
                pv.shape()
            )));
        }
        check_unit_rows("z", &zv)?;
        check_unit_rows("z_prime", &pv)?;
        let queue = queue.filter(|q| !q.is_empty());
        if let Some(q) = &queue {
            if q.dims2().map(|d| d.1) != Some(zv.shape()[1]) {
                return Err(LossError::Shape(format!(
                    "queue {:?} vs embedding dim {}",
                    q.shape(),
                    zv.shape()[1]
                )));
            }
            check_unit_rows("queue", q)?;
        }
        Ok(Self { z, z_prime, queue })
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z(&self) -> Var<'t> {
        self.z
    }

    pub fn z_prime(&self) -> Var<'t> {
        self.z_prime
    }

    pub fn queue_len(&self) -> usize {
        self.queue.as_ref().map_or(0, |q| q.shape()[0])
    }
}

/// InfoNCE with the positive included in the denominator. Negatives are the
/// other samples' positive views plus the queue.
pub fn info_nce<'t>(batch: &EmbeddingBatch<'t>, tau: f64) -> Result<Var<'t>, LossError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::Config(format!("tau {tau} must be > 0")));
    }
    let k = batch.len();
    if k == 0 {
        return Err(LossError::TooFewSamples {
            loss: "info_nce",
            min: 1,
            got: 0,
        });
    }
    if k - 1 + batch.queue_len() == 0 {
        return Err(LossError::EmptyNegatives);
    }
    let sims = batch.z.matmul_nt(batch.z_prime)?;
    let positives = sims.diagonal()?.scale(1.0 / tau)?;
    let logits = match &batch.queue {
        Some(q) => {
            let q = batch.z.tape().constant_shared(Arc::clone(q));
            let qs = batch.z.matmul_nt(q)?;
            Var::concat(&[sims, qs], 1)?
        }
        None => sims,
    };
    let lse = logits.scale(1.0 / tau)?.logsumexp_axis(1)?;
    Ok(lse.sub(positives)?.mean()?)
}

/// Negative cosine similarity between anchors and gradient-stopped targets,
/// averaged over the batch; lies in `[-1, 1]`.
pub fn consistency<'t>(batch: &EmbeddingBatch<'t>) -> Result<Var<'t>, LossError> {
    if batch.is_empty() {
        return Err(LossError::TooFewSamples {
            loss: "consistency",
            min: 1,
            got: 0,
        });
    }
    let target = batch.z_prime.detach();
    Ok(batch.z.row_dot(target)?.mean()?.neg()?)
}

fn check_geo_size(batch: &EmbeddingBatch<'_>, gb: &GeoBatch) -> Result<(), LossError> {
    if gb.len() != batch.len() {
        return Err(LossError::GeoSize {
            geo: gb.len(),
            emb: batch.len(),
        });
    }
    Ok(())
}

/// Mean squared gap between cosine distance `1 - z_i . z_j` and the
/// (optionally normalized) geodesic distance, over ordered pairs `i != j`.
pub fn geo_basic_reg<'t>(
    batch: &EmbeddingBatch<'t>,
    gb: &GeoBatch,
    cfg: &LossConfig,
) -> Result<Var<'t>, LossError> {
    let k = batch.len();
    if k < 2 {
        return Err(LossError::TooFewSamples {
            loss: "geo_basic_reg",
            min: 2,
            got: k,
        });
    }
    check_geo_size(batch, gb)?;
    let scale = match cfg.geo_basic_normalization {
        GeoBasicNormalization::None => 1.0,
        GeoBasicNormalization::MaxGeodesic => 2.0 / (std::f64::consts::PI * gb.radius()),
    };
    let target = DenseArray::new(
        vec![k, k],
        gb.distances().iter().map(|d| d * scale).collect(),
    )?;
    let tape = batch.z.tape();
    let target = tape.constant(target);
    let cos_dist = batch.z.matmul_nt(batch.z)?.neg()?.add_scalar(1.0)?;
    let gap = cos_dist.sub(target)?.off_diagonal()?;
    Ok(gap.square()?.sum()?.scale(1.0 / (k * (k - 1)) as f64)?)
}

/// Masked squared error between the soft descending ranks of each anchor's
/// similarities and the hard ascending ranks of its geodesic distances.
///
/// Ranks are taken over all `K - 1` neighbors before the mask is applied.
/// The geo side is a constant label.
pub fn rank_reg<'t>(
    batch: &EmbeddingBatch<'t>,
    gb: &GeoBatch,
    cfg: &LossConfig,
) -> Result<Var<'t>, LossError> {
    let k = batch.len();
    if k < 3 {
        return Err(LossError::TooFewSamples {
            loss: "rank_reg",
            min: 3,
            got: k,
        });
    }
    check_geo_size(batch, gb)?;
    let mut geo_ranks = Vec::with_capacity(k * (k - 1));
    let mut mask = Vec::with_capacity(k * (k - 1));
    for i in 0..k {
        geo_ranks.extend(geo_rank(i, gb)?.into_iter().map(|r| r as f64));
        mask.extend(
            gb.neighbor_mask(i)
                .into_iter()
                .map(|m| if m { 1.0 } else { 0.0 }),
        );
    }
    let active: f64 = mask.iter().sum();
    let denom = match cfg.rank_normalizer {
        RankNormalizer::AllPairs => (k * (k - 1)) as f64,
        RankNormalizer::ActivePairs => active.max(1.0),
    };
    let tape = batch.z.tape();
    let geo_ranks = tape.constant(DenseArray::new(vec![k, k - 1], geo_ranks)?);
    let mask = tape.constant(DenseArray::new(vec![k, k - 1], mask)?);
    let sims = batch.z.matmul_nt(batch.z)?.off_diagonal()?;
    let rank_cfg = SoftRankConfig {
        epsilon: cfg.epsilon,
        direction: Direction::Descending,
    };
    let soft = soft_rank_rows(sims, rank_cfg)?;
    let err = soft.sub(geo_ranks)?.square()?.mul(mask)?;
    Ok(err.sum()?.scale(1.0 / denom)?)
}

/// `alpha * l_ssl + (1 - alpha) * l_reg`.
pub fn combine<'t>(l_ssl: Var<'t>, l_reg: Var<'t>, alpha: f64) -> Result<Var<'t>, LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::Config(format!("alpha {alpha} not in [0, 1]")));
    }
    Ok(l_ssl.scale(alpha)?.add(l_reg.scale(1.0 - alpha)?)?)
}

/// The SSL term, the geo term (if any) and the mixture actually optimized.
pub struct LossTerms<'t> {
    pub ssl: Var<'t>,
    pub reg: Option<Var<'t>>,
    pub total: Var<'t>,
}

/// Builds the full objective selected by `cfg`. With `GeoKind::None` the
/// total is the SSL term itself.
pub fn objective<'t>(
    batch: &EmbeddingBatch<'t>,
    gb: Option<&GeoBatch>,
    cfg: &LossConfig,
) -> Result<LossTerms<'t>, LossError> {
    cfg.validate()?;
    let ssl = match cfg.ssl_kind {
        SslKind::Infonce => info_nce(batch, cfg.tau)?,
        SslKind::Consistency => consistency(batch)?,
    };
    let reg = match (cfg.geo_kind, gb) {
        (GeoKind::None, _) => None,
        (GeoKind::Basic, Some(gb)) => Some(geo_basic_reg(batch, gb, cfg)?),
        (GeoKind::Rank, Some(gb)) => Some(rank_reg(batch, gb, cfg)?),
        (_, None) => {
            return Err(LossError::Config(
                "geo regularizer selected but no coordinates supplied".into(),
            ))
        }
    };
    let total = match reg {
        Some(r) => combine(ssl, r, cfg.alpha)?,
        None => ssl,
    };
    Ok(LossTerms { ssl, reg, total })
}
