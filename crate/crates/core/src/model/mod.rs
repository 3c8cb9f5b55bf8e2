//! MLP encoder with projection head, its EMA target copy, the cosine
//! momentum schedule, the negative queue, SGD and binary checkpoints.

mod checkpoint;
mod optim;
mod queue;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use optim::Sgd;
pub use queue::MemoryQueue;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DenseArray, DiffError, Gradients, Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("input has shape {got:?}, encoder expects [K, {expected}]")]
    InputShape { got: Vec<usize>, expected: usize },
    #[error("momentum {0} not in [0, 1]")]
    Momentum(f64),
    #[error("step {step} outside [0, {total}]")]
    Step { step: usize, total: usize },
    #[error("encoders differ in structure: {0}")]
    Structure(String),
    #[error("queue capacity {capacity} is smaller than batch {batch}")]
    Capacity { capacity: usize, batch: usize },
    #[error("queue expects {expected}-dimensional rows, got shape {got:?}")]
    QueueShape { expected: usize, got: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Layer widths. `input_dim` is `C * H * W` of the patches fed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Backbone output width; evaluation features live here.
    pub embed_dim: usize,
    pub proj_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden == 0 || self.embed_dim == 0 || self.proj_dim == 0 {
            return Err(ModelError::Config(format!(
                "all widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn shapes(&self) -> [(&'static str, Vec<usize>); 8] {
        [
            ("backbone.0.weight", vec![self.input_dim, self.hidden]),
            ("backbone.0.bias", vec![self.hidden]),
            ("backbone.1.weight", vec![self.hidden, self.hidden]),
            ("backbone.1.bias", vec![self.hidden]),
            ("backbone.2.weight", vec![self.hidden, self.embed_dim]),
            ("backbone.2.bias", vec![self.embed_dim]),
            ("head.weight", vec![self.embed_dim, self.proj_dim]),
            ("head.bias", vec![self.proj_dim]),
        ]
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DenseArray,
}

/// `input -> hidden -> hidden -> embed_dim` with ReLU between layers, then a
/// linear projection head to `proj_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: Vec<Param>,
}

/// Output of one forward pass recorded on a tape.
pub struct Forward<'t> {
    /// Backbone output, `[K, embed_dim]`.
    pub features: Var<'t>,
    /// Normalized projections, `[K, proj_dim]`.
    pub z: Var<'t>,
}

/// Encoder parameters bound as tape nodes for one step.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Parameter gradients in parameter order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<DenseArray> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

impl Encoder {
    /// He-uniform weights, zero biases.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = cfg
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if shape.len() == 2 {
                    let bound = (6.0 / shape[0] as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    DenseArray::new(shape, data)
                } else {
                    Ok(DenseArray::zeros(&shape))
                };
                value.map(|value| Param {
                    name: name.to_string(),
                    value,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { cfg, params })
    }

    /// Rebuilds an encoder from named parameters (e.g. a checkpoint). The
    /// configuration is inferred from the shapes.
    pub fn from_params(params: Vec<Param>) -> Result<Self, ModelError> {
        let find = |name: &str| {
            params
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.value.shape().to_vec())
                .ok_or_else(|| ModelError::Structure(format!("missing parameter {name}")))
        };
        let first = find("backbone.0.weight")?;
        let last = find("backbone.2.weight")?;
        let head = find("head.weight")?;
        if first.len() != 2 || last.len() != 2 || head.len() != 2 {
            return Err(ModelError::Structure("weights must be 2-D".into()));
        }
        let cfg = EncoderConfig {
            input_dim: first[0],
            hidden: first[1],
            embed_dim: last[1],
            proj_dim: head[1],
        };
        cfg.validate()?;
        let expected = cfg.shapes();
        if params.len() != expected.len() {
            return Err(ModelError::Structure(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(expected.iter()) {
            if p.name != *name || p.value.shape() != shape.as_slice() {
                return Err(ModelError::Structure(format!(
                    "parameter {} {:?} where {} {:?} was expected",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records the parameters on `tape`, as leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Forward pass of a `[K, input_dim]` batch.
    pub fn forward<'t>(&self, bound: &Bound<'t>, x: Var<'t>) -> Result<Forward<'t>, ModelError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(ModelError::InputShape {
                got: shape,
                expected: self.cfg.input_dim,
            });
        }
        let p = &bound.vars;
        let h = x.matmul(p[0])?.add_row(p[1])?.relu()?;
        let h = h.matmul(p[2])?.add_row(p[3])?.relu()?;
        let features = h.matmul(p[4])?.add_row(p[5])?;
        let z = features.matmul(p[6])?.add_row(p[7])?.l2_normalize_rows()?;
        Ok(Forward { features, z })
    }

    /// Gradient-free forward pass returning `(features, z)` values.
    pub fn embed(&self, x: &DenseArray) -> Result<(DenseArray, DenseArray), ModelError> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = self.forward(&bound, tape.constant(x.clone()))?;
        let f = out.features.value().as_ref().clone();
        let z = out.z.value().as_ref().clone();
        Ok((f, z))
    }

    fn check_same_structure(&self, other: &Encoder) -> Result<(), ModelError> {
        if self.cfg != other.cfg {
            return Err(ModelError::Structure(format!(
                "{:?} vs {:?}",
                self.cfg, other.cfg
            )));
        }
        Ok(())
    }
}

/// Momentum copy of an [`Encoder`]. Only [`TargetEncoder::ema_update`]
/// changes its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEncoder {
    inner: Encoder,
}

impl TargetEncoder {
    pub fn from_online(online: &Encoder) -> Self {
        Self {
            inner: online.clone(),
        }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.inner
    }

    /// `target <- m * target + (1 - m) * online`, parameter by parameter.
    pub fn ema_update(&mut self, online: &Encoder, m: f64) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&m) {
            return Err(ModelError::Momentum(m));
        }
        self.inner.check_same_structure(online)?;
        for (t, o) in self.inner.params.iter_mut().zip(&online.params) {
            for (a, &b) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }

    /// Target embeddings as tape constants (no gradient ever flows back).
    pub fn forward_constant<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<Forward<'t>, ModelError> {
        let bound = self.inner.bind(tape, false);
        let out = self.inner.forward(&bound, x.detach())?;
        Ok(Forward {
            features: out.features.detach(),
            z: out.z.detach(),
        })
    }
}

/// Starting momentum of the cosine schedule.
pub const BASE_MOMENTUM: f64 = 0.996;

/// Cosine schedule from [`BASE_MOMENTUM`] at step 0 to 1 at `total`.
pub fn momentum_at(step: usize, total: usize) -> Result<f64, ModelError> {
    if total == 0 || step > total {
        return Err(ModelError::Step { step, total });
    }
    let c = (std::f64::consts::PI * step as f64 / total as f64).cos();
    Ok(1.0 - (1.0 - BASE_MOMENTUM) * (c + 1.0) / 2.0)
}
