//! Differentiable soft ranks.
//!
//! The soft rank of `s` is the Euclidean projection of `s / epsilon` onto the
//! permutahedron spanned by `(1, ..., n)`. After sorting, the projection
//! reduces to an L2 isotonic regression solved by pool-adjacent-violators,
//! whose Jacobian is block-wise averaging. Ranks are 1-based: in ascending
//! direction the smallest value gets rank 1.
//!
//! Inputs whose sorted gaps exceed `epsilon` land on a vertex of the
//! permutahedron, where the soft rank equals the hard rank exactly and the
//! Jacobian vanishes. At exact ties between blocks the block-averaged
//! subgradient is returned.

use thiserror::Error;

use crate::diffcore::{DenseArray, DiffError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SoftRankError {
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("need at least {min} values, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("stale solver state: built for length {expected}, got {got}")]
    Stale { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    /// Smallest value gets rank 1.
    #[default]
    Ascending,
    /// Largest value gets rank 1.
    Descending,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftRankConfig {
    pub epsilon: f64,
    pub direction: Direction,
}

impl SoftRankConfig {
    pub fn new(epsilon: f64, direction: Direction) -> Result<Self, SoftRankError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(SoftRankError::Epsilon(epsilon));
        }
        Ok(Self { epsilon, direction })
    }
}

impl Default for SoftRankConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            direction: Direction::Ascending,
        }
    }
}

/// Block partition produced by the isotonic solve: block `b` covers
/// `starts[b]..starts[b + 1]` (the last block ends at `len`).
#[derive(Debug, Clone, PartialEq)]
pub struct PavBlocks {
    starts: Vec<usize>,
    means: Vec<f64>,
    len: usize,
}

impl PavBlocks {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_blocks(&self) -> usize {
        self.starts.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// Half-open index ranges of each block.
    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.starts.iter().enumerate().map(move |(b, &s)| {
            let e = self.starts.get(b + 1).copied().unwrap_or(self.len);
            s..e
        })
    }
}

/// L2 isotonic regression onto non-increasing sequences:
/// `argmin_x sum (x_k - y_k)^2` subject to `x_1 >= x_2 >= ... >= x_n`.
///
/// Stack-based pool-adjacent-violators, `O(n)`.
pub fn isotonic_l2(y: &[f64]) -> Result<(Vec<f64>, PavBlocks), SoftRankError> {
    if y.is_empty() {
        return Err(SoftRankError::TooShort { min: 1, got: 0 });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SoftRankError::NonFinite);
    }
    // (start, sum, count)
    let mut stack: Vec<(usize, f64, usize)> = Vec::with_capacity(y.len());
    for (i, &v) in y.iter().enumerate() {
        stack.push((i, v, 1));
        while stack.len() >= 2 {
            let (_, s1, c1) = stack[stack.len() - 1];
            let (_, s0, c0) = stack[stack.len() - 2];
            // pool while the earlier block does not strictly exceed the later
            if s0 / c0 as f64 > s1 / c1 as f64 {
                break;
            }
            stack.pop();
            let top = stack.last_mut().expect("two blocks");
            top.1 = s0 + s1;
            top.2 = c0 + c1;
        }
    }
    let mut x = Vec::with_capacity(y.len());
    let mut starts = Vec::with_capacity(stack.len());
    let mut means = Vec::with_capacity(stack.len());
    for &(start, sum, count) in &stack {
        let m = sum / count as f64;
        starts.push(start);
        means.push(m);
        x.extend(std::iter::repeat_n(m, count));
    }
    Ok((
        x,
        PavBlocks {
            starts,
            means,
            len: y.len(),
        },
    ))
}

/// Vector-Jacobian product of [`isotonic_l2`]: the adjoint is averaged
/// within each block and spread uniformly over it.
pub fn isotonic_vjp(adjoint: &[f64], blocks: &PavBlocks) -> Result<Vec<f64>, SoftRankError> {
    if adjoint.len() != blocks.len {
        return Err(SoftRankError::Stale {
            expected: blocks.len,
            got: adjoint.len(),
        });
    }
    let mut out = vec![0.0; adjoint.len()];
    for r in blocks.ranges() {
        let avg = adjoint[r.clone()].iter().sum::<f64>() / r.len() as f64;
        out[r].iter_mut().for_each(|v| *v = avg);
    }
    Ok(out)
}

/// What the backward pass of [`soft_rank`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct SoftRankState {
    /// `order[k]` is the input index holding the k-th largest scaled value.
    order: Vec<usize>,
    blocks: PavBlocks,
    epsilon: f64,
    direction: Direction,
}

impl SoftRankState {
    pub fn blocks(&self) -> &PavBlocks {
        &self.blocks
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

/// Soft rank of `s` with its backward state.
pub fn soft_rank(
    s: &[f64],
    cfg: SoftRankConfig,
) -> Result<(Vec<f64>, SoftRankState), SoftRankError> {
    let n = s.len();
    if n < 2 {
        return Err(SoftRankError::TooShort { min: 2, got: n });
    }
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(SoftRankError::Epsilon(cfg.epsilon));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(SoftRankError::NonFinite);
    }
    let sign = match cfg.direction {
        Direction::Ascending => 1.0,
        Direction::Descending => -1.0,
    };
    let z: Vec<f64> = s.iter().map(|&v| sign * v / cfg.epsilon).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(SoftRankError::NonFinite);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    // target vertex weights (n, n-1, ..., 1) in sorted order
    let y: Vec<f64> = order
        .iter()
        .enumerate()
        .map(|(k, &i)| z[i] - (n - k) as f64)
        .collect();
    let (v, blocks) = isotonic_l2(&y)?;
    let mut ranks = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        ranks[i] = z[i] - v[k];
    }
    Ok((
        ranks,
        SoftRankState {
            order,
            blocks,
            epsilon: cfg.epsilon,
            direction: cfg.direction,
        },
    ))
}

/// Vector-Jacobian product of [`soft_rank`] at the point its state was
/// computed for: gradient of `<adjoint, soft_rank(s)>` with respect to `s`.
pub fn soft_rank_vjp(adjoint: &[f64], state: &SoftRankState) -> Result<Vec<f64>, SoftRankError> {
    let n = state.order.len();
    if adjoint.len() != n {
        return Err(SoftRankError::Stale {
            expected: n,
            got: adjoint.len(),
        });
    }
    let sorted: Vec<f64> = state.order.iter().map(|&i| adjoint[i]).collect();
    let pooled = isotonic_vjp(&sorted, &state.blocks)?;
    let scale = match state.direction {
        Direction::Ascending => 1.0,
        Direction::Descending => -1.0,
    } / state.epsilon;
    let mut out = vec![0.0; n];
    for (k, &i) in state.order.iter().enumerate() {
        out[i] = scale * (sorted[k] - pooled[k]);
    }
    Ok(out)
}

/// Exact 1-based ranks; ties are broken by ascending index.
pub fn hard_rank(values: &[f64], direction: Direction) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = match direction {
            Direction::Ascending => values[a].total_cmp(&values[b]),
            Direction::Descending => values[b].total_cmp(&values[a]),
        };
        ord.then(a.cmp(&b))
    });
    let mut ranks = vec![0; values.len()];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = pos + 1;
    }
    ranks
}

/// Row-wise soft rank of a 2-D tape node, with the exact VJP registered as
/// a custom backward rule.
pub fn soft_rank_rows<'t>(x: Var<'t>, cfg: SoftRankConfig) -> Result<Var<'t>, DiffError> {
    let value = x.value();
    let (rows, cols) = value.dims2().ok_or_else(|| DiffError::Rank {
        op: "soft_rank_rows",
        expected: 2,
        shape: value.shape().to_vec(),
    })?;
    let mut out = Vec::with_capacity(rows * cols);
    let mut states = Vec::with_capacity(rows);
    for r in 0..rows {
        let (ranks, state) =
            soft_rank(value.row(r), cfg).map_err(|_| DiffError::NonFinite { op: "soft_rank" })?;
        out.extend(ranks);
        states.push(state);
    }
    let out = DenseArray::new(vec![rows, cols], out)?;
    x.tape().custom("soft_rank_rows", &[x], out, move |g| {
        let mut d = Vec::with_capacity(rows * cols);
        for (r, st) in states.iter().enumerate() {
            d.extend(soft_rank_vjp(&g.data()[r * cols..(r + 1) * cols], st).expect("row state"));
        }
        vec![DenseArray::new(vec![rows, cols], d).expect("soft rank grad")]
    })
}
