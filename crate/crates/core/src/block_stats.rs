//! Per-block statistics of a pair of predictors.
//!
//! For blocks `I_j` of size `m`:
//!
//! * quadratic component `Q_{f,h}(j) = (1/m) Σ (f − h)²(X_i)`
//! * multiplier component `M_{f,h}(j) = (2/m) Σ (f − h)(X_i) (h(X_i) − Y_i)`
//! * block increment `B_{f,h}(j)`, the difference of block mean squared losses,
//!   which equals `Q + M` exactly in real arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MomError, Result};
use crate::model::{BlockPartition, Dataset, LinearPredictor};
use crate::numeric::{dot, pairwise_sum_by};

/// One value per block, in block order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockVector(Vec<f64>);

impl BlockVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn median(&self) -> Result<f64> {
        median(&self.0)
    }

    /// Lowest block index whose value equals the median.
    pub fn median_block(&self) -> Result<usize> {
        median_block(&self.0)
    }

    pub fn count_satisfying(&self, threshold: f64, direction: Direction) -> usize {
        count_blocks_satisfying(&self.0, threshold, direction)
    }

    /// Fraction of blocks satisfying the comparison.
    pub fn fraction_satisfying(&self, threshold: f64, direction: Direction) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.count_satisfying(threshold, direction) as f64 / self.0.len() as f64
    }
}

/// Comparison used when counting blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AtLeast,
    AtMost,
}

impl Direction {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Direction::AtLeast => value >= threshold,
            Direction::AtMost => value <= threshold,
        }
    }
}

fn check_inputs(
    f: &LinearPredictor,
    h: &LinearPredictor,
    data: &Dataset,
    p: &BlockPartition,
) -> Result<()> {
    check_dim(data.dim(), f.dim())?;
    check_dim(data.dim(), h.dim())?;
    p.check_dataset(data)
}

fn per_block<F>(p: &BlockPartition, term: F) -> BlockVector
where
    F: Fn(usize) -> f64,
{
    let inv_m = 1.0 / p.block_size() as f64;
    BlockVector(
        p.blocks()
            .map(|range| pairwise_sum_by(range.start, range.end, &term) * inv_m)
            .collect(),
    )
}

/// `Q_{f,h}(j)`; every entry is nonnegative.
pub fn quad_component(
    f: &LinearPredictor,
    h: &LinearPredictor,
    data: &Dataset,
    p: &BlockPartition,
) -> Result<BlockVector> {
    check_inputs(f, h, data, p)?;
    let diff = f.difference(h)?;
    Ok(per_block(p, |i| {
        let delta = dot(&diff, data.row(i));
        delta * delta
    }))
}

/// `M_{f,h}(j)`.
pub fn multiplier_component(
    f: &LinearPredictor,
    h: &LinearPredictor,
    data: &Dataset,
    p: &BlockPartition,
) -> Result<BlockVector> {
    check_inputs(f, h, data, p)?;
    Ok(per_block(p, |i| {
        let x = data.row(i);
        let hx = dot(h.theta(), x);
        let delta = dot(f.theta(), x) - hx;
        2.0 * delta * (hx - data.response(i))
    }))
}

/// Per-block mean squared loss `(1/m) Σ_{i∈I_j} (f(X_i) − Y_i)²`.
pub fn block_losses(f: &LinearPredictor, data: &Dataset, p: &BlockPartition) -> Result<Vec<f64>> {
    check_dim(data.dim(), f.dim())?;
    p.check_dataset(data)?;
    Ok(block_losses_unchecked(f.theta(), data, p))
}

pub(crate) fn block_losses_unchecked(theta: &[f64], data: &Dataset, p: &BlockPartition) -> Vec<f64> {
    per_block(p, |i| {
        let r = dot(theta, data.row(i)) - data.response(i);
        r * r
    })
    .0
}

/// Block mean squared losses of a linear predictor and their gradients, up to a
/// per-block constant (`(1/m) Σ Y_i²`) that cancels in every increment.
///
/// When `K·d < N` they are evaluated from the block moments `(1/m) Σ X_i X_iᵀ` and
/// `(1/m) Σ X_i Y_i` in `O(K d²)`, otherwise sample by sample in `O(N d)`.
pub(crate) enum BlockLosses<'a> {
    Direct {
        data: &'a Dataset,
        p: &'a BlockPartition,
    },
    Moments {
        dim: usize,
        xx: Vec<f64>,
        xy: Vec<f64>,
    },
}

impl<'a> BlockLosses<'a> {
    pub(crate) fn new(data: &'a Dataset, p: &'a BlockPartition) -> Self {
        let d = data.dim();
        if p.len() * d >= data.len() {
            return Self::Direct { data, p };
        }
        let inv_m = 1.0 / p.block_size() as f64;
        let mut xx = vec![0.0; p.len() * d * d];
        let mut xy = vec![0.0; p.len() * d];
        for (j, range) in p.blocks().enumerate() {
            let a = &mut xx[j * d * d..(j + 1) * d * d];
            let b = &mut xy[j * d..(j + 1) * d];
            for i in range {
                let x = data.row(i);
                let y = data.response(i);
                for r in 0..d {
                    b[r] += x[r] * y;
                    for c in r..d {
                        a[r * d + c] += x[r] * x[c];
                    }
                }
            }
            for r in 0..d {
                b[r] *= inv_m;
                for c in r..d {
                    a[r * d + c] *= inv_m;
                    a[c * d + r] = a[r * d + c];
                }
            }
        }
        Self::Moments { dim: d, xx, xy }
    }

    pub(crate) fn losses(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            Self::Direct { data, p } => block_losses_unchecked(theta, data, p),
            Self::Moments { dim, xx, xy } => xx
                .chunks_exact(dim * dim)
                .zip(xy.chunks_exact(*dim))
                .map(|(a, b)| {
                    let quad: f64 = a
                        .chunks_exact(*dim)
                        .zip(theta)
                        .map(|(row, t)| t * dot(row, theta))
                        .sum();
                    quad - 2.0 * dot(b, theta)
                })
                .collect(),
        }
    }

    /// Gradient of block `j`'s mean squared loss at `theta`.
    pub(crate) fn gradient(&self, theta: &[f64], j: usize) -> Vec<f64> {
        match self {
            Self::Direct { data, p } => {
                let mut grad = vec![0.0; theta.len()];
                for i in p.block(j) {
                    let x = data.row(i);
                    let r = dot(theta, x) - data.response(i);
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g += r * xi;
                    }
                }
                let scale = 2.0 / p.block_size() as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                grad
            }
            Self::Moments { dim, xx, xy } => {
                let a = &xx[j * dim * dim..(j + 1) * dim * dim];
                let b = &xy[j * dim..(j + 1) * dim];
                a.chunks_exact(*dim)
                    .zip(b)
                    .map(|(row, bi)| 2.0 * (dot(row, theta) - bi))
                    .collect()
            }
        }
    }
}

/// `B_{f,h}(j)`, computed directly as a difference of block squared losses.
pub fn block_increment(
    f: &LinearPredictor,
    h: &LinearPredictor,
    data: &Dataset,
    p: &BlockPartition,
) -> Result<BlockVector> {
    check_inputs(f, h, data, p)?;
    let lf = block_losses_unchecked(f.theta(), data, p);
    let lh = block_losses_unchecked(h.theta(), data, p);
    Ok(BlockVector(lf.iter().zip(&lh).map(|(a, b)| a - b).collect()))
}

/// The unique middle order statistic of an odd-length vector.
pub fn median(values: &[f64]) -> Result<f64> {
    let idx = median_block(values)?;
    Ok(values[idx])
}

/// Index of the median entry; among equal values the lowest index wins.
pub fn median_block(values: &[f64]) -> Result<usize> {
    let n = values.len();
    if n.is_multiple_of(2) {
        return Err(MomError::OddLengthRequired(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps equal values in index order
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mid = order[n / 2];
    let value = values[mid];
    Ok((0..n).find(|&j| values[j] == value).unwrap_or(mid))
}

pub fn count_blocks_satisfying(values: &[f64], threshold: f64, direction: Direction) -> usize {
    values
        .iter()
        .filter(|&&v| direction.holds(v, threshold))
        .count()
}
