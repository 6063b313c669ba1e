//! Flat gradient vectors and the reduction primitives the alignment
//! controller is built from.
//!
//! Every reduction sums left-to-right inside a shard and combines shard
//! partials in ascending rank order. A single-shard reduction is therefore
//! bit-identical to the plain [`dot`], and any other layout differs from it
//! only by floating-point reassociation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// References with norm at or below this are treated as zero.
pub const MIN_REFERENCE_NORM: f64 = 1e-30;

/// A dense, finite, real-valued gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm_sq(&self) -> f64 {
        sum_products(&self.values, &self.values)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Returns `factor * self`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    /// Returns `self + factor * other`.
    pub fn add_scaled(&self, factor: f64, other: &Self) -> Result<Self> {
        check_dims(self, other)?;
        Self::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + factor * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }
}

impl TryFrom<Vec<f64>> for GradientVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Partition of `[0, dim)` into contiguous, non-empty shards, one per rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardLayout {
    /// `[0, split_1, ..., split_{r-1}, dim]`, strictly increasing.
    bounds: Vec<usize>,
}

impl ShardLayout {
    /// Builds a layout from interior split points.
    pub fn new(dim: usize, splits: &[usize]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidLayout("dimension must be positive".into()));
        }
        let mut bounds = Vec::with_capacity(splits.len() + 2);
        bounds.push(0);
        bounds.extend_from_slice(splits);
        bounds.push(dim);
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidLayout(format!(
                "split points {splits:?} are not strictly increasing inside (0, {dim})"
            )));
        }
        Ok(Self { bounds })
    }

    pub fn single(dim: usize) -> Result<Self> {
        Self::new(dim, &[])
    }

    /// Splits `dim` into `ranks` shards whose sizes differ by at most one.
    pub fn even(dim: usize, ranks: usize) -> Result<Self> {
        if ranks == 0 || ranks > dim {
            return Err(Error::InvalidLayout(format!(
                "cannot split {dim} elements over {ranks} ranks"
            )));
        }
        let base = dim / ranks;
        let extra = dim % ranks;
        let mut splits = Vec::with_capacity(ranks - 1);
        let mut at = 0;
        for r in 0..ranks - 1 {
            at += base + usize::from(r < extra);
            splits.push(at);
        }
        Self::new(dim, &splits)
    }

    pub fn dim(&self) -> usize {
        *self.bounds.last().expect("layout has at least two bounds")
    }

    pub fn rank_count(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn shard(&self, rank: usize) -> Range<usize> {
        self.bounds[rank]..self.bounds[rank + 1]
    }

    pub fn shards(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.bounds.windows(2).map(|w| w[0]..w[1])
    }
}

/// The three globally reduced quantities needed for the cosine diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionTriple {
    pub dot_cross: f64,
    pub norm_sq_curr: f64,
    pub norm_sq_prev: f64,
}

impl ReductionTriple {
    fn add(self, other: Self) -> Self {
        Self {
            dot_cross: self.dot_cross + other.dot_cross,
            norm_sq_curr: self.norm_sq_curr + other.norm_sq_curr,
            norm_sq_prev: self.norm_sq_prev + other.norm_sq_prev,
        }
    }
}

fn check_dims(a: &GradientVector, b: &GradientVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

fn sum_products(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Inner product, summed left to right.
pub fn dot(a: &GradientVector, b: &GradientVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(sum_products(&a.values, &b.values))
}

/// Per-rank partial products for one shard.
pub fn local_triple(curr: &[f64], prev: &[f64]) -> ReductionTriple {
    ReductionTriple {
        dot_cross: sum_products(curr, prev),
        norm_sq_curr: sum_products(curr, curr),
        norm_sq_prev: sum_products(prev, prev),
    }
}

/// Simulated all-reduce of the three local dot products.
///
/// Shard partials may be computed in any order but are always combined in
/// ascending rank order.
pub fn sharded_reduce(
    curr: &GradientVector,
    prev: &GradientVector,
    layout: &ShardLayout,
) -> Result<ReductionTriple> {
    check_dims(curr, prev)?;
    if layout.dim() != curr.dim() {
        return Err(Error::InvalidLayout(format!(
            "layout covers {} elements, gradient has {}",
            layout.dim(),
            curr.dim()
        )));
    }
    let partials: Vec<ReductionTriple> = layout
        .shards()
        .map(|r| local_triple(&curr.values[r.clone()], &prev.values[r]))
        .collect();
    let mut iter = partials.into_iter();
    let first = iter.next().expect("layouts have at least one shard");
    Ok(iter.fold(first, ReductionTriple::add))
}

/// Unit vector along `reference`.
pub fn unit_direction(reference: &GradientVector) -> Result<GradientVector> {
    let norm = reference.norm();
    if !(norm > MIN_REFERENCE_NORM) {
        return Err(Error::DegenerateReference);
    }
    reference.scaled(1.0 / norm)
}

/// Splits `g` into the component along `reference` and the remainder.
pub fn decompose(
    g: &GradientVector,
    reference: &GradientVector,
) -> Result<(GradientVector, GradientVector)> {
    check_dims(g, reference)?;
    let u = unit_direction(reference)?;
    let along = dot(g, &u)?;
    let parallel = u.scaled(along)?;
    let orthogonal = g.sub(&parallel)?;
    Ok((parallel, orthogonal))
}

/// `alpha * g_parallel + beta * g_orthogonal` relative to `reference`.
pub fn anisotropic_rescale(
    g: &GradientVector,
    reference: &GradientVector,
    alpha: f64,
    beta: f64,
) -> Result<GradientVector> {
    let (parallel, orthogonal) = decompose(g, reference)?;
    orthogonal.scaled(beta)?.add_scaled(alpha, &parallel)
}
