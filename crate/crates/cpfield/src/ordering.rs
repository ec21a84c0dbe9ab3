//! Empirical objects built from a field realization: the normalized field
//! `Q~` on corner grids, concomitant partial-sum processes under coordinate
//! orderings, and the dual (time, intensity) centered pair for under-curve
//! models.
//!
//! Ties are broken by an independent uniform key attached to every point (a
//! randomized probability-integral transform), so ranks stay exchangeable
//! even when the ordering key has atoms.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::Error;
use crate::model::{DomainRegion, ModelSpec};
use crate::sampler::MarkedSample;
use crate::Result;

/// Which key a sort uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingKey {
    /// Sort by one coordinate of the point locations (0-based).
    Coordinate(usize),
    /// Sort by the first coordinate, read as arrival time.
    Time,
    /// Sort by the rate evaluated at the first coordinate; requires an
    /// under-curve domain.
    Intensity,
}

impl OrderingKey {
    pub fn label(&self) -> String {
        match self {
            OrderingKey::Coordinate(k) => format!("coord{}", k + 1),
            OrderingKey::Time => "time".into(),
            OrderingKey::Intensity => "intensity".into(),
        }
    }
}

/// Per-term centering applied before summation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenteringMode {
    None,
    /// Subtract `m(X_i)` from every mark.
    PerTermMean,
}

/// A normalized partial-sum step process evaluated on a grid in `[0, 1]`.
/// `values[g]` is a `k x d2` matrix, one row per requested ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialSumPath {
    pub grid: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
    pub ordering_labels: Vec<String>,
    pub eta: usize,
    /// Set when `eta == 0`; such paths are identically zero and excluded
    /// from covariance estimation.
    pub degenerate: bool,
}

/// Normalized field values `Q~(u)` on a finite corner grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEvaluation {
    pub corners: Vec<Vec<f64>>,
    pub values: Vec<DVector<f64>>,
    /// The centering constants `c(u)` that were subtracted.
    pub centering: Vec<DVector<f64>>,
    pub eta: usize,
    pub degenerate: bool,
}

/// Number of terms in the prefix at index `t`: `floor(eta * t)`, evaluated
/// with a tiny slack so grid values like `2/3` land on the intended integer.
pub fn prefix_len(eta: usize, t: f64) -> usize {
    let raw = ((eta as f64) * t + 1e-9).floor();
    (raw.max(0.0) as usize).min(eta)
}

fn ordering_keys(sample: &MarkedSample, key: OrderingKey, spec: &ModelSpec) -> Result<Vec<f64>> {
    let d1 = sample.points.ncols();
    let column = |k: usize| (0..sample.eta).map(|i| sample.points[(i, k)]).collect::<Vec<_>>();
    match key {
        OrderingKey::Coordinate(k) => {
            if k >= d1 {
                return Err(Error::DimensionMismatch { expected: d1, got: k });
            }
            Ok(column(k))
        }
        OrderingKey::Time => {
            if d1 == 0 {
                return Err(Error::DimensionMismatch { expected: 1, got: 0 });
            }
            Ok(column(0))
        }
        OrderingKey::Intensity => match &spec.domain {
            DomainRegion::UnderCurve { rate, .. } => Ok((0..sample.eta)
                .map(|i| rate.eval1(sample.points[(i, 0)]))
                .collect()),
            _ => Err(Error::InvalidModel(
                "intensity ordering requires an under-curve domain".into(),
            )),
        },
    }
}

fn sort_by_keys(keys: &[f64], ties: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..keys.len()).collect();
    perm.sort_by(|&a, &b| {
        keys[a]
            .partial_cmp(&keys[b])
            .unwrap()
            .then(ties[a].partial_cmp(&ties[b]).unwrap())
            .then(a.cmp(&b))
    });
    perm
}

/// Permutation sorting the sample by the given key, ties randomized by
/// per-point uniform draws from `rng`. `perm[j]` is the index of the point
/// of rank `j`.
pub fn order_by_key<R: Rng>(
    sample: &MarkedSample,
    key: OrderingKey,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let keys = ordering_keys(sample, key, spec)?;
    let ties: Vec<f64> = (0..sample.eta).map(|_| rng.random_range(0.0..1.0)).collect();
    Ok(sort_by_keys(&keys, &ties))
}

/// Partial sums of concomitants under each requested ordering: at grid point
/// `t`, the first `floor(eta t)` concomitants are summed (per-term centered
/// when requested) and divided by `sqrt(eta)`.
///
/// All orderings share one set of per-point tie randomization keys drawn at
/// the start of the call.
pub fn concomitant_partial_sums<R: Rng>(
    sample: &MarkedSample,
    spec: &ModelSpec,
    orderings: &[OrderingKey],
    grid: &[f64],
    centering: CenteringMode,
    rng: &mut R,
) -> Result<PartialSumPath> {
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Verify("grid values must lie in [0, 1]".into()));
    }
    let d2 = sample.marks.ncols();
    let k = orderings.len();
    let labels: Vec<String> = orderings.iter().map(|o| o.label()).collect();
    if sample.eta == 0 {
        return Ok(PartialSumPath {
            grid: grid.to_vec(),
            values: vec![DMatrix::zeros(k, d2); grid.len()],
            ordering_labels: labels,
            eta: 0,
            degenerate: true,
        });
    }

    let eta = sample.eta;
    let ties: Vec<f64> = (0..eta).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut loc = vec![0.0; sample.points.ncols()];

    // Cumulative sums per ordering, then read off the grid prefixes.
    let mut values = vec![DMatrix::<f64>::zeros(k, d2); grid.len()];
    let norm = 1.0 / (eta as f64).sqrt();
    for (row, key) in orderings.iter().enumerate() {
        let keys = ordering_keys(sample, *key, spec)?;
        let perm = sort_by_keys(&keys, &ties);
        let mut cumulative = vec![DVector::<f64>::zeros(d2)];
        let mut running = DVector::<f64>::zeros(d2);
        for &i in &perm {
            let mut term = DVector::from_iterator(d2, (0..d2).map(|c| sample.marks[(i, c)]));
            if centering == CenteringMode::PerTermMean {
                for a in 0..loc.len() {
                    loc[a] = sample.points[(i, a)];
                }
                term -= spec.marks.mean_at(&loc);
            }
            running += term;
            cumulative.push(running.clone());
        }
        for (g, t) in grid.iter().enumerate() {
            let p = prefix_len(eta, *t);
            for c in 0..d2 {
                values[g][(row, c)] = cumulative[p][c] * norm;
            }
        }
    }
    Ok(PartialSumPath {
        grid: grid.to_vec(),
        values,
        ordering_labels: labels,
        eta,
        degenerate: false,
    })
}

/// `Q~(u) = (sum_j Y_j 1(X_j <= u) - eta c(u)) / sqrt(eta)` for each corner,
/// by direct accumulation. The centering constants come from the oracle.
pub fn evaluate_q_field(
    sample: &MarkedSample,
    corners: &[Vec<f64>],
    centering: &[DVector<f64>],
) -> Result<FieldEvaluation> {
    if corners.len() != centering.len() {
        return Err(Error::Verify(
            "one centering constant per corner is required".into(),
        ));
    }
    let d1 = sample.points.ncols();
    let d2 = sample.marks.ncols();
    for u in corners {
        if u.len() != d1 {
            return Err(Error::DimensionMismatch {
                expected: d1,
                got: u.len(),
            });
        }
    }
    let eta = sample.eta;
    if eta == 0 {
        return Ok(FieldEvaluation {
            corners: corners.to_vec(),
            values: vec![DVector::zeros(d2); corners.len()],
            centering: centering.to_vec(),
            eta: 0,
            degenerate: true,
        });
    }
    let norm = 1.0 / (eta as f64).sqrt();
    let mut values = Vec::with_capacity(corners.len());
    for (u, c) in corners.iter().zip(centering) {
        let mut sum = DVector::<f64>::zeros(d2);
        for i in 0..eta {
            let below = (0..d1).all(|a| sample.points[(i, a)] <= u[a]);
            if below {
                for comp in 0..d2 {
                    sum[comp] += sample.marks[(i, comp)];
                }
            }
        }
        values.push((sum - c * (eta as f64)) * norm);
    }
    Ok(FieldEvaluation {
        corners: corners.to_vec(),
        values,
        centering: centering.to_vec(),
        eta,
        degenerate: false,
    })
}

/// The dual-ordering centered process for an under-curve model: row 0 sums
/// concomitants in time order, row 1 in intensity order with randomized
/// ties; both rows are per-term centered by the conditional mean.
pub fn theorem3_process<R: Rng>(
    sample: &MarkedSample,
    spec: &ModelSpec,
    grid: &[f64],
    rng: &mut R,
) -> Result<PartialSumPath> {
    if !matches!(spec.domain, DomainRegion::UnderCurve { .. }) {
        return Err(Error::InvalidModel(
            "the dual-ordering process requires an under-curve domain".into(),
        ));
    }
    if !spec.marks.mean.iter().all(|f| f.is_constant_in(1)) {
        return Err(Error::InvalidModel(
            "the mark mean must not depend on the second coordinate".into(),
        ));
    }
    concomitant_partial_sums(
        sample,
        spec,
        &[OrderingKey::Time, OrderingKey::Intensity],
        grid,
        CenteringMode::PerTermMean,
        rng,
    )
}

/// Long-format CSV export for paths: `rep,ordering,t,component,value`.
pub fn write_paths_csv<'a, W, I>(out: &mut W, paths: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (u64, &'a PartialSumPath)>,
{
    writeln!(out, "rep,ordering,t,component,value")?;
    for (rep, path) in paths {
        for (g, t) in path.grid.iter().enumerate() {
            for (row, label) in path.ordering_labels.iter().enumerate() {
                for c in 0..path.values[g].ncols() {
                    writeln!(out, "{rep},{label},{t},{},{}", c + 1, path.values[g][(row, c)])?;
                }
            }
        }
    }
    Ok(())
}

/// Long-format CSV export for field evaluations: `rep,corner_id,component,value`.
pub fn write_field_csv<'a, W, I>(out: &mut W, evals: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (u64, &'a FieldEvaluation)>,
{
    writeln!(out, "rep,corner_id,component,value")?;
    for (rep, eval) in evals {
        for (id, v) in eval.values.iter().enumerate() {
            for c in 0..v.len() {
                writeln!(out, "{rep},{},{},{}", id + 1, c + 1, v[c])?;
            }
        }
    }
    Ok(())
}
