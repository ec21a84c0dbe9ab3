//! Reproducible generation of compound Poisson field realizations, plus the
//! thinning sampler for inhomogeneous arrival processes and the lift/project
//! embedding between arrival times and the under-curve field.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::Error;
use crate::model::{DomainRegion, MarkModel, ModelSpec, NoiseFamily, ScalarFn};
use crate::rng::{Purpose, RngStream};
use crate::Result;

/// One realization of the marked field: `eta` points with their marks.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkedSample {
    pub eta: usize,
    /// `eta x d1` point locations, in generation order.
    pub points: DMatrix<f64>,
    /// `eta x d2` marks, row-aligned with `points`.
    pub marks: DMatrix<f64>,
    pub seed: u64,
    pub rep_index: u64,
}

/// Addresses of the purpose streams of one replication.
#[derive(Debug, Clone, Copy)]
pub struct ReplicationStreams {
    pub root_seed: u64,
    pub rep_index: u64,
}

impl ReplicationStreams {
    pub fn new(root_seed: u64, rep_index: u64) -> Self {
        Self {
            root_seed,
            rep_index,
        }
    }

    pub fn rng(&self, purpose: Purpose) -> rand_chacha::ChaCha8Rng {
        RngStream::new(self.root_seed, self.rep_index, purpose).rng()
    }
}

/// One Poisson(`nu * vol`) count draw.
pub fn sample_count<R: Rng>(nu: f64, vol: f64, rng: &mut R) -> Result<usize> {
    if !(nu > 0.0) || !(vol > 0.0) {
        return Err(Error::Sampling(format!(
            "Poisson count needs positive intensity and volume, got nu={nu}, vol={vol}"
        )));
    }
    let dist = Poisson::new(nu * vol)
        .map_err(|e| Error::Sampling(format!("Poisson parameter {}: {e}", nu * vol)))?;
    Ok(dist.sample(rng) as usize)
}

/// `n` independent uniform points in the region. Boxes are sampled directly;
/// other regions by rejection from the bounding box. Regions whose acceptance
/// probability falls below 1e-6 are rejected as degenerate.
pub fn sample_points<R: Rng>(domain: &DomainRegion, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let d1 = domain.d1();
    let mut out = DMatrix::<f64>::zeros(n, d1);
    if n == 0 {
        return Ok(out);
    }
    let (lo, hi) = domain.bounding_box();
    match domain {
        DomainRegion::Box { .. } => {
            for i in 0..n {
                for a in 0..d1 {
                    out[(i, a)] = rng.random_range(lo[a]..hi[a]);
                }
            }
        }
        _ => {
            let bbox_vol: f64 = lo.iter().zip(&hi).map(|(a, b)| b - a).product();
            let acceptance = domain.measure()? / bbox_vol;
            if acceptance < 1e-6 {
                return Err(Error::Sampling(format!(
                    "rejection sampling degenerate: acceptance probability {acceptance:.3e} \
                     (region measure / bounding box volume) is below 1e-6"
                )));
            }
            let mut candidate = vec![0.0; d1];
            for i in 0..n {
                loop {
                    for a in 0..d1 {
                        candidate[a] = rng.random_range(lo[a]..hi[a]);
                    }
                    if domain.contains(&candidate)? {
                        break;
                    }
                }
                for a in 0..d1 {
                    out[(i, a)] = candidate[a];
                }
            }
        }
    }
    Ok(out)
}

fn sample_noise<R: Rng>(family: NoiseFamily, d2: usize, rng: &mut R) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_iterator(
        d2,
        (0..d2).map(|_| match family {
            NoiseFamily::Gaussian => rng.sample(StandardNormal),
            NoiseFamily::Rademacher => {
                if rng.random_range(0..2u8) == 0 {
                    -1.0
                } else {
                    1.0
                }
            }
            NoiseFamily::Uniform => {
                let s = 3.0_f64.sqrt();
                rng.random_range(-s..s)
            }
        }),
    )
}

/// Marks `Y_i = m(X_i) + sigma(X_i) xi_i` with iid zero-mean identity-covariance
/// noise, conditionally independent across rows.
pub fn sample_marks<R: Rng>(
    marks: &MarkModel,
    points: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = points.nrows();
    let d2 = marks.d2;
    let mut out = DMatrix::<f64>::zeros(n, d2);
    let mut loc = vec![0.0; points.ncols()];
    for i in 0..n {
        for a in 0..points.ncols() {
            loc[a] = points[(i, a)];
        }
        let mean = marks.mean_at(&loc);
        let factor = marks.cov.factor_at(&loc)?;
        let xi = sample_noise(marks.noise, d2, rng);
        let y = mean + factor * xi;
        for c in 0..d2 {
            out[(i, c)] = y[c];
        }
    }
    Ok(out)
}

/// One full field realization, fully determined by `(root_seed, rep_index)`.
pub fn sample_field(spec: &ModelSpec, streams: &ReplicationStreams) -> Result<MarkedSample> {
    let vol = spec.domain.measure()?;
    let eta = sample_count(spec.nu, vol, &mut streams.rng(Purpose::Count))?;
    let points = sample_points(&spec.domain, eta, &mut streams.rng(Purpose::Points))?;
    let marks = sample_marks(&spec.marks, &points, &mut streams.rng(Purpose::Marks))?;
    Ok(MarkedSample {
        eta,
        points,
        marks,
        seed: streams.root_seed,
        rep_index: streams.rep_index,
    })
}

/// Inhomogeneous Poisson arrivals on `[0, horizon]` with rate `nu * rate(t)`,
/// generated by thinning a homogeneous `nu * rate_max` process. Aborts if the
/// rate is ever observed above the certified bound.
pub fn sample_inhomogeneous_times<R: Rng>(
    rate: &ScalarFn,
    horizon: f64,
    rate_max: f64,
    nu: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(horizon > 0.0) || !(rate_max > 0.0) {
        return Err(Error::Sampling(
            "horizon and rate_max must be positive".into(),
        ));
    }
    let n = sample_count(nu, rate_max * horizon, rng)?;
    let mut candidates: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..horizon)).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut accepted = Vec::with_capacity(n);
    for t in candidates {
        let r = rate.eval1(t);
        if r > rate_max * (1.0 + 1e-12) {
            return Err(Error::Sampling(format!(
                "rate {r} at t={t} exceeds certified rate_max {rate_max}"
            )));
        }
        if rng.random_range(0.0..1.0) * rate_max <= r {
            accepted.push(t);
        }
    }
    Ok(accepted)
}

/// Embed arrival times into the under-curve region: each time `s` becomes
/// `(s, U * rate(s))` with an independent uniform `U`.
pub fn lift_times_to_field<R: Rng>(times: &[f64], rate: &ScalarFn, rng: &mut R) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(times.len(), 2);
    for (i, s) in times.iter().enumerate() {
        out[(i, 0)] = *s;
        out[(i, 1)] = rng.random_range(0.0..1.0) * rate.eval1(*s);
    }
    out
}

/// First coordinates of a two-dimensional field realization, ascending.
pub fn project_field_to_times(sample: &MarkedSample) -> Result<Vec<f64>> {
    if sample.points.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: sample.points.ncols(),
        });
    }
    let mut times: Vec<f64> = (0..sample.eta).map(|i| sample.points[(i, 0)]).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times)
}

/// Persist samples as CSV with header `rep,i,x1..x{d1},y1..y{d2}`, one row
/// per point, ordered by replication then generation order.
pub fn write_samples_csv<W: Write>(out: &mut W, samples: &[MarkedSample]) -> Result<()> {
    let (d1, d2) = samples
        .first()
        .map(|s| (s.points.ncols(), s.marks.ncols()))
        .unwrap_or((0, 0));
    write!(out, "rep,i")?;
    for a in 1..=d1 {
        write!(out, ",x{a}")?;
    }
    for c in 1..=d2 {
        write!(out, ",y{c}")?;
    }
    writeln!(out)?;
    for s in samples {
        for i in 0..s.eta {
            write!(out, "{},{}", s.rep_index, i + 1)?;
            for a in 0..d1 {
                write!(out, ",{}", s.points[(i, a)])?;
            }
            for c in 0..d2 {
                write!(out, ",{}", s.marks[(i, c)])?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
