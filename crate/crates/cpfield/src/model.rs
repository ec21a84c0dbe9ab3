//! Declarative model specification: the domain region `A`, the mark model
//! `(m, sigma^2)` and the field intensity `nu`, plus evaluation of
//! conditional moments and matrix square roots.
//!
//! Rate and mark functions are built-in parametric families selected by
//! configuration (constant, affine, piecewise-constant, polynomial), not
//! runtime-compiled code, so every model is archivable and the oracle can
//! integrate it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::integrate::{self, IntegrateOptions};
use crate::Result;

/// Tolerance below which an eigenvalue counts as an indefiniteness violation.
pub const PSD_EIG_TOL: f64 = 1e-10;

/// Scalar function of a point, restricted to the built-in families.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFn {
    Constant {
        value: f64,
    },
    Affine {
        intercept: f64,
        slope: Vec<f64>,
    },
    /// Piecewise constant in one coordinate. `values` has one more entry than
    /// `breaks`; piece `k` covers `[breaks[k-1], breaks[k])`, the last piece
    /// is closed on the right.
    PiecewiseConstant {
        axis: usize,
        breaks: Vec<f64>,
        values: Vec<f64>,
    },
    /// Univariate polynomial in one coordinate, `coeffs[k]` multiplying `x^k`.
    Polynomial {
        axis: usize,
        coeffs: Vec<f64>,
    },
}

impl ScalarFn {
    pub fn zero() -> Self {
        ScalarFn::Constant { value: 0.0 }
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            ScalarFn::Constant { value } => *value,
            ScalarFn::Affine { intercept, slope } => {
                intercept + slope.iter().zip(v).map(|(s, x)| s * x).sum::<f64>()
            }
            ScalarFn::PiecewiseConstant {
                axis,
                breaks,
                values,
            } => {
                let x = v[*axis];
                let k = breaks.partition_point(|b| *b <= x);
                values[k]
            }
            ScalarFn::Polynomial { axis, coeffs } => {
                let x = v[*axis];
                coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
            }
        }
    }

    /// Evaluate as a function of a single coordinate (rate functions).
    pub fn eval1(&self, t: f64) -> f64 {
        self.eval(std::slice::from_ref(&t))
    }

    /// Discontinuity locations along `axis`, used to split integration grids.
    pub fn breakpoints(&self, axis: usize) -> Vec<f64> {
        match self {
            ScalarFn::PiecewiseConstant { axis: a, breaks, .. } if *a == axis => breaks.clone(),
            _ => Vec::new(),
        }
    }

    /// True if the function provably does not vary along `axis`.
    pub fn is_constant_in(&self, axis: usize) -> bool {
        match self {
            ScalarFn::Constant { .. } => true,
            ScalarFn::Affine { slope, .. } => slope.get(axis).map_or(true, |s| *s == 0.0),
            ScalarFn::PiecewiseConstant { axis: a, values, .. } => {
                *a != axis || values.windows(2).all(|w| w[0] == w[1])
            }
            ScalarFn::Polynomial { axis: a, coeffs } => {
                *a != axis || coeffs.iter().skip(1).all(|c| *c == 0.0)
            }
        }
    }

    /// True if the pushforward of a continuous distribution along this
    /// function has atoms, i.e. the function is flat on a set of positive
    /// length. Only the built-in families need to be classified.
    pub fn has_flat_pieces(&self) -> bool {
        match self {
            ScalarFn::Constant { .. } => true,
            ScalarFn::Affine { slope, .. } => slope.iter().all(|s| *s == 0.0),
            ScalarFn::PiecewiseConstant { .. } => true,
            ScalarFn::Polynomial { coeffs, .. } => coeffs.iter().skip(1).all(|c| *c == 0.0),
        }
    }

    /// (min, max) over `[a, b]` along the function's own coordinate.
    /// Exact for constant/affine/piecewise families; grid-scanned for
    /// polynomials.
    pub fn range_on(&self, a: f64, b: f64) -> (f64, f64) {
        match self {
            ScalarFn::Constant { value } => (*value, *value),
            ScalarFn::Affine { .. } => {
                let (fa, fb) = (self.eval1(a), self.eval1(b));
                (fa.min(fb), fa.max(fb))
            }
            ScalarFn::PiecewiseConstant { breaks, values, .. } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for (k, val) in values.iter().enumerate() {
                    let left = if k == 0 { f64::NEG_INFINITY } else { breaks[k - 1] };
                    let right = if k == breaks.len() { f64::INFINITY } else { breaks[k] };
                    if left < b && right > a {
                        lo = lo.min(*val);
                        hi = hi.max(*val);
                    }
                }
                // Right-closed last piece: the value at b itself.
                let fb = self.eval1(b);
                (lo.min(fb), hi.max(fb))
            }
            ScalarFn::Polynomial { .. } => {
                let n = 4096;
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for k in 0..=n {
                    let x = a + (b - a) * (k as f64) / (n as f64);
                    let f = self.eval1(x);
                    lo = lo.min(f);
                    hi = hi.max(f);
                }
                (lo, hi)
            }
        }
    }

    fn validate(&self, d1: usize, what: &str) -> Result<()> {
        match self {
            ScalarFn::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::InvalidModel(format!("{what}: non-finite constant")));
                }
            }
            ScalarFn::Affine { intercept, slope } => {
                if slope.len() != d1 {
                    return Err(Error::InvalidModel(format!(
                        "{what}: affine slope has {} entries, domain dimension is {d1}",
                        slope.len()
                    )));
                }
                if !intercept.is_finite() || slope.iter().any(|s| !s.is_finite()) {
                    return Err(Error::InvalidModel(format!("{what}: non-finite coefficient")));
                }
            }
            ScalarFn::PiecewiseConstant {
                axis,
                breaks,
                values,
            } => {
                if *axis >= d1 {
                    return Err(Error::InvalidModel(format!(
                        "{what}: piecewise axis {axis} out of range for dimension {d1}"
                    )));
                }
                if values.len() != breaks.len() + 1 {
                    return Err(Error::InvalidModel(format!(
                        "{what}: piecewise needs breaks.len()+1 values"
                    )));
                }
                if breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidModel(format!("{what}: breaks not increasing")));
                }
            }
            ScalarFn::Polynomial { axis, coeffs } => {
                if *axis >= d1 {
                    return Err(Error::InvalidModel(format!(
                        "{what}: polynomial axis {axis} out of range for dimension {d1}"
                    )));
                }
                if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidModel(format!("{what}: bad polynomial coefficients")));
                }
            }
        }
        Ok(())
    }
}

/// Membership predicate for `indicator` regions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IndicatorPredicate {
    Ball { center: Vec<f64>, radius: f64 },
    /// Intersection of half-spaces `normal . v <= offset`.
    HalfSpaces {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
    },
}

impl IndicatorPredicate {
    fn contains(&self, v: &[f64]) -> bool {
        match self {
            IndicatorPredicate::Ball { center, radius } => {
                let d2: f64 = center.iter().zip(v).map(|(c, x)| (x - c) * (x - c)).sum();
                d2 <= radius * radius
            }
            IndicatorPredicate::HalfSpaces { normals, offsets } => normals
                .iter()
                .zip(offsets)
                .all(|(n, b)| n.iter().zip(v).map(|(a, x)| a * x).sum::<f64>() <= *b),
        }
    }

    /// Fraction of an axis-aligned cell inside the predicate. Half-spaces in
    /// two dimensions are clipped exactly; everything else falls back to the
    /// midpoint test.
    fn cell_coverage(&self, lo: &[f64], hi: &[f64]) -> f64 {
        match self {
            IndicatorPredicate::HalfSpaces { normals, offsets } if lo.len() == 2 => {
                let mut frac = 1.0;
                for (n, b) in normals.iter().zip(offsets) {
                    frac *= rect_halfplane_fraction(lo, hi, n, *b);
                    if frac == 0.0 {
                        return 0.0;
                    }
                }
                frac
            }
            _ => {
                let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
                if self.contains(&mid) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Area fraction of the rectangle `[lo, hi]` on the side `n . v <= b` of a
/// line, by polygon clipping.
fn rect_halfplane_fraction(lo: &[f64], hi: &[f64], n: &[f64], b: f64) -> f64 {
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    if area <= 0.0 {
        return 0.0;
    }
    let corners = [
        [lo[0], lo[1]],
        [hi[0], lo[1]],
        [hi[0], hi[1]],
        [lo[0], hi[1]],
    ];
    let side = |p: &[f64; 2]| n[0] * p[0] + n[1] * p[1] - b;
    let mut poly: Vec<[f64; 2]> = Vec::with_capacity(6);
    for i in 0..4 {
        let (p, q) = (corners[i], corners[(i + 1) % 4]);
        let (sp, sq) = (side(&p), side(&q));
        if sp <= 0.0 {
            poly.push(p);
        }
        if (sp < 0.0 && sq > 0.0) || (sp > 0.0 && sq < 0.0) {
            let t = sp / (sp - sq);
            poly.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    if poly.len() < 3 {
        return 0.0;
    }
    let mut clipped = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        clipped += p[0] * q[1] - q[0] * p[1];
    }
    (0.5 * clipped.abs() / area).clamp(0.0, 1.0)
}

/// The domain region `A`: a compact set with positive finite Lebesgue
/// measure, in one of three parametric forms.
#[derive(Debug, Clone)]
pub enum DomainRegion {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// `{(x1, x2): 0 <= x1 <= horizon, 0 <= x2 <= rate(x1)}` with certified
    /// bounds `0 < rate_min <= rate <= rate_max` on `[0, horizon]`.
    UnderCurve {
        horizon: f64,
        rate: ScalarFn,
        rate_min: f64,
        rate_max: f64,
        measure_hint: Option<f64>,
    },
    Indicator {
        lower: Vec<f64>,
        upper: Vec<f64>,
        predicate: IndicatorPredicate,
        measure_hint: Option<f64>,
    },
}

impl DomainRegion {
    pub fn unit_box(d1: usize) -> Self {
        DomainRegion::Box {
            lower: vec![0.0; d1],
            upper: vec![1.0; d1],
        }
    }

    pub fn d1(&self) -> usize {
        match self {
            DomainRegion::Box { lower, .. } => lower.len(),
            DomainRegion::UnderCurve { .. } => 2,
            DomainRegion::Indicator { lower, .. } => lower.len(),
        }
    }

    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            DomainRegion::Box { lower, upper } => (lower.clone(), upper.clone()),
            DomainRegion::UnderCurve {
                horizon, rate_max, ..
            } => (vec![0.0, 0.0], vec![*horizon, *rate_max]),
            DomainRegion::Indicator { lower, upper, .. } => (lower.clone(), upper.clone()),
        }
    }

    /// Interior grid split points per axis, so that integration cells never
    /// straddle a discontinuity of the region geometry.
    pub fn axis_splits(&self) -> Vec<Vec<f64>> {
        match self {
            DomainRegion::UnderCurve { rate, .. } => vec![rate.breakpoints(0), Vec::new()],
            _ => vec![Vec::new(); self.d1()],
        }
    }

    /// Closed-region membership test; the boundary is included.
    pub fn contains(&self, v: &[f64]) -> Result<bool> {
        if v.len() != self.d1() {
            return Err(Error::DimensionMismatch {
                expected: self.d1(),
                got: v.len(),
            });
        }
        Ok(match self {
            DomainRegion::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .zip(v)
                .all(|((lo, hi), x)| *lo <= *x && *x <= *hi),
            DomainRegion::UnderCurve { horizon, rate, .. } => {
                0.0 <= v[0] && v[0] <= *horizon && 0.0 <= v[1] && v[1] <= rate.eval1(v[0])
            }
            DomainRegion::Indicator {
                lower,
                upper,
                predicate,
                ..
            } => {
                lower
                    .iter()
                    .zip(upper)
                    .zip(v)
                    .all(|((lo, hi), x)| *lo <= *x && *x <= *hi)
                    && predicate.contains(v)
            }
        })
    }

    /// Fraction of an axis-aligned cell covered by the region. Boxes are
    /// aligned with the integration grid, so the answer is 1; under-curve
    /// regions clip the `x2` extent against the rate at the cell's `x1`
    /// midpoint; indicator regions delegate to the predicate.
    pub(crate) fn cell_coverage(&self, lo: &[f64], hi: &[f64]) -> f64 {
        match self {
            DomainRegion::Box { .. } => 1.0,
            DomainRegion::UnderCurve { rate, .. } => {
                let x1 = 0.5 * (lo[0] + hi[0]);
                let h2 = hi[1] - lo[1];
                if h2 <= 0.0 {
                    return 0.0;
                }
                ((rate.eval1(x1) - lo[1]) / h2).clamp(0.0, 1.0)
            }
            DomainRegion::Indicator { predicate, .. } => predicate.cell_coverage(lo, hi),
        }
    }

    /// Lebesgue measure of the region with an error estimate. Boxes are
    /// closed-form; under-curve regions integrate the rate by adaptive
    /// quadrature; indicator regions integrate the membership indicator over
    /// the bounding box on refined grids.
    pub fn measure_with_error(&self) -> Result<(f64, f64)> {
        let computed = match self {
            DomainRegion::Box { lower, upper } => {
                let vol = lower.iter().zip(upper).map(|(a, b)| b - a).product();
                (vol, 0.0)
            }
            DomainRegion::UnderCurve { horizon, rate, .. } => {
                integrate::quadrature_1d(&|t| rate.eval1(t), 0.0, *horizon, &rate.breakpoints(0), 1e-10)?
            }
            DomainRegion::Indicator { .. } => {
                let (lo, hi) = self.bounding_box();
                let opts = IntegrateOptions {
                    tol: 1e-4,
                    ..IntegrateOptions::default()
                };
                let res = integrate::integrate_masked(
                    &integrate::GridDomain {
                        lower: lo,
                        upper: hi,
                        axis_splits: self.axis_splits(),
                    },
                    self,
                    &|_: &[f64], out: &mut DMatrix<f64>| out[(0, 0)] = 1.0,
                    (1, 1),
                    &opts,
                )?;
                (res.value[(0, 0)], res.err_estimate)
            }
        };
        let (value, err) = computed;
        if let Some(hint) = self.measure_hint() {
            if (value - hint).abs() > 1e-6 * hint.abs().max(1.0) {
                return Err(Error::InvalidModel(format!(
                    "measure_hint {hint} disagrees with computed measure {value}"
                )));
            }
            return Ok((hint, err));
        }
        Ok((value, err))
    }

    pub fn measure(&self) -> Result<f64> {
        self.measure_with_error().map(|(v, _)| v)
    }

    fn measure_hint(&self) -> Option<f64> {
        match self {
            DomainRegion::Box { .. } => None,
            DomainRegion::UnderCurve { measure_hint, .. } => *measure_hint,
            DomainRegion::Indicator { measure_hint, .. } => *measure_hint,
        }
    }

    pub fn rate(&self) -> Option<&ScalarFn> {
        match self {
            DomainRegion::UnderCurve { rate, .. } => Some(rate),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DomainRegion::Box { lower, upper } => {
                if lower.is_empty() {
                    return Err(Error::InvalidModel("box region has dimension 0".into()));
                }
                if lower.len() != upper.len() {
                    return Err(Error::InvalidModel("box corner dimensions differ".into()));
                }
                if lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
                    return Err(Error::InvalidModel("box has empty or inverted side".into()));
                }
            }
            DomainRegion::UnderCurve {
                horizon,
                rate,
                rate_min,
                rate_max,
                ..
            } => {
                if !(*horizon > 0.0) {
                    return Err(Error::InvalidModel("horizon must be positive".into()));
                }
                rate.validate(1, "rate")?;
                if !(*rate_min > 0.0) {
                    return Err(Error::InvalidModel("rate_min must be positive".into()));
                }
                let (lo, hi) = rate.range_on(0.0, *horizon);
                if lo < *rate_min - 1e-12 {
                    return Err(Error::InvalidModel(format!(
                        "rate drops to {lo} below certified rate_min {rate_min}"
                    )));
                }
                if hi > *rate_max + 1e-12 {
                    return Err(Error::InvalidModel(format!(
                        "rate reaches {hi} above certified rate_max {rate_max}"
                    )));
                }
            }
            DomainRegion::Indicator { lower, upper, predicate, .. } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(Error::InvalidModel("bad indicator bounding box".into()));
                }
                if lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
                    return Err(Error::InvalidModel("indicator bounding box is empty".into()));
                }
                let d1 = lower.len();
                match predicate {
                    IndicatorPredicate::Ball { center, radius } => {
                        if center.len() != d1 || !(*radius > 0.0) {
                            return Err(Error::InvalidModel("bad ball predicate".into()));
                        }
                    }
                    IndicatorPredicate::HalfSpaces { normals, offsets } => {
                        if normals.len() != offsets.len()
                            || normals.iter().any(|n| n.len() != d1)
                        {
                            return Err(Error::InvalidModel("bad half-space predicate".into()));
                        }
                    }
                }
            }
        }
        let (measure, _) = self.measure_with_error()?;
        if !(measure > 0.0) || !measure.is_finite() {
            return Err(Error::InvalidModel(format!(
                "region measure {measure} is not in (0, inf)"
            )));
        }
        Ok(())
    }
}

/// Mark noise family, always zero-mean with identity covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    Rademacher,
    Uniform,
}

/// Conditional covariance function `sigma^2(v)`, as a PSD base matrix with an
/// optional scalar profile.
#[derive(Debug, Clone)]
pub enum CovFn {
    Constant {
        matrix: DMatrix<f64>,
        factor: DMatrix<f64>,
    },
    Scaled {
        matrix: DMatrix<f64>,
        factor: DMatrix<f64>,
        scale: ScalarFn,
    },
}

impl CovFn {
    pub fn constant(matrix: DMatrix<f64>) -> Result<Self> {
        let factor = factorize(&matrix)?;
        Ok(CovFn::Constant { matrix, factor })
    }

    pub fn scaled(matrix: DMatrix<f64>, scale: ScalarFn) -> Result<Self> {
        let factor = factorize(&matrix)?;
        Ok(CovFn::Scaled {
            matrix,
            factor,
            scale,
        })
    }

    pub fn d2(&self) -> usize {
        match self {
            CovFn::Constant { matrix, .. } | CovFn::Scaled { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn eval(&self, v: &[f64]) -> DMatrix<f64> {
        match self {
            CovFn::Constant { matrix, .. } => matrix.clone(),
            CovFn::Scaled { matrix, scale, .. } => matrix * scale.eval(v),
        }
    }

    /// Entry `(r, c)` of `sigma^2(v)`, allocation-free for integrators.
    pub fn eval_entry(&self, v: &[f64], r: usize, c: usize) -> f64 {
        match self {
            CovFn::Constant { matrix, .. } => matrix[(r, c)],
            CovFn::Scaled { matrix, scale, .. } => matrix[(r, c)] * scale.eval(v),
        }
    }

    /// Square-root factor `sigma(v)` with `sigma sigma^T = sigma^2(v)`.
    pub fn factor_at(&self, v: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            CovFn::Constant { factor, .. } => Ok(factor.clone()),
            CovFn::Scaled { factor, scale, .. } => {
                let s = scale.eval(v);
                if s < -PSD_EIG_TOL {
                    return Err(Error::InvalidModel(format!(
                        "covariance scale is negative ({s}) at {v:?}"
                    )));
                }
                Ok(factor * s.max(0.0).sqrt())
            }
        }
    }

    pub fn breakpoints(&self, axis: usize) -> Vec<f64> {
        match self {
            CovFn::Constant { .. } => Vec::new(),
            CovFn::Scaled { scale, .. } => scale.breakpoints(axis),
        }
    }
}

/// Mark model: dimension, conditional mean, conditional covariance, noise.
#[derive(Debug, Clone)]
pub struct MarkModel {
    pub d2: usize,
    pub mean: Vec<ScalarFn>,
    pub cov: CovFn,
    pub noise: NoiseFamily,
}

impl MarkModel {
    pub fn new(d2: usize, mean: Vec<ScalarFn>, cov: CovFn, noise: NoiseFamily) -> Self {
        Self {
            d2,
            mean,
            cov,
            noise,
        }
    }

    pub fn mean_at(&self, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.d2, self.mean.iter().map(|f| f.eval(v)))
    }

    pub fn mean_is_zero(&self) -> bool {
        self.mean
            .iter()
            .all(|f| matches!(f, ScalarFn::Constant { value } if *value == 0.0))
    }

    fn validate(&self, d1: usize) -> Result<()> {
        if self.d2 == 0 {
            return Err(Error::InvalidModel("mark dimension d2 must be positive".into()));
        }
        if self.mean.len() != self.d2 {
            return Err(Error::InvalidModel(format!(
                "mean has {} components, d2 is {}",
                self.mean.len(),
                self.d2
            )));
        }
        for f in &self.mean {
            f.validate(d1, "mean")?;
        }
        if self.cov.d2() != self.d2 {
            return Err(Error::InvalidModel(format!(
                "covariance is {}x{}, d2 is {}",
                self.cov.d2(),
                self.cov.d2(),
                self.d2
            )));
        }
        if let CovFn::Scaled { scale, .. } = &self.cov {
            scale.validate(d1, "covariance scale")?;
        }
        Ok(())
    }
}

/// Full experiment definition: region, marks and field intensity.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub domain: DomainRegion,
    pub marks: MarkModel,
    pub nu: f64,
}

impl ModelSpec {
    pub fn new(domain: DomainRegion, marks: MarkModel, nu: f64) -> Result<Self> {
        let spec = Self { domain, marks, nu };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::InvalidModel(format!(
                "field intensity nu must be positive, got {}",
                self.nu
            )));
        }
        self.domain.validate()?;
        self.marks.validate(self.domain.d1())
    }
}

impl integrate::Mask for DomainRegion {
    fn cell_coverage(&self, lo: &[f64], hi: &[f64]) -> f64 {
        DomainRegion::cell_coverage(self, lo, hi)
    }
    fn point_weight(&self, v: &[f64], _aux: f64) -> f64 {
        if self.contains(v).unwrap_or(false) {
            1.0
        } else {
            0.0
        }
    }
}

/// Conditional moments `(m(v), sigma^2(v))` at a point of `A`. The returned
/// covariance is checked for symmetry (1e-12) and positive semidefiniteness
/// (smallest eigenvalue above -1e-10).
pub fn cond_moments(marks: &MarkModel, v: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mean = marks.mean_at(v);
    let cov = marks.cov.eval(v);
    let scale = 1.0 + cov.amax();
    for r in 0..cov.nrows() {
        for c in (r + 1)..cov.ncols() {
            if (cov[(r, c)] - cov[(c, r)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidModel(format!(
                    "covariance not symmetric at {v:?}"
                )));
            }
        }
    }
    let min_eig = smallest_eigenvalue(&cov);
    if min_eig < -PSD_EIG_TOL * scale {
        return Err(Error::Indefinite { eigenvalue: min_eig });
    }
    Ok((mean, cov))
}

pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Square-root factor of a symmetric PSD matrix: returns `L` with
/// `L L^T = cov`. Full-rank inputs give a lower-triangular factor; singular
/// inputs go through diagonal pivoting and come back with zero columns.
/// Inputs with an eigenvalue below the indefiniteness tolerance are rejected.
pub fn factorize(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cov.ncols(),
        });
    }
    let scale = 1.0 + cov.amax();
    let min_eig = smallest_eigenvalue(cov);
    if min_eig < -PSD_EIG_TOL * scale {
        return Err(Error::Indefinite { eigenvalue: min_eig });
    }

    // Diagonally pivoted Cholesky; columns whose pivot falls below the drop
    // tolerance are zeroed out.
    let a = (cov + cov.transpose()) * 0.5;
    let drop_tol = (n as f64) * f64::EPSILON * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut perm: Vec<usize> = (0..n).collect();

    for j in 0..n {
        // Choose the largest remaining diagonal as pivot.
        let (pivot_rel, pivot_val) = (j..n)
            .map(|k| {
                let pk = perm[k];
                (k, a[(pk, pk)] - (0..j).map(|q| l[(pk, q)].powi(2)).sum::<f64>())
            })
            .fold((j, f64::NEG_INFINITY), |best, cand| {
                if cand.1 > best.1 {
                    cand
                } else {
                    best
                }
            });
        if pivot_val <= drop_tol {
            break; // remaining columns are numerically zero
        }
        perm.swap(j, pivot_rel);
        let pj = perm[j];
        let diag = pivot_val.sqrt();
        l[(pj, j)] = diag;
        for k in (j + 1)..n {
            let pk = perm[k];
            let s: f64 = (0..j).map(|q| l[(pk, q)] * l[(pj, q)]).sum();
            l[(pk, j)] = (a[(pk, pj)] - s) / diag;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn affine_rate(intercept: f64, slope: f64) -> ScalarFn {
        ScalarFn::Affine {
            intercept,
            slope: vec![slope],
        }
    }

    #[test]
    fn measure_unit_box_is_one() {
        let d = DomainRegion::unit_box(2);
        assert_eq!(d.measure().unwrap(), 1.0);
    }

    #[test]
    fn measure_box_is_exact_side_product() {
        let d = DomainRegion::Box {
            lower: vec![-1.0, 0.5, 2.0],
            upper: vec![2.0, 1.0, 5.0],
        };
        assert_eq!(d.measure().unwrap(), 3.0 * 0.5 * 3.0);
    }

    #[test]
    fn measure_under_affine_rate() {
        let d = DomainRegion::UnderCurve {
            horizon: 1.0,
            rate: affine_rate(1.0, 1.0),
            rate_min: 1.0,
            rate_max: 2.0,
            measure_hint: None,
        };
        let (m, err) = d.measure_with_error().unwrap();
        assert_relative_eq!(m, 1.5, epsilon = 1e-9);
        assert!(err <= 1e-9);
    }

    #[test]
    fn measure_unit_disk_matches_pi() {
        let d = DomainRegion::Indicator {
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
            predicate: IndicatorPredicate::Ball {
                center: vec![0.0, 0.0],
                radius: 1.0,
            },
            measure_hint: None,
        };
        let (m, err) = d.measure_with_error().unwrap();
        assert!(err <= 1e-4, "error estimate {err}");
        assert!((m - std::f64::consts::PI).abs() < 2e-4, "disk measure {m}");
    }

    #[test]
    fn measure_hint_agreeing_is_used_exactly() {
        let d = DomainRegion::UnderCurve {
            horizon: 1.0,
            rate: affine_rate(1.0, 1.0),
            rate_min: 1.0,
            rate_max: 2.0,
            measure_hint: Some(1.5),
        };
        assert_eq!(d.measure().unwrap(), 1.5);
    }

    #[test]
    fn measure_hint_disagreeing_is_rejected() {
        let d = DomainRegion::UnderCurve {
            horizon: 1.0,
            rate: affine_rate(1.0, 1.0),
            rate_min: 1.0,
            rate_max: 2.0,
            measure_hint: Some(1.4),
        };
        assert!(d.measure().is_err());
    }

    #[test]
    fn contains_box_interior_point() {
        let d = DomainRegion::unit_box(2);
        assert!(d.contains(&[0.5, 0.5]).unwrap());
        assert!(!d.contains(&[0.5, 1.5]).unwrap());
    }

    #[test]
    fn contains_under_curve_boundary_is_closed() {
        let d = DomainRegion::UnderCurve {
            horizon: 1.0,
            rate: affine_rate(1.0, 1.0),
            rate_min: 1.0,
            rate_max: 2.0,
            measure_hint: None,
        };
        assert!(!d.contains(&[0.5, 1.6]).unwrap());
        assert!(d.contains(&[0.5, 1.5]).unwrap());
    }

    #[test]
    fn contains_checks_dimension() {
        let d = DomainRegion::unit_box(2);
        assert!(matches!(
            d.contains(&[0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cond_moments_identity_mean() {
        let marks = MarkModel::new(
            1,
            vec![ScalarFn::Affine {
                intercept: 0.0,
                slope: vec![1.0],
            }],
            CovFn::constant(DMatrix::identity(1, 1)).unwrap(),
            NoiseFamily::Gaussian,
        );
        let (mean, _) = cond_moments(&marks, &[0.3]).unwrap();
        assert_eq!(mean[0], 0.3);
    }

    #[test]
    fn cond_moments_zero_mean_and_constant_cov() {
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let marks = MarkModel::new(
            2,
            vec![ScalarFn::zero(), ScalarFn::zero()],
            CovFn::constant(cov.clone()).unwrap(),
            NoiseFamily::Gaussian,
        );
        let (mean, got) = cond_moments(&marks, &[0.7]).unwrap();
        assert_eq!(mean, DVector::zeros(2));
        assert_eq!(got, cov);
    }

    #[test]
    fn factorize_identity_is_identity() {
        let l = factorize(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(l, DMatrix::identity(3, 3));
    }

    #[test]
    fn factorize_known_two_by_two() {
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = factorize(&cov).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0_f64.sqrt()]);
        assert_relative_eq!(l, expected, epsilon = 1e-12);
        assert_relative_eq!(&l * l.transpose(), cov, epsilon = 1e-12);
    }

    #[test]
    fn factorize_rejects_indefinite() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(factorize(&cov), Err(Error::Indefinite { .. })));
    }

    #[test]
    fn factorize_zero_matrix() {
        let l = factorize(&DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(l, DMatrix::zeros(2, 2));
    }

    #[test]
    fn rate_below_certified_max_is_required() {
        let d = DomainRegion::UnderCurve {
            horizon: 1.0,
            rate: affine_rate(1.0, 1.0),
            rate_min: 1.0,
            rate_max: 1.5,
            measure_hint: None,
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn piecewise_eval_and_range() {
        let f = ScalarFn::PiecewiseConstant {
            axis: 0,
            breaks: vec![0.5],
            values: vec![2.0, 1.0],
        };
        assert_eq!(f.eval1(0.2), 2.0);
        assert_eq!(f.eval1(0.5), 1.0);
        assert_eq!(f.eval1(0.9), 1.0);
        assert_eq!(f.range_on(0.0, 1.0), (1.0, 2.0));
        assert_eq!(f.range_on(0.0, 0.4), (2.0, 2.0));
    }

    proptest! {
        #[test]
        fn factor_reproduces_random_psd(entries in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let g = DMatrix::from_row_slice(3, 3, &entries);
            let cov = g.transpose() * &g;
            let l = factorize(&cov).unwrap();
            let resid = (&l * l.transpose() - &cov).amax();
            prop_assert!(resid <= 1e-10 * (1.0 + cov.amax()));
        }

        #[test]
        fn factor_reproduces_rank_deficient_psd(entries in proptest::collection::vec(-2.0f64..2.0, 6)) {
            // G is 2x3, so G^T G is a singular 3x3 PSD matrix.
            let g = DMatrix::from_row_slice(2, 3, &entries);
            let cov = g.transpose() * &g;
            let l = factorize(&cov).unwrap();
            let resid = (&l * l.transpose() - &cov).amax();
            prop_assert!(resid <= 1e-10 * (1.0 + cov.amax()));
        }

        #[test]
        fn contained_points_have_valid_moments(x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let d = DomainRegion::Indicator {
                lower: vec![-1.0, -1.0],
                upper: vec![1.0, 1.0],
                predicate: IndicatorPredicate::Ball { center: vec![0.0, 0.0], radius: 1.0 },
                measure_hint: None,
            };
            let marks = MarkModel::new(
                2,
                vec![ScalarFn::zero(), ScalarFn::Affine { intercept: 0.0, slope: vec![1.0, 0.0] }],
                CovFn::scaled(
                    DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]),
                    ScalarFn::Affine { intercept: 1.5, slope: vec![0.5, 0.0] },
                ).unwrap(),
                NoiseFamily::Gaussian,
            );
            if d.contains(&[x, y]).unwrap() {
                let (_, cov) = cond_moments(&marks, &[x, y]).unwrap();
                prop_assert!(smallest_eigenvalue(&cov) >= -1e-10);
            }
        }
    }
}
