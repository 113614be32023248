//! Empirical measures on `R^n x S` and the statistics computed on them:
//! exact Wasserstein distances under the hybrid metric, two-sample
//! Kolmogorov-Smirnov tests, density tables, moments and decay fits.

pub mod assignment;
pub mod density;
pub mod ks;
pub mod network_simplex;
pub mod stats;

use rand::seq::index;
use serde::Serialize;
use thiserror::Error;

use crate::parallel::par_map;
use crate::rng::{SeedRecord, Stream};
use crate::simulator::SnapshotEnsemble;

pub use density::{empirical_density, DensityMethod, DensityTable};
pub use ks::{ks_two_sample, KsResult};
pub use stats::{decay_slope, linear_fit, moment, DecayFit, MomentEstimate};

/// Default atom cap for equal-size uniform measures.
pub const ASSIGNMENT_CAP: usize = 4096;
/// Default atom cap for general weights.
pub const NETWORK_CAP: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("p must lie in (0, 1), got {0}")]
    InvalidP(f64),
    #[error("sample is empty")]
    EmptySample,
    #[error("weights must be positive and sum to 1, got sum {0}")]
    InvalidWeights(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("{atoms} atoms exceed the cap of {cap}; subsample the measures first")]
    SizeCapExceeded { atoms: usize, cap: usize },
    #[error("value {value} at index {index} is not positive")]
    NonPositiveValues { index: usize, value: f64 },
    #[error("need at least 3 points after burn-in, got {0}")]
    TooFewPoints(usize),
    #[error("transport solver failed: {0}")]
    Solver(#[from] network_simplex::SimplexError),
}

/// Weighted atoms `(x, regime, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    regimes: Vec<usize>,
    weights: Vec<f64>,
    uniform: bool,
}

impl EmpiricalMeasure {
    /// Equal weights on the given atoms; `points` is row-major `len x dim`.
    pub fn uniform(dim: usize, points: Vec<f64>, regimes: Vec<usize>) -> Result<Self, MeasureError> {
        if regimes.is_empty() {
            return Err(MeasureError::EmptySample);
        }
        if dim == 0 || points.len() != dim * regimes.len() {
            return Err(MeasureError::DimensionMismatch(points.len(), dim * regimes.len()));
        }
        let w = 1.0 / regimes.len() as f64;
        Ok(Self { dim, weights: vec![w; regimes.len()], points, regimes, uniform: true })
    }

    pub fn weighted(dim: usize, points: Vec<f64>, regimes: Vec<usize>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        let mut out = Self::uniform(dim, points, regimes)?;
        if weights.len() != out.len() {
            return Err(MeasureError::DimensionMismatch(weights.len(), out.len()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) || (total - 1.0).abs() > 1e-12 {
            return Err(MeasureError::InvalidWeights(total));
        }
        let n = out.len() as f64;
        out.uniform = weights.iter().all(|&w| (w * n - 1.0).abs() <= 1e-12);
        out.weights = weights;
        Ok(out)
    }

    pub fn from_snapshot(snap: &SnapshotEnsemble) -> Result<Self, MeasureError> {
        Self::uniform(snap.dim, snap.states.clone(), snap.regimes.clone())
    }

    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn regime(&self, k: usize) -> usize {
        self.regimes[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// A uniform measure on `size` atoms drawn without replacement; the whole
    /// measure is returned when `size >= len`.
    pub fn subsample(&self, size: usize, seed: SeedRecord) -> Self {
        if size >= self.len() {
            return self.clone();
        }
        let mut rng = seed.rng(Stream::Subsample);
        let picks = index::sample(&mut rng, self.len(), size);
        let mut points = Vec::with_capacity(size * self.dim);
        let mut regimes = Vec::with_capacity(size);
        for k in picks.iter() {
            points.extend_from_slice(self.point(k));
            regimes.push(self.regimes[k]);
        }
        Self::uniform(self.dim, points, regimes).expect("nonempty subsample")
    }

    /// Splits the atoms into the first and second half as uniform measures.
    pub fn halves(&self) -> Result<(Self, Self), MeasureError> {
        let mid = self.len() / 2;
        let first = Self::uniform(self.dim, self.points[..mid * self.dim].to_vec(), self.regimes[..mid].to_vec())?;
        let second = Self::uniform(self.dim, self.points[mid * self.dim..].to_vec(), self.regimes[mid..].to_vec())?;
        Ok((first, second))
    }
}

fn check_p(p: f64) -> Result<(), MeasureError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(MeasureError::InvalidP(p))
    }
}

#[inline]
fn dp_unchecked(x: &[f64], i: usize, y: &[f64], j: usize, p: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let radial = if p == 0.5 { sq.sqrt().sqrt() } else { sq.powf(0.5 * p) };
    radial + if i == j { 0.0 } else { 1.0 }
}

/// `d_p((x, i), (y, j)) = |x - y|^p + 1{i != j}`.
pub fn dp_distance(a: (&[f64], usize), b: (&[f64], usize), p: f64) -> Result<f64, MeasureError> {
    check_p(p)?;
    if a.0.len() != b.0.len() {
        return Err(MeasureError::DimensionMismatch(a.0.len(), b.0.len()));
    }
    Ok(dp_unchecked(a.0, a.1, b.0, b.1, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OtMethod {
    Assignment,
    NetworkSimplex,
}

/// Optimal transport between two empirical measures.
#[derive(Debug, Clone, PartialEq)]
pub struct OtResult {
    pub cost: f64,
    /// `(atom of u, atom of v, mass)` with positive mass.
    pub plan: Vec<(usize, usize, f64)>,
    pub method: OtMethod,
    /// Potentials `alpha[i] + beta[j] <= d_p(u_i, v_j)` whose weighted sum
    /// equals the cost.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Atom caps for the two exact solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OtLimits {
    pub assignment: usize,
    pub network: usize,
}

impl Default for OtLimits {
    fn default() -> Self {
        Self { assignment: ASSIGNMENT_CAP, network: NETWORK_CAP }
    }
}

/// Exact `W_p(u, v)` with the default atom caps.
pub fn wasserstein_p(u: &EmpiricalMeasure, v: &EmpiricalMeasure, p: f64) -> Result<OtResult, MeasureError> {
    wasserstein_p_with(u, v, p, OtLimits::default())
}

/// Exact `W_p(u, v)`. Equal-size uniform measures are solved as an
/// assignment problem, anything else by network simplex.
pub fn wasserstein_p_with(u: &EmpiricalMeasure, v: &EmpiricalMeasure, p: f64, limits: OtLimits) -> Result<OtResult, MeasureError> {
    check_p(p)?;
    if u.dim != v.dim {
        return Err(MeasureError::DimensionMismatch(u.dim, v.dim));
    }
    let (n, m) = (u.len(), v.len());
    let assignment = n == m && u.uniform && v.uniform;
    let cap = if assignment { limits.assignment } else { limits.network };
    if n.max(m) > cap {
        return Err(MeasureError::SizeCapExceeded { atoms: n.max(m), cap });
    }
    let mut cost = Vec::with_capacity(n * m);
    for a in 0..n {
        let (x, i) = (u.point(a), u.regimes[a]);
        cost.extend((0..m).map(|b| dp_unchecked(x, i, v.point(b), v.regimes[b], p)));
    }
    if assignment {
        let sol = assignment::solve(&cost, n);
        let w = 1.0 / n as f64;
        Ok(OtResult {
            cost: sol.total_cost * w,
            plan: sol.col_of_row.iter().enumerate().map(|(a, &b)| (a, b, w)).collect(),
            method: OtMethod::Assignment,
            alpha: sol.row_potential,
            beta: sol.col_potential,
        })
    } else {
        let sol = network_simplex::solve(&u.weights, &v.weights, &cost)?;
        Ok(OtResult { cost: sol.total_cost, plan: sol.flows, method: OtMethod::NetworkSimplex, alpha: sol.alpha, beta: sol.beta })
    }
}

/// Mean and spread of `W_p` over seeded subsample pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
    pub subsample: usize,
}

/// `W_p` between uniform subsamples of `u` and `v`, repeated `resamples`
/// times. Resample `r` draws both subsamples with key `(seed, r)`, so equal
/// inputs give zero and path-aligned ensembles keep their alignment.
pub fn bootstrap_wasserstein(
    u: &EmpiricalMeasure,
    v: &EmpiricalMeasure,
    p: f64,
    subsample: usize,
    resamples: usize,
    seed: u64,
    workers: usize,
) -> Result<BootstrapSummary, MeasureError> {
    check_p(p)?;
    if resamples == 0 || subsample == 0 {
        return Err(MeasureError::EmptySample);
    }
    let values = par_map(0..resamples, workers, |r| {
        let key = SeedRecord::new(seed, r as u64);
        let (a, b) = (u.subsample(subsample, key), v.subsample(subsample, key));
        wasserstein_p(&a, &b, p).map(|ot| ot.cost)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let sd = if values.len() > 1 { (values.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() } else { 0.0 };
    Ok(BootstrapSummary { mean, sd, values, subsample: subsample.min(u.len()).min(v.len()) })
}
