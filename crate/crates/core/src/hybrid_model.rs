//! Regime-switching SDE models and sampled checks of their structural
//! constants.
//!
//! A model supplies the drift `f(x, i)` and diffusion `g(x, i)` for every
//! regime `i`. Polynomial models cover the superlinear growth class the
//! solver is built for; the two-regime cubic model is available by name.
//!
//! Every check in this module is sampled falsification over a bounded box. A
//! pass means no counterexample was found among the sampled points, not that
//! the inequality holds globally.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markov_chain::StationaryDistribution;
use crate::rng::{SeedRecord, Stream};

/// Slack allowed on sampled inequality checks, scaled by `1 + |x - y|^2`.
pub const INEQUALITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sampling box [{lo}, {hi}] is degenerate")]
    DegenerateBox { lo: f64, hi: f64 },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("unknown built-in model `{0}`")]
    UnknownBuiltin(String),
}

/// Drift and diffusion of an SDE with Markovian switching.
///
/// Implementations must be pure: the simulator calls them from many threads.
pub trait HybridModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn regime_count(&self) -> usize;

    /// Writes `f(x, regime)` into `out` (length `state_dim`).
    fn drift(&self, x: &[f64], regime: usize, out: &mut [f64]);

    /// Writes `g(x, regime)` row-major into `out` (length `state_dim * noise_dim`).
    fn diffusion(&self, x: &[f64], regime: usize, out: &mut [f64]);

    /// Writes the drift Jacobian row-major into `out` and returns `true`, or
    /// returns `false` when no analytic Jacobian is available.
    fn drift_jacobian(&self, _x: &[f64], _regime: usize, _out: &mut [f64]) -> bool {
        false
    }

    fn declared_constants(&self) -> Option<&ConstantsDecl> {
        None
    }
}

/// A monomial `coef * prod x_k^{exps[k]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub exps: Vec<u32>,
}

/// A multivariate polynomial as a sum of monomials.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Polynomial {
    pub terms: Vec<Monomial>,
}

impl Polynomial {
    pub fn new(terms: Vec<Monomial>) -> Self {
        Self { terms }
    }

    /// Univariate polynomial from `(coef, exponent)` pairs.
    pub fn univariate(terms: &[(f64, u32)]) -> Self {
        Self::new(terms.iter().map(|&(coef, e)| Monomial { coef, exps: vec![e] }).collect())
    }

    pub fn zero() -> Self {
        Self::default()
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.exps.iter().zip(x).fold(t.coef, |acc, (&e, &xi)| if e == 0 { acc } else { acc * xi.powi(e as i32) }))
            .sum()
    }

    /// Partial derivative with respect to variable `var`, evaluated at `x`.
    #[inline]
    pub fn partial(&self, x: &[f64], var: usize) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.exps[var] > 0)
            .map(|t| {
                t.exps.iter().zip(x).enumerate().fold(t.coef, |acc, (k, (&e, &xi))| {
                    if k == var {
                        acc * e as f64 * xi.powi(e as i32 - 1)
                    } else if e == 0 {
                        acc
                    } else {
                        acc * xi.powi(e as i32)
                    }
                })
            })
            .sum()
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().filter(|t| t.coef != 0.0).map(|t| t.exps.iter().sum()).max().unwrap_or(0)
    }
}

/// Drift and diffusion polynomials of one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePolynomials {
    /// One polynomial per state component.
    pub drift: Vec<Polynomial>,
    /// Row-major `state_dim x noise_dim` polynomials.
    pub diffusion: Vec<Polynomial>,
}

/// Constants a user declares for a model. Derived quantities live in
/// [`ModelConstants`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsDecl {
    /// Polynomial growth exponent.
    pub q: f64,
    /// Weight on the diffusion difference in the monotonicity condition.
    pub l1: f64,
    /// Per-regime one-sided Lipschitz constants.
    pub n: Vec<f64>,
    /// Per-regime polynomial Lipschitz constants, if known.
    #[serde(default)]
    pub a: Option<Vec<f64>>,
    /// Constant of the one-point dissipativity bound; derived when absent.
    #[serde(default)]
    pub m: Option<f64>,
}

/// Fully resolved constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConstants {
    pub q: f64,
    pub a: Option<Vec<f64>>,
    /// `4 a_i + 2 (|f(0,i)|^2 v |g(0,i)|^2)`, when `a` is known.
    pub b: Option<Vec<f64>>,
    pub l1: f64,
    pub l2: f64,
    pub n: Vec<f64>,
    pub n_max: f64,
    pub m: f64,
}

impl ModelConstants {
    /// Validates a declaration against `model` and derives `l2`, `n_max`, `b`
    /// and (when not declared) `m`.
    pub fn resolve(model: &dyn HybridModel, decl: &ConstantsDecl) -> Result<Self, ModelError> {
        let regimes = model.regime_count();
        if !(decl.q >= 2.0) {
            return Err(ModelError::InvalidConstants(format!("q must be >= 2, got {}", decl.q)));
        }
        if !(decl.l1 > 4.0) {
            return Err(ModelError::InvalidConstants(format!("l1 must be > 4, got {}", decl.l1)));
        }
        if decl.n.len() != regimes || decl.n.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidConstants(format!("n must list {regimes} finite values, got {:?}", decl.n)));
        }
        if let Some(a) = &decl.a {
            if a.len() != regimes || a.iter().any(|v| !(*v > 0.0)) {
                return Err(ModelError::InvalidConstants(format!("a must list {regimes} positive values, got {a:?}")));
            }
        }
        let l2 = decl.l1 - 2.0;
        let origin = OriginValues::of(model);
        let b = decl.a.as_ref().map(|a| origin.growth_constants(a));
        let m = decl.m.unwrap_or_else(|| origin.dissipativity_constant(decl.l1, l2));
        Ok(Self {
            q: decl.q,
            a: decl.a.clone(),
            b,
            l1: decl.l1,
            l2,
            n_max: decl.n.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())),
            n: decl.n.clone(),
            m,
        })
    }
}

// |f(0,i)|^2 and |g(0,i)|^2 per regime.
struct OriginValues {
    drift_sq: Vec<f64>,
    diffusion_sq: Vec<f64>,
}

impl OriginValues {
    fn of(model: &dyn HybridModel) -> Self {
        let n = model.state_dim();
        let zero = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut g = vec![0.0; n * model.noise_dim()];
        let (mut drift_sq, mut diffusion_sq) = (Vec::new(), Vec::new());
        for i in 0..model.regime_count() {
            model.drift(&zero, i, &mut f);
            model.diffusion(&zero, i, &mut g);
            drift_sq.push(norm_sq(&f));
            diffusion_sq.push(norm_sq(&g));
        }
        Self { drift_sq, diffusion_sq }
    }

    fn growth_constants(&self, a: &[f64]) -> Vec<f64> {
        a.iter().enumerate().map(|(i, ai)| 4.0 * ai + 2.0 * self.drift_sq[i].max(self.diffusion_sq[i])).collect()
    }

    fn dissipativity_constant(&self, l1: f64, l2: f64) -> f64 {
        (0..self.drift_sq.len()).map(|i| self.drift_sq[i] + 0.5 * l1 * l2 * self.diffusion_sq[i]).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Upper end of the admissible step interval `(0, 1/(n_max + 2))`.
pub fn max_step_size(constants: &ModelConstants) -> f64 {
    1.0 / (constants.n_max + 2.0)
}

/// The stationary-weighted conditions on the monotonicity constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingCondition {
    pub s1: f64,
    pub s2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub n_max: f64,
    pub max_step: f64,
    pub passes: bool,
}

/// Evaluates `S1 = sum mu_j (n_j+1)/(1-(n_j+1)/(n_M+2))` and
/// `S2 = sum mu_j n_j/(1-n_j/(n_M+2))`; the condition holds when both are
/// negative, with `lambda1 = -S1`, `lambda2 = -S2`.
pub fn check_assumption3(n: &[f64], mu: &StationaryDistribution) -> SwitchingCondition {
    let n_max = n.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()));
    let denom = n_max + 2.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for (nj, mj) in n.iter().zip(&mu.probs) {
        s1 += mj * (nj + 1.0) / (1.0 - (nj + 1.0) / denom);
        s2 += mj * nj / (1.0 - nj / denom);
    }
    let lambda1 = -s1;
    let lambda2 = -s2;
    SwitchingCondition { s1, s2, lambda1, lambda2, n_max, max_step: 1.0 / denom, passes: lambda1 > 0.0 && lambda2 > 0.0 }
}

/// An axis-aligned cube `[lo, hi]^n` that sample points are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingBox {
    pub lo: f64,
    pub hi: f64,
}

impl SamplingBox {
    pub fn new(lo: f64, hi: f64) -> Result<Self, ModelError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(ModelError::DegenerateBox { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    fn validate(&self) -> Result<(), ModelError> {
        Self::new(self.lo, self.hi).map(|_| ())
    }

    fn scaled(&self, factor: f64) -> Self {
        let mid = 0.5 * (self.lo + self.hi);
        let half = 0.5 * (self.hi - self.lo) * factor;
        Self { lo: mid - half, hi: mid + half }
    }

    fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Sampled pairs mixing four designs: independent uniform pairs, nearly
/// coincident pairs, pairs against the origin, and pairs clustered near the
/// origin. The near-diagonal and near-origin designs are where polynomial
/// quotients usually attain their suprema.
fn sample_pairs(dim: usize, bx: SamplingBox, samples: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = SeedRecord::new(seed, 0).rng(Stream::Sampling);
    let width = bx.width();
    let origin = (bx.lo..=bx.hi).contains(&0.0);
    let uniform = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.random_range(bx.lo..bx.hi)).collect() };
    (0..samples)
        .map(|s| {
            let x = uniform(&mut rng);
            let y = match s % 4 {
                0 => uniform(&mut rng),
                1 => x.iter().map(|xi| xi + 1e-3 * width * rng.random_range(-1.0..1.0)).collect(),
                2 if origin => vec![0.0; dim],
                _ => {
                    let x_small: Vec<f64> = x.iter().map(|xi| 1e-2 * xi).collect();
                    let y: Vec<f64> = x_small.iter().map(|xi| xi + 1e-3 * rng.random_range(-1.0..1.0)).collect();
                    return (x_small, y);
                }
            };
            (x, y)
        })
        .filter(|(x, y)| x != y)
        .collect()
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn diff_norm_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot_diff(x: &[f64], y: &[f64], fx: &[f64], fy: &[f64]) -> f64 {
    (0..x.len()).map(|k| (x[k] - y[k]) * (fx[k] - fy[k])).sum()
}

// Evaluates f and g at x for a regime into freshly sized buffers.
struct Eval {
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Eval {
    fn at(model: &dyn HybridModel, x: &[f64], regime: usize) -> Self {
        let mut f = vec![0.0; model.state_dim()];
        let mut g = vec![0.0; model.state_dim() * model.noise_dim()];
        model.drift(x, regime, &mut f);
        model.diffusion(x, regime, &mut g);
        Self { f, g }
    }
}

fn monotonicity_quotient(model: &dyn HybridModel, l1: f64, x: &[f64], y: &[f64], regime: usize) -> f64 {
    let ex = Eval::at(model, x, regime);
    let ey = Eval::at(model, y, regime);
    let lhs = 2.0 * dot_diff(x, y, &ex.f, &ey.f) + l1 * diff_norm_sq(&ex.g, &ey.g);
    lhs / diff_norm_sq(x, y)
}

/// Largest sampled value of
/// `[2<x-y, f(x,i)-f(y,i)> + l1 |g(x,i)-g(y,i)|^2] / |x-y|^2` per regime: a
/// lower bound on any valid monotonicity constant `n_i`.
pub fn estimate_monotonicity(model: &dyn HybridModel, l1: f64, bx: SamplingBox, samples: usize, seed: u64) -> Result<Vec<f64>, ModelError> {
    bx.validate()?;
    if samples < 2 {
        return Err(ModelError::TooFewSamples(samples));
    }
    let pairs = sample_pairs(model.state_dim(), bx, samples, seed);
    Ok((0..model.regime_count())
        .map(|i| pairs.iter().map(|(x, y)| monotonicity_quotient(model, l1, x, y, i)).fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Smallest admissible growth exponent and per-regime constants of the
/// polynomial Lipschitz bound
/// `|f(x)-f(y)|^2 v |g(x)-g(y)|^2 <= a (1 + |x|^{q-2} + |y|^{q-2}) |x-y|^2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub q: f64,
    /// Sampled supremum of the quotient at `q` on the requested box.
    pub a: Vec<f64>,
    /// `4 a_i + 2 (|f(0,i)|^2 v |g(0,i)|^2)`.
    pub b: Vec<f64>,
}

const MAX_CANDIDATE_Q: u32 = 16;
// An exponent is admissible when the sampled constant grows no faster than
// |x|^{1/2} as the box doubles; one power short of the true exponent doubles
// it at least.
const ADMISSIBLE_GROWTH: f64 = std::f64::consts::SQRT_2;

fn lipschitz_quotient(model: &dyn HybridModel, q: f64, x: &[f64], y: &[f64], regime: usize) -> f64 {
    let ex = Eval::at(model, x, regime);
    let ey = Eval::at(model, y, regime);
    let num = diff_norm_sq(&ex.f, &ey.f).max(diff_norm_sq(&ex.g, &ey.g));
    let weight = 1.0 + norm_sq(x).sqrt().powf(q - 2.0) + norm_sq(y).sqrt().powf(q - 2.0);
    num / (weight * diff_norm_sq(x, y))
}

fn sup_quotient(model: &dyn HybridModel, q: f64, pairs: &[(Vec<f64>, Vec<f64>)], regime: usize) -> f64 {
    pairs.iter().map(|(x, y)| lipschitz_quotient(model, q, x, y, regime)).fold(0.0, f64::max)
}

/// Scans integer exponents `q = 2, 3, ...` and returns the first one whose
/// sampled constants stay bounded when the box is doubled. The reported `a_i`
/// satisfy the inequality on every sampled pair of the original box.
pub fn estimate_polynomial_lipschitz(
    model: &dyn HybridModel,
    bx: SamplingBox,
    samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate, ModelError> {
    bx.validate()?;
    if samples < 2 {
        return Err(ModelError::TooFewSamples(samples));
    }
    let dim = model.state_dim();
    let pairs = sample_pairs(dim, bx, samples, seed);
    let wide_pairs = sample_pairs(dim, bx.scaled(2.0), samples, seed);
    let regimes = model.regime_count();
    let admissible = |q: f64| {
        (0..regimes).all(|i| {
            let base = sup_quotient(model, q, &pairs, i);
            let wide = sup_quotient(model, q, &wide_pairs, i);
            wide <= ADMISSIBLE_GROWTH * base.max(f64::MIN_POSITIVE)
        })
    };
    let q = (2..=MAX_CANDIDATE_Q).map(f64::from).find(|&q| admissible(q)).unwrap_or(f64::from(MAX_CANDIDATE_Q));
    let a: Vec<f64> = (0..regimes).map(|i| sup_quotient(model, q, &pairs, i).max(f64::MIN_POSITIVE)).collect();
    let b = OriginValues::of(model).growth_constants(&a);
    Ok(LipschitzEstimate { q, a, b })
}

/// Which sampled inequality a counterexample broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InequalityKind {
    /// Two-point polynomial Lipschitz bound with declared `a_i`, `q`.
    PolynomialLipschitz,
    /// One-point growth bound with `b_i` derived from `a_i`.
    Growth,
    /// Two-point monotonicity bound with declared `n_i`, `l1`.
    Monotonicity,
    /// One-point dissipativity bound with `m`, `l2`, `n_i`.
    Dissipativity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: InequalityKind,
    /// 1-based regime label.
    pub regime: usize,
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub lhs: f64,
    pub rhs: f64,
}

/// Searches sampled points for counterexamples to the declared constants.
///
/// `a_override` supplies Lipschitz constants when none are declared (the
/// estimated ones, typically), so the growth bound can still be exercised.
pub fn falsify_constants(
    model: &dyn HybridModel,
    constants: &ModelConstants,
    a_override: Option<&[f64]>,
    bx: SamplingBox,
    samples: usize,
    seed: u64,
) -> Result<Vec<Violation>, ModelError> {
    bx.validate()?;
    if samples < 2 {
        return Err(ModelError::TooFewSamples(samples));
    }
    let pairs = sample_pairs(model.state_dim(), bx, samples, seed);
    let a = constants.a.as_deref().or(a_override);
    let b = a.map(|a| OriginValues::of(model).growth_constants(a));
    let mut found = Vec::new();
    for i in 0..model.regime_count() {
        let n_i = constants.n[i];
        for (x, y) in &pairs {
            let ex = Eval::at(model, x, i);
            let ey = Eval::at(model, y, i);
            let d2 = diff_norm_sq(x, y);
            let slack = INEQUALITY_TOL * (1.0 + d2);
            let lhs = 2.0 * dot_diff(x, y, &ex.f, &ey.f) + constants.l1 * diff_norm_sq(&ex.g, &ey.g);
            let rhs = n_i * d2;
            if lhs > rhs + slack {
                found.push(Violation { kind: InequalityKind::Monotonicity, regime: i + 1, x: x.clone(), y: Some(y.clone()), lhs, rhs });
            }
            if let Some(a) = a.filter(|_| constants.a.is_some()) {
                let lhs = diff_norm_sq(&ex.f, &ey.f).max(diff_norm_sq(&ex.g, &ey.g));
                let rhs = a[i] * (1.0 + norm_sq(x).sqrt().powf(constants.q - 2.0) + norm_sq(y).sqrt().powf(constants.q - 2.0)) * d2;
                if lhs > rhs + slack * (1.0 + rhs) {
                    found.push(Violation {
                        kind: InequalityKind::PolynomialLipschitz,
                        regime: i + 1,
                        x: x.clone(),
                        y: Some(y.clone()),
                        lhs,
                        rhs,
                    });
                }
            }
            let x2 = norm_sq(x);
            let point_slack = INEQUALITY_TOL * (1.0 + x2);
            let lhs = 2.0 * x.iter().zip(&ex.f).map(|(p, q)| p * q).sum::<f64>() + constants.l2 * norm_sq(&ex.g);
            let rhs = constants.m + (1.0 + n_i) * x2;
            if lhs > rhs + point_slack {
                found.push(Violation { kind: InequalityKind::Dissipativity, regime: i + 1, x: x.clone(), y: None, lhs, rhs });
            }
            if let Some(b) = &b {
                let lhs = norm_sq(&ex.f).max(norm_sq(&ex.g));
                let rhs = b[i] * (1.0 + x2.sqrt().powf(constants.q));
                if lhs > rhs + point_slack * (1.0 + rhs) {
                    found.push(Violation { kind: InequalityKind::Growth, regime: i + 1, x: x.clone(), y: None, lhs, rhs });
                }
            }
        }
    }
    Ok(found)
}

/// A model whose drift and diffusion are polynomials in the state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialModel {
    state_dim: usize,
    noise_dim: usize,
    regimes: Vec<RegimePolynomials>,
    constants: Option<ConstantsDecl>,
}

impl PolynomialModel {
    pub fn new(
        state_dim: usize,
        noise_dim: usize,
        regimes: Vec<RegimePolynomials>,
        constants: Option<ConstantsDecl>,
    ) -> Result<Self, ModelError> {
        if state_dim == 0 || noise_dim == 0 {
            return Err(ModelError::Invalid("state and noise dimensions must be positive".into()));
        }
        if regimes.is_empty() {
            return Err(ModelError::Invalid("at least one regime is required".into()));
        }
        for (i, r) in regimes.iter().enumerate() {
            if r.drift.len() != state_dim {
                return Err(ModelError::Invalid(format!("regime {}: drift needs {state_dim} polynomials, got {}", i + 1, r.drift.len())));
            }
            if r.diffusion.len() != state_dim * noise_dim {
                return Err(ModelError::Invalid(format!(
                    "regime {}: diffusion needs {} polynomials, got {}",
                    i + 1,
                    state_dim * noise_dim,
                    r.diffusion.len()
                )));
            }
            for p in r.drift.iter().chain(&r.diffusion) {
                for t in &p.terms {
                    if t.exps.len() != state_dim || !t.coef.is_finite() {
                        return Err(ModelError::Invalid(format!(
                            "regime {}: every term needs a finite coefficient and {state_dim} exponents",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(Self { state_dim, noise_dim, regimes, constants })
    }

    pub fn regimes(&self) -> &[RegimePolynomials] {
        &self.regimes
    }

    pub fn with_constants(mut self, constants: Option<ConstantsDecl>) -> Self {
        self.constants = constants;
        self
    }
}

impl HybridModel for PolynomialModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn regime_count(&self) -> usize {
        self.regimes.len()
    }

    #[inline]
    fn drift(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.regimes[regime].drift) {
            *o = p.eval(x);
        }
    }

    #[inline]
    fn diffusion(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.regimes[regime].diffusion) {
            *o = p.eval(x);
        }
    }

    #[inline]
    fn drift_jacobian(&self, x: &[f64], regime: usize, out: &mut [f64]) -> bool {
        let n = self.state_dim;
        for (row, p) in self.regimes[regime].drift.iter().enumerate() {
            for col in 0..n {
                out[row * n + col] = p.partial(x, col);
            }
        }
        true
    }

    fn declared_constants(&self) -> Option<&ConstantsDecl> {
        self.constants.as_ref()
    }
}

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: &[&str] = &["two-regime-cubic"];

/// The scalar two-regime model
/// `f(x,1) = 1 + x - 10x^3, g(x,1) = x^2` and
/// `f(x,2) = 1 - 2x - 11x^3, g(x,2) = -x^2`,
/// declared with `q = 6, l1 = 5, n = (2, -4), m = 1`.
pub fn two_regime_cubic() -> PolynomialModel {
    let regimes = vec![
        RegimePolynomials {
            drift: vec![Polynomial::univariate(&[(1.0, 0), (1.0, 1), (-10.0, 3)])],
            diffusion: vec![Polynomial::univariate(&[(1.0, 2)])],
        },
        RegimePolynomials {
            drift: vec![Polynomial::univariate(&[(1.0, 0), (-2.0, 1), (-11.0, 3)])],
            diffusion: vec![Polynomial::univariate(&[(-1.0, 2)])],
        },
    ];
    let constants = ConstantsDecl { q: 6.0, l1: 5.0, n: vec![2.0, -4.0], a: None, m: Some(1.0) };
    PolynomialModel::new(1, 1, regimes, Some(constants)).expect("built-in model is well formed")
}

pub fn builtin_model(name: &str) -> Result<PolynomialModel, ModelError> {
    match name {
        "two-regime-cubic" => Ok(two_regime_cubic()),
        other => Err(ModelError::UnknownBuiltin(other.to_string())),
    }
}
