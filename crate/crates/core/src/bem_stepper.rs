//! The implicit half of a backward Euler-Maruyama step.
//!
//! Given the explicit part `v = X_k + g(X_k, r_k) dB_k` and the next regime
//! `i = r_{k+1}`, the new state is the root `u` of `G_i(u) = u - step * f(u, i) = v`.
//! Below the step bound `G_i` is strongly monotone, so the root is unique.
//! Newton's method from `u0 = v` finds it in a few iterations; bisection (1-D)
//! or a damped fixed-point iteration (n-D) takes over when Newton fails.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hybrid_model::HybridModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("no convergence: best residual {residual:e}")]
    NoConvergence { best: Vec<f64>, residual: f64 },
    #[error("model returned a non-finite value")]
    NonFiniteEvaluation,
    #[error("singular Jacobian")]
    SingularJacobian,
    #[error("invalid solver options: {0}")]
    InvalidOptions(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Absolute tolerance on `|G(u) - v|`.
    pub tol: f64,
    pub max_newton_iters: usize,
    pub max_bisection_iters: usize,
    pub jacobian: JacobianMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_newton_iters: 50, max_bisection_iters: 200, jacobian: JacobianMode::Analytic }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.tol > 0.0) {
            return Err(SolveError::InvalidOptions("tol must be positive"));
        }
        if self.max_newton_iters == 0 || self.max_bisection_iters == 0 {
            return Err(SolveError::InvalidOptions("iteration caps must be at least 1"));
        }
        Ok(())
    }
}

/// A map `G: R^n -> R^n` whose equation `G(u) = v` is to be solved.
pub trait ResidualMap {
    fn dim(&self) -> usize;
    fn apply(&self, u: &[f64], out: &mut [f64]);
    /// Writes the analytic Jacobian row-major into `out`, or returns `false`.
    fn jacobian(&self, _u: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// `G_i(u) = u - step * f(u, regime)` for one model regime.
pub struct StepMap<'a, M: HybridModel + ?Sized> {
    pub model: &'a M,
    pub regime: usize,
    pub step: f64,
}

impl<M: HybridModel + ?Sized> ResidualMap for StepMap<'_, M> {
    fn dim(&self) -> usize {
        self.model.state_dim()
    }

    #[inline]
    fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.model.drift(u, self.regime, out);
        for (o, ui) in out.iter_mut().zip(u) {
            *o = ui - self.step * *o;
        }
    }

    #[inline]
    fn jacobian(&self, u: &[f64], out: &mut [f64]) -> bool {
        if !self.model.drift_jacobian(u, self.regime, out) {
            return false;
        }
        let n = u.len();
        for r in 0..n {
            for c in 0..n {
                let delta = if r == c { 1.0 } else { 0.0 };
                out[r * n + c] = delta - self.step * out[r * n + c];
            }
        }
        true
    }
}

/// One implicit solve: find `u` with `u - step * f(u, regime) = rhs`.
pub struct StepProblem<'a, M: HybridModel + ?Sized> {
    pub rhs: &'a [f64],
    pub regime: usize,
    pub step: f64,
    pub model: &'a M,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub newton_iterations: usize,
    pub used_fallback: bool,
    pub residual: f64,
}

/// Solves `implicit_step` problems without allocating per call.
#[derive(Debug, Clone)]
pub struct StepSolver {
    opts: SolverOptions,
    residual: Vec<f64>,
    trial: Vec<f64>,
    best: Vec<f64>,
    jac: Vec<f64>,
    delta: Vec<f64>,
}

impl StepSolver {
    pub fn new(opts: SolverOptions, dim: usize) -> Result<Self, SolveError> {
        opts.validate()?;
        Ok(Self {
            opts,
            residual: vec![0.0; dim],
            trial: vec![0.0; dim],
            best: vec![0.0; dim],
            jac: vec![0.0; dim * dim],
            delta: vec![0.0; dim],
        })
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    /// Newton from the value in `u`, falling back on failure. On success `u`
    /// holds the root.
    pub fn solve<G: ResidualMap>(&mut self, map: &G, v: &[f64], u: &mut [f64]) -> Result<SolveStats, SolveError> {
        match self.newton(map, v, u) {
            Ok(stats) => Ok(stats),
            Err(_) => {
                let iters = self.opts.max_newton_iters;
                let mut stats = self.fallback(map, v, u)?;
                stats.newton_iterations = iters;
                Ok(stats)
            }
        }
    }

    /// Plain Newton iteration. Leaves the best iterate in `u` on failure.
    pub fn newton<G: ResidualMap>(&mut self, map: &G, v: &[f64], u: &mut [f64]) -> Result<SolveStats, SolveError> {
        let n = map.dim();
        self.best.copy_from_slice(u);
        let mut best_res = f64::INFINITY;
        let mut res = self.residual_at(map, v, u)?;
        for iter in 0..=self.opts.max_newton_iters {
            if res < best_res {
                best_res = res;
                self.best.copy_from_slice(u);
            }
            // the warm start is only accepted when exact, so small states keep contracting
            if (iter > 0 || res == 0.0) && res <= self.effective_tol(u, v) {
                return Ok(SolveStats { newton_iterations: iter, used_fallback: false, residual: res });
            }
            if iter == self.opts.max_newton_iters {
                break;
            }
            self.fill_jacobian(map, u)?;
            self.delta.copy_from_slice(&self.residual);
            if !solve_dense(&mut self.jac, &mut self.delta, n) {
                u.copy_from_slice(&self.best);
                return Err(SolveError::SingularJacobian);
            }
            for (ui, di) in u.iter_mut().zip(&self.delta) {
                *ui -= di;
            }
            res = match self.residual_at(map, v, u) {
                Ok(r) => r,
                Err(_) => {
                    u.copy_from_slice(&self.best);
                    return Err(SolveError::NonFiniteEvaluation);
                }
            };
        }
        u.copy_from_slice(&self.best);
        Err(SolveError::NoConvergence { best: self.best.clone(), residual: best_res })
    }

    /// Bisection on an expanding bracket in 1-D; damped fixed-point
    /// iteration `u <- u - lambda (G(u) - v)` otherwise.
    pub fn fallback<G: ResidualMap>(&mut self, map: &G, v: &[f64], u: &mut [f64]) -> Result<SolveStats, SolveError> {
        if map.dim() == 1 {
            self.bisect(map, v[0], u)
        } else {
            self.damped_fixed_point(map, v, u)
        }
    }

    fn bisect<G: ResidualMap>(&mut self, map: &G, v: f64, u: &mut [f64]) -> Result<SolveStats, SolveError> {
        let mut out = [0.0];
        let mut h = |x: f64| -> Result<f64, SolveError> {
            map.apply(&[x], &mut out);
            let r = out[0] - v;
            if r.is_finite() {
                Ok(r)
            } else {
                Err(SolveError::NonFiniteEvaluation)
            }
        };
        let scale_tol = |x: f64, r: f64| self.opts.tol.max(ROUNDING * (x.abs() + (r + v - x).abs() + v.abs()));
        let mut width = 1.0 + v.abs();
        let (mut lo, mut hi) = (v - width, v + width);
        let (mut h_lo, mut h_hi) = (h(lo)?, h(hi)?);
        let mut expansions = 0;
        while h_lo > 0.0 || h_hi < 0.0 {
            if expansions == MAX_BRACKET_EXPANSIONS {
                return Err(SolveError::NoConvergence { best: vec![v], residual: h_lo.abs().min(h_hi.abs()) });
            }
            width *= 2.0;
            if h_lo > 0.0 {
                lo -= width;
                h_lo = h(lo)?;
            }
            if h_hi < 0.0 {
                hi += width;
                h_hi = h(hi)?;
            }
            expansions += 1;
        }
        for _ in 0..self.opts.max_bisection_iters {
            for (x, r) in [(lo, h_lo), (hi, h_hi)] {
                if r.abs() <= scale_tol(x, r) {
                    u[0] = x;
                    return Ok(SolveStats { newton_iterations: 0, used_fallback: true, residual: r.abs() });
                }
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let h_mid = h(mid)?;
            if h_mid <= 0.0 {
                lo = mid;
                h_lo = h_mid;
            } else {
                hi = mid;
                h_hi = h_mid;
            }
        }
        let (x, r) = if h_lo.abs() <= h_hi.abs() { (lo, h_lo) } else { (hi, h_hi) };
        u[0] = x;
        if r.abs() <= scale_tol(x, r) {
            Ok(SolveStats { newton_iterations: 0, used_fallback: true, residual: r.abs() })
        } else {
            Err(SolveError::NoConvergence { best: vec![x], residual: r.abs() })
        }
    }

    fn damped_fixed_point<G: ResidualMap>(&mut self, map: &G, v: &[f64], u: &mut [f64]) -> Result<SolveStats, SolveError> {
        let n = map.dim();
        // lambda = 1/(1 + L step), with L step estimated by |J_G - I|_F.
        self.fill_jacobian(map, u)?;
        let off_identity: f64 = (0..n * n)
            .map(|k| {
                let e = if k / n == k % n { 1.0 } else { 0.0 };
                (self.jac[k] - e).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        let mut lambda = 1.0 / (1.0 + off_identity);
        let mut res = self.residual_at(map, v, u)?;
        let mut best_res = res;
        self.best.copy_from_slice(u);
        for _ in 0..self.opts.max_bisection_iters * FIXED_POINT_ITERS_PER_BISECTION {
            if res <= self.effective_tol(u, v) {
                return Ok(SolveStats { newton_iterations: 0, used_fallback: true, residual: res });
            }
            for ((t, ui), ri) in self.trial.iter_mut().zip(u.iter()).zip(&self.residual) {
                *t = ui - lambda * ri;
            }
            let prev = self.residual.clone();
            match self.residual_at(map, v, &self.trial.clone()) {
                Ok(r) if r < res => {
                    u.copy_from_slice(&self.trial);
                    res = r;
                    if r < best_res {
                        best_res = r;
                        self.best.copy_from_slice(u);
                    }
                }
                _ => {
                    self.residual.copy_from_slice(&prev);
                    lambda *= 0.5;
                    if lambda < f64::EPSILON {
                        break;
                    }
                }
            }
        }
        u.copy_from_slice(&self.best);
        if best_res <= self.effective_tol(u, v) {
            return Ok(SolveStats { newton_iterations: 0, used_fallback: true, residual: best_res });
        }
        Err(SolveError::NoConvergence { best: self.best.clone(), residual: best_res })
    }

    // Stores G(u) - v in self.residual and returns its norm.
    #[inline]
    fn residual_at<G: ResidualMap>(&mut self, map: &G, v: &[f64], u: &[f64]) -> Result<f64, SolveError> {
        map.apply(u, &mut self.residual);
        let mut sq = 0.0;
        for (r, vi) in self.residual.iter_mut().zip(v) {
            *r -= vi;
            sq += *r * *r;
        }
        if sq.is_finite() {
            Ok(sq.sqrt())
        } else {
            Err(SolveError::NonFiniteEvaluation)
        }
    }

    // The requested tolerance, floored at the rounding level of the terms in
    // G(u) - v so that huge states do not demand sub-ulp residuals.
    #[inline]
    fn effective_tol(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut scale = 0.0;
        for k in 0..u.len() {
            let g = self.residual[k] + v[k];
            scale += u[k].abs() + (g - u[k]).abs() + v[k].abs();
        }
        self.opts.tol.max(ROUNDING * scale)
    }

    fn fill_jacobian<G: ResidualMap>(&mut self, map: &G, u: &[f64]) -> Result<(), SolveError> {
        let n = map.dim();
        if self.opts.jacobian == JacobianMode::Analytic && map.jacobian(u, &mut self.jac) {
            if self.jac.iter().all(|j| j.is_finite()) {
                return Ok(());
            }
            return Err(SolveError::NonFiniteEvaluation);
        }
        // forward differences, h = 1e-7 (1 + |u|)
        let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let h = 1e-7 * (1.0 + norm_u);
        let mut base = vec![0.0; n];
        let mut shifted = vec![0.0; n];
        map.apply(u, &mut base);
        self.trial.copy_from_slice(u);
        for (c, &uc) in u.iter().enumerate() {
            self.trial[c] += h;
            map.apply(&self.trial, &mut shifted);
            self.trial[c] = uc;
            for (r, (s, b)) in shifted.iter().zip(&base).enumerate() {
                self.jac[r * n + c] = (s - b) / h;
            }
        }
        if self.jac.iter().all(|j| j.is_finite()) {
            Ok(())
        } else {
            Err(SolveError::NonFiniteEvaluation)
        }
    }
}

const ROUNDING: f64 = 16.0 * f64::EPSILON;
const MAX_BRACKET_EXPANSIONS: usize = 200;
const FIXED_POINT_ITERS_PER_BISECTION: usize = 50;
const PIVOT_FLOOR: f64 = 1e-14;

// Gaussian elimination with partial pivoting; solution overwrites `b`.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    if n == 1 {
        if !(a[0].abs() > PIVOT_FLOOR) {
            return false;
        }
        b[0] /= a[0];
        return true;
    }
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        if !(a[pivot * n + col].abs() > PIVOT_FLOOR * scale) {
            return false;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * b[k];
        }
        b[row] = acc / a[row * n + row];
    }
    true
}

/// Solves one implicit step from the warm start `u0 = rhs`.
pub fn implicit_step<M: HybridModel + ?Sized>(p: &StepProblem<'_, M>, opts: &SolverOptions) -> Result<Vec<f64>, SolveError> {
    let map = StepMap { model: p.model, regime: p.regime, step: p.step };
    let mut solver = StepSolver::new(*opts, map.dim())?;
    let mut u = p.rhs.to_vec();
    solver.solve(&map, p.rhs, &mut u)?;
    Ok(u)
}

/// Newton from `u0` with the fallback on failure.
pub fn newton_solve<G: ResidualMap>(map: &G, v: &[f64], u0: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let mut solver = StepSolver::new(*opts, map.dim())?;
    let mut u = u0.to_vec();
    let stats = solver.solve(map, v, &mut u)?;
    Ok((u, stats))
}

/// The fallback alone, started from `v`.
pub fn fallback_solve<G: ResidualMap>(map: &G, v: &[f64], opts: &SolverOptions) -> Result<(Vec<f64>, SolveStats), SolveError> {
    let mut solver = StepSolver::new(*opts, map.dim())?;
    let mut u = v.to_vec();
    let stats = solver.fallback(map, v, &mut u)?;
    Ok((u, stats))
}
