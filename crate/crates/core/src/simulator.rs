//! Backward Euler-Maruyama trajectories, coupled pairs and ensembles.
//!
//! One step maps `(X_k, r_k)` to `(X_{k+1}, r_{k+1})` by
//!
//! ```text
//! v       = X_k + g(X_k, r_k) dB_k
//! X_{k+1} = v + f(X_{k+1}, r_{k+1}) step
//! ```
//!
//! so the diffusion sees the current regime and the drift sees the next one.
//! The regime chain is autonomous and is sampled for the whole horizon before
//! any state is advanced.
//!
//! Ensemble paths are independent tasks keyed by `(master seed, path index)`;
//! results are merged in path order, so outputs do not depend on the number
//! of workers.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::bem_stepper::{SolveError, SolverOptions, StepMap, StepSolver};
use crate::hybrid_model::HybridModel;
use crate::markov_chain::{
    couple_chains, sample_chain, sample_states, transition_matrix, ChainError, ChainPath, Generator, TransitionMatrix,
};
use crate::parallel::par_map;
use crate::rng::{SeedRecord, Stream};

/// Paths per reduction block of the streaming statistics.
const BLOCK: usize = 256;
/// Tolerated fraction of failed paths in an ensemble.
pub const MAX_FAILURE_FRACTION: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("solver failed at step {step}: {source}")]
    Solve { step: usize, source: SolveError },
    #[error("model has {model} regimes but the chain has {chain}")]
    RegimeMismatch { model: usize, chain: usize },
    #[error("initial state has {got} components, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time {time} is not on the grid of step {step}")]
    OffGrid { time: f64, step: f64 },
    #[error("step {step} is not an integer multiple of the reference step {reference}")]
    IncommensurateStep { step: f64, reference: f64 },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("ensemble needs at least one path")]
    EmptyEnsemble,
    #[error("{failed} of {total} paths failed (first failure: {first})")]
    EnsembleFailure { failed: usize, total: usize, first: Box<SimulationError> },
}

/// A simulated path `X_0..X_K` with its regime path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    /// Row-major `(K + 1) x dim`.
    pub states: Vec<f64>,
    pub chain: ChainPath,
    pub step: f64,
    pub seed: SeedRecord,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }
}

/// Two trajectories driven by the same Brownian increments over coupled chains.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub first: Trajectory,
    pub second: Trajectory,
    /// First step at which the two regime paths coincide.
    pub meeting: Option<usize>,
}

impl CoupledPair {
    /// `|D_k| = |X_k - Y_k|` for every step.
    pub fn distances(&self) -> Vec<f64> {
        (0..self.first.len()).map(|k| distance(self.first.state(k), self.second.state(k))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotProvenance {
    pub step: f64,
    pub paths: usize,
    pub master_seed: u64,
    pub failed_paths: usize,
}

/// Atoms `(X_k, r_k)` of every surviving path at one grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEnsemble {
    pub time: f64,
    pub step_index: usize,
    pub dim: usize,
    /// Row-major `M x dim`.
    pub states: Vec<f64>,
    pub regimes: Vec<usize>,
    /// Path index of each atom; failed paths are absent.
    pub path_ids: Vec<usize>,
    pub provenance: SnapshotProvenance,
}

impl SnapshotEnsemble {
    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    pub fn atom(&self, m: usize) -> (&[f64], usize) {
        (&self.states[m * self.dim..(m + 1) * self.dim], self.regimes[m])
    }

    /// Values of one state component across the ensemble.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.states.iter().skip(c).step_by(self.dim).copied().collect()
    }
}

/// How an ensemble is split across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub paths: usize,
    pub master_seed: u64,
    pub workers: usize,
}

/// Mean and standard error of a per-step observable over an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub step: f64,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub paths: usize,
    pub failed_paths: usize,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_compatible<M: HybridModel + ?Sized>(model: &M, tm: &TransitionMatrix, x0: &[f64], i0: usize) -> Result<(), SimulationError> {
    if model.regime_count() != tm.state_count() {
        return Err(SimulationError::RegimeMismatch { model: model.regime_count(), chain: tm.state_count() });
    }
    if x0.len() != model.state_dim() {
        return Err(SimulationError::DimensionMismatch { expected: model.state_dim(), got: x0.len() });
    }
    if !(tm.step() > 0.0 && tm.step().is_finite()) {
        return Err(SimulationError::InvalidStep(tm.step()));
    }
    if i0 >= tm.state_count() {
        return Err(ChainError::RegimeOutOfRange { regime: i0, states: tm.state_count() }.into());
    }
    Ok(())
}

/// Advances states by one BEM step given the Brownian increment.
struct PathStepper<'a, M: HybridModel + ?Sized> {
    model: &'a M,
    step: f64,
    sqrt_step: f64,
    solver: StepSolver,
    diffusion: Vec<f64>,
    noise: Vec<f64>,
    rhs: Vec<f64>,
}

impl<'a, M: HybridModel + ?Sized> PathStepper<'a, M> {
    fn new(model: &'a M, step: f64, opts: SolverOptions) -> Result<Self, SolveError> {
        let n = model.state_dim();
        let d = model.noise_dim();
        Ok(Self {
            model,
            step,
            sqrt_step: step.sqrt(),
            solver: StepSolver::new(opts, n)?,
            diffusion: vec![0.0; n * d],
            noise: vec![0.0; d],
            rhs: vec![0.0; n],
        })
    }

    /// Fills the internal increment with independent Normal(0, step) draws.
    #[inline]
    fn draw_noise<R: Rng>(&mut self, rng: &mut R) {
        for z in self.noise.iter_mut() {
            *z = self.sqrt_step * rng.sample::<f64, _>(StandardNormal);
        }
    }

    #[inline]
    fn advance(&mut self, x: &mut [f64], regime: usize, next_regime: usize) -> Result<(), SolveError> {
        let noise = std::mem::take(&mut self.noise);
        let out = self.advance_with(x, regime, next_regime, &noise);
        self.noise = noise;
        out
    }

    #[inline]
    fn advance_with(&mut self, x: &mut [f64], regime: usize, next_regime: usize, noise: &[f64]) -> Result<(), SolveError> {
        let d = noise.len();
        self.model.diffusion(x, regime, &mut self.diffusion);
        for (r, row) in self.rhs.iter_mut().enumerate() {
            let g = &self.diffusion[r * d..(r + 1) * d];
            *row = x[r] + g.iter().zip(noise).map(|(a, b)| a * b).sum::<f64>();
        }
        if self.rhs.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFiniteEvaluation);
        }
        let map = StepMap { model: self.model, regime: next_regime, step: self.step };
        x.copy_from_slice(&self.rhs);
        self.solver.solve(&map, &self.rhs, x)?;
        Ok(())
    }
}

// Runs one path and reports (k, X_k, r_k) to `observe` for k = 0..=steps.
#[allow(clippy::too_many_arguments)]
fn run_path<M: HybridModel + ?Sized>(
    model: &M,
    tm: &TransitionMatrix,
    x0: &[f64],
    i0: usize,
    steps: usize,
    seed: SeedRecord,
    opts: SolverOptions,
    mut observe: impl FnMut(usize, &[f64], usize),
) -> Result<ChainPath, SimulationError> {
    let chain = sample_chain(tm, i0, steps, seed)?;
    let mut stepper = PathStepper::new(model, tm.step(), opts).map_err(|source| SimulationError::Solve { step: 0, source })?;
    let mut rng = seed.rng(Stream::Brownian);
    let mut x = x0.to_vec();
    observe(0, &x, i0);
    for k in 0..steps {
        stepper.draw_noise(&mut rng);
        stepper.advance(&mut x, chain.states[k], chain.states[k + 1]).map_err(|source| SimulationError::Solve { step: k + 1, source })?;
        observe(k + 1, &x, chain.states[k + 1]);
    }
    Ok(chain)
}

/// Simulates one BEM trajectory from `(x0, i0)`; the step size is the one
/// `tm` was built for.
pub fn simulate<M: HybridModel + ?Sized>(
    model: &M,
    tm: &TransitionMatrix,
    x0: &[f64],
    i0: usize,
    steps: usize,
    seed: SeedRecord,
    opts: &SolverOptions,
) -> Result<Trajectory, SimulationError> {
    check_compatible(model, tm, x0, i0)?;
    let mut states = Vec::with_capacity((steps + 1) * x0.len());
    let chain = run_path(model, tm, x0, i0, steps, seed, *opts, |_, x, _| states.extend_from_slice(x))?;
    Ok(Trajectory { dim: x0.len(), states, chain, step: tm.step(), seed })
}

// Runs a coupled pair and reports (k, X_k, Y_k) to `observe`.
#[allow(clippy::too_many_arguments)]
fn run_coupled<M: HybridModel + ?Sized>(
    model: &M,
    tm: &TransitionMatrix,
    (x0, i0): (&[f64], usize),
    (y0, j0): (&[f64], usize),
    steps: usize,
    seed: SeedRecord,
    opts: SolverOptions,
    mut observe: impl FnMut(usize, &[f64], &[f64]),
) -> Result<(ChainPath, ChainPath, Option<usize>), SimulationError> {
    let chains = couple_chains(tm, i0, j0, steps, seed)?;
    let solve_err = |source| SimulationError::Solve { step: 0, source };
    let mut first = PathStepper::new(model, tm.step(), opts).map_err(solve_err)?;
    let mut second = PathStepper::new(model, tm.step(), opts).map_err(solve_err)?;
    let mut rng = seed.rng(Stream::Brownian);
    let (mut x, mut y) = (x0.to_vec(), y0.to_vec());
    observe(0, &x, &y);
    let (ra, rb) = (&chains.first.states, &chains.second.states);
    for k in 0..steps {
        first.draw_noise(&mut rng);
        let noise = first.noise.clone();
        let at = |source| SimulationError::Solve { step: k + 1, source };
        first.advance(&mut x, ra[k], ra[k + 1]).map_err(at)?;
        second.advance_with(&mut y, rb[k], rb[k + 1], &noise).map_err(at)?;
        observe(k + 1, &x, &y);
    }
    Ok((chains.first, chains.second, chains.meeting))
}

/// Simulates `(x0, i0)` and `(y0, j0)` with shared Brownian increments over
/// meeting-coupled chains. The first trajectory equals
/// `simulate(model, tm, x0, i0, steps, seed, opts)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_coupled<M: HybridModel + ?Sized>(
    model: &M,
    tm: &TransitionMatrix,
    x0: &[f64],
    i0: usize,
    y0: &[f64],
    j0: usize,
    steps: usize,
    seed: SeedRecord,
    opts: &SolverOptions,
) -> Result<CoupledPair, SimulationError> {
    check_compatible(model, tm, x0, i0)?;
    check_compatible(model, tm, y0, j0)?;
    let mut xs = Vec::with_capacity((steps + 1) * x0.len());
    let mut ys = Vec::with_capacity((steps + 1) * x0.len());
    let (ca, cb, meeting) = run_coupled(model, tm, (x0, i0), (y0, j0), steps, seed, *opts, |_, x, y| {
        xs.extend_from_slice(x);
        ys.extend_from_slice(y);
    })?;
    let traj = |states, chain| Trajectory { dim: x0.len(), states, chain, step: tm.step(), seed };
    Ok(CoupledPair { first: traj(xs, ca), second: traj(ys, cb), meeting })
}

fn check_failures(failed: usize, total: usize, first: Option<SimulationError>) -> Result<(), SimulationError> {
    if failed as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(SimulationError::EnsembleFailure { failed, total, first: Box::new(first.expect("a failure was recorded")) });
    }
    Ok(())
}

/// Maps each requested time to its grid index; off-grid times are an error.
pub fn grid_indices(times: &[f64], step: f64) -> Result<Vec<usize>, SimulationError> {
    times
        .iter()
        .map(|&t| {
            let k = (t / step).round();
            if !(t >= 0.0) || (k * step - t).abs() > 1e-9 * t.abs().max(1.0) {
                return Err(SimulationError::OffGrid { time: t, step });
            }
            Ok(k as usize)
        })
        .collect()
}

/// Independent paths from `(x0, i0)` recorded at each requested time.
pub fn ensemble_snapshots<M: HybridModel + ?Sized>(
    model: &M,
    tm: &TransitionMatrix,
    x0: &[f64],
    i0: usize,
    times: &[f64],
    ensemble: EnsembleSpec,
    opts: &SolverOptions,
) -> Result<Vec<SnapshotEnsemble>, SimulationError> {
    check_compatible(model, tm, x0, i0)?;
    if ensemble.paths == 0 {
        return Err(SimulationError::EmptyEnsemble);
    }
    let indices = grid_indices(times, tm.step())?;
    let horizon = indices.iter().copied().max().unwrap_or(0);
    // slot[k] lists the snapshots taken at step k
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); horizon + 1];
    for (s, &k) in indices.iter().enumerate() {
        slots[k].push(s);
    }
    let dim = x0.len();
    let results = par_map(0..ensemble.paths, ensemble.workers, |path| {
        let mut states = vec![0.0; times.len() * dim];
        let mut regimes = vec![0usize; times.len()];
        run_path(model, tm, x0, i0, horizon, SeedRecord::new(ensemble.master_seed, path as u64), *opts, |k, x, r| {
            for &s in &slots[k] {
                states[s * dim..(s + 1) * dim].copy_from_slice(x);
                regimes[s] = r;
            }
        })
        .map(|_| (states, regimes))
    });
    let failed = results.iter().filter(|r| r.is_err()).count();
    let first = results.iter().find_map(|r| r.as_ref().err().cloned());
    check_failures(failed, ensemble.paths, first)?;
    let provenance =
        SnapshotProvenance { step: tm.step(), paths: ensemble.paths - failed, master_seed: ensemble.master_seed, failed_paths: failed };
    let mut out: Vec<SnapshotEnsemble> = times
        .iter()
        .zip(&indices)
        .map(|(&time, &step_index)| SnapshotEnsemble {
            time,
            step_index,
            dim,
            states: Vec::with_capacity((ensemble.paths - failed) * dim),
            regimes: Vec::with_capacity(ensemble.paths - failed),
            path_ids: Vec::with_capacity(ensemble.paths - failed),
            provenance: provenance.clone(),
        })
        .collect();
    for (path, result) in results.into_iter().enumerate() {
        let Ok((states, regimes)) = result else { continue };
        for (s, snap) in out.iter_mut().enumerate() {
            snap.states.extend_from_slice(&states[s * dim..(s + 1) * dim]);
            snap.regimes.push(regimes[s]);
            snap.path_ids.push(path);
        }
    }
    Ok(out)
}

// Streams a per-step observable through fixed-size blocks of paths so memory
// stays bounded and the summation order is fixed.
fn mean_series(
    steps: usize,
    step: f64,
    ensemble: EnsembleSpec,
    path_series: impl Fn(usize) -> Result<Vec<f64>, SimulationError> + Sync + Send,
) -> Result<SeriesSummary, SimulationError> {
    if ensemble.paths == 0 {
        return Err(SimulationError::EmptyEnsemble);
    }
    let mut sum = vec![0.0; steps + 1];
    let mut sum_sq = vec![0.0; steps + 1];
    let mut failed = 0;
    let mut first = None;
    let mut start = 0;
    while start < ensemble.paths {
        let end = (start + BLOCK).min(ensemble.paths);
        for result in par_map(start..end, ensemble.workers, &path_series) {
            match result {
                Ok(series) => {
                    for (k, v) in series.into_iter().enumerate() {
                        sum[k] += v;
                        sum_sq[k] += v * v;
                    }
                }
                Err(e) => {
                    failed += 1;
                    first.get_or_insert(e);
                }
            }
        }
        start = end;
    }
    check_failures(failed, ensemble.paths, first)?;
    let m = (ensemble.paths - failed) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let std_err = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| if m > 1.0 { ((sq / m - mu * mu).max(0.0) * m / (m - 1.0) / m).sqrt() } else { 0.0 })
        .collect();
    Ok(SeriesSummary { step, mean, std_err, paths: ensemble.paths - failed, failed_paths: failed })
}

/// Ensemble mean of `|X_k|^2` for `k = 0..=steps`.
pub fn second_moment_series<M: HybridModel + ?Sized>(
    model: &M,
    tm: &TransitionMatrix,
    x0: &[f64],
    i0: usize,
    steps: usize,
    ensemble: EnsembleSpec,
    opts: &SolverOptions,
) -> Result<SeriesSummary, SimulationError> {
    check_compatible(model, tm, x0, i0)?;
    mean_series(steps, tm.step(), ensemble, |path| {
        let mut series = Vec::with_capacity(steps + 1);
        run_path(model, tm, x0, i0, steps, SeedRecord::new(ensemble.master_seed, path as u64), *opts, |_, x, _| {
            series.push(x.iter().map(|v| v * v).sum());
        })?;
        Ok(series)
    })
}

/// Ensemble mean of `|X_k - Y_k|^p` over coupled pairs.
#[allow(clippy::too_many_arguments)]
pub fn coupling_distance_series<M: HybridModel + ?Sized>(
    model: &M,
    tm: &TransitionMatrix,
    first: (&[f64], usize),
    second: (&[f64], usize),
    steps: usize,
    p: f64,
    ensemble: EnsembleSpec,
    opts: &SolverOptions,
) -> Result<SeriesSummary, SimulationError> {
    check_compatible(model, tm, first.0, first.1)?;
    check_compatible(model, tm, second.0, second.1)?;
    mean_series(steps, tm.step(), ensemble, |path| {
        let mut series = Vec::with_capacity(steps + 1);
        let seed = SeedRecord::new(ensemble.master_seed, path as u64);
        run_coupled(model, tm, first, second, steps, seed, *opts, |_, x, y| {
            series.push(distance(x, y).powf(p));
        })?;
        Ok(series)
    })
}

/// Terminal ensembles at time `horizon` for several step sizes driven by the
/// same Brownian paths and regime paths.
///
/// Every step in `steps` must be an integer multiple of `reference`. Each path
/// samples the regime chain and the Brownian increments on the reference
/// grid; a coarse level uses the chain at its own grid points and sums the
/// fine increments over each coarse step. The returned vector holds one
/// ensemble per entry of `steps`, followed by the reference ensemble.
#[allow(clippy::too_many_arguments)]
pub fn common_noise_terminal<M: HybridModel + ?Sized>(
    model: &M,
    generator: &Generator,
    x0: &[f64],
    i0: usize,
    steps: &[f64],
    reference: f64,
    horizon: f64,
    ensemble: EnsembleSpec,
    opts: &SolverOptions,
) -> Result<Vec<SnapshotEnsemble>, SimulationError> {
    if !(reference > 0.0 && reference.is_finite()) {
        return Err(SimulationError::InvalidStep(reference));
    }
    let tm = transition_matrix(generator, reference)?;
    check_compatible(model, &tm, x0, i0)?;
    if ensemble.paths == 0 {
        return Err(SimulationError::EmptyEnsemble);
    }
    let ratios: Vec<usize> = steps
        .iter()
        .map(|&s| {
            let r = (s / reference).round();
            if r < 1.0 || (r * reference - s).abs() > 1e-9 * s {
                Err(SimulationError::IncommensurateStep { step: s, reference })
            } else {
                Ok(r as usize)
            }
        })
        .collect::<Result<_, _>>()?;
    let fine_steps = grid_indices(&[horizon], reference)?[0];
    for (&s, &ratio) in steps.iter().zip(&ratios) {
        if fine_steps % ratio != 0 {
            return Err(SimulationError::OffGrid { time: horizon, step: s });
        }
    }
    let dim = x0.len();
    let noise_dim = model.noise_dim();
    let levels = steps.len();
    let results = par_map(0..ensemble.paths, ensemble.workers, |path| -> Result<(Vec<f64>, usize), SimulationError> {
        let seed = SeedRecord::new(ensemble.master_seed, path as u64);
        let mut chain_rng = seed.rng(Stream::Chain);
        let chain = sample_states(&tm, i0, fine_steps, &mut chain_rng);
        let mut rng = seed.rng(Stream::Brownian);
        let at = |k: usize| move |source| SimulationError::Solve { step: k, source };
        let mut fine = PathStepper::new(model, reference, *opts).map_err(at(0))?;
        let mut coarse: Vec<PathStepper<'_, M>> =
            steps.iter().map(|&s| PathStepper::new(model, s, *opts)).collect::<Result<_, _>>().map_err(at(0))?;
        let mut fine_x = x0.to_vec();
        let mut coarse_x = vec![x0.to_vec(); levels];
        let mut sums = vec![vec![0.0; noise_dim]; levels];
        for k in 0..fine_steps {
            fine.draw_noise(&mut rng);
            fine.advance(&mut fine_x, chain[k], chain[k + 1]).map_err(at(k + 1))?;
            for l in 0..levels {
                for (s, z) in sums[l].iter_mut().zip(&fine.noise) {
                    *s += z;
                }
                if (k + 1) % ratios[l] == 0 {
                    let from = chain[k + 1 - ratios[l]];
                    coarse[l].advance_with(&mut coarse_x[l], from, chain[k + 1], &sums[l]).map_err(at((k + 1) / ratios[l]))?;
                    sums[l].iter_mut().for_each(|s| *s = 0.0);
                }
            }
        }
        let mut flat = Vec::with_capacity((levels + 1) * dim);
        for x in &coarse_x {
            flat.extend_from_slice(x);
        }
        flat.extend_from_slice(&fine_x);
        Ok((flat, chain[fine_steps]))
    });
    let failed = results.iter().filter(|r| r.is_err()).count();
    let first = results.iter().find_map(|r| r.as_ref().err().cloned());
    check_failures(failed, ensemble.paths, first)?;
    let all_steps: Vec<f64> = steps.iter().copied().chain([reference]).collect();
    let mut out: Vec<SnapshotEnsemble> = all_steps
        .iter()
        .map(|&s| SnapshotEnsemble {
            time: horizon,
            step_index: (horizon / s).round() as usize,
            dim,
            states: Vec::with_capacity((ensemble.paths - failed) * dim),
            regimes: Vec::with_capacity(ensemble.paths - failed),
            path_ids: Vec::with_capacity(ensemble.paths - failed),
            provenance: SnapshotProvenance {
                step: s,
                paths: ensemble.paths - failed,
                master_seed: ensemble.master_seed,
                failed_paths: failed,
            },
        })
        .collect();
    for (path, result) in results.into_iter().enumerate() {
        let Ok((flat, regime)) = result else { continue };
        for (l, snap) in out.iter_mut().enumerate() {
            snap.states.extend_from_slice(&flat[l * dim..(l + 1) * dim]);
            snap.regimes.push(regime);
            snap.path_ids.push(path);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid_model::{two_regime_cubic, Polynomial, PolynomialModel, RegimePolynomials};

    fn single_regime(drift: &[(f64, u32)], sigma: f64) -> PolynomialModel {
        PolynomialModel::new(
            1,
            1,
            vec![RegimePolynomials { drift: vec![Polynomial::univariate(drift)], diffusion: vec![Polynomial::univariate(&[(sigma, 0)])] }],
            None,
        )
        .unwrap()
    }

    fn one_state(step: f64) -> TransitionMatrix {
        transition_matrix(&Generator::from_rows(&[vec![0.0]]).unwrap(), step).unwrap()
    }

    fn stable(step: f64) -> TransitionMatrix {
        transition_matrix(&Generator::from_rows(&[vec![-4.0, 4.0], vec![1.0, -1.0]]).unwrap(), step).unwrap()
    }

    #[test]
    fn deterministic_linear_decay_is_exact() {
        let model = single_regime(&[(-1.0, 1)], 0.0);
        let step = 0.1;
        let traj = simulate(&model, &one_state(step), &[2.0], 0, 50, SeedRecord::new(1, 0), &SolverOptions::default()).unwrap();
        for k in 0..=50 {
            let exact = 2.0 / (1.0 + step).powi(k as i32);
            assert!((traj.state(k)[0] - exact).abs() < 1e-13 * exact.max(1.0));
        }
    }

    #[test]
    fn pure_noise_has_brownian_variance() {
        let sigma = 0.7;
        let model = single_regime(&[], sigma);
        let step = 0.01;
        let steps = 100;
        let tm = one_state(step);
        let ends = ensemble_snapshots(
            &model,
            &tm,
            &[1.0],
            0,
            &[1.0],
            EnsembleSpec { paths: 20_000, master_seed: 3, workers: 1 },
            &SolverOptions::default(),
        )
        .unwrap();
        let xs = ends[0].component(0);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = sigma * sigma * steps as f64 * step;
        // standard error of a Gaussian sample variance
        let se = expected * (2.0 / (n - 1.0)).sqrt();
        assert!((var - expected).abs() < 3.0 * se, "{var} vs {expected}");
    }

    #[test]
    fn cubic_model_stays_finite() {
        let model = two_regime_cubic();
        let tm = transition_matrix(&Generator::from_rows(&[vec![-1.0, 1.0], vec![3.0, -3.0]]).unwrap(), 0.01).unwrap();
        let traj = simulate(&model, &tm, &[0.5], 1, 10_000, SeedRecord::new(8, 0), &SolverOptions::default()).unwrap();
        assert_eq!(traj.len(), 10_001);
        assert!(traj.states.iter().all(|x| x.is_finite()));
        assert_eq!(traj.chain.states.len(), traj.len());
    }

    #[test]
    fn simulate_replays() {
        let model = two_regime_cubic();
        let tm = stable(0.01);
        let a = simulate(&model, &tm, &[0.5], 1, 500, SeedRecord::new(8, 2), &SolverOptions::default()).unwrap();
        let b = simulate(&model, &tm, &[0.5], 1, 500, SeedRecord::new(8, 2), &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_coupled_inputs_never_separate() {
        let model = two_regime_cubic();
        let pair =
            simulate_coupled(&model, &stable(0.01), &[0.3], 0, &[0.3], 0, 1000, SeedRecord::new(4, 0), &SolverOptions::default()).unwrap();
        assert!(pair.distances().iter().all(|&d| d == 0.0));
        assert_eq!(pair.meeting, Some(0));
    }

    #[test]
    fn coupled_first_matches_simulate() {
        let model = two_regime_cubic();
        let tm = stable(0.01);
        let seed = SeedRecord::new(4, 7);
        let pair = simulate_coupled(&model, &tm, &[0.5], 1, &[-3.0], 0, 800, seed, &SolverOptions::default()).unwrap();
        let solo = simulate(&model, &tm, &[0.5], 1, 800, seed, &SolverOptions::default()).unwrap();
        assert_eq!(pair.first, solo);
        if let Some(tau) = pair.meeting {
            assert_eq!(pair.first.chain.states[tau..], pair.second.chain.states[tau..]);
        }
    }

    #[test]
    fn linear_contraction_of_coupled_pair() {
        let model = single_regime(&[(-1.0, 1)], 0.0);
        let step = 0.05;
        let pair = simulate_coupled(&model, &one_state(step), &[3.0], 0, &[-1.0], 0, 100, SeedRecord::new(0, 0), &SolverOptions::default())
            .unwrap();
        for (k, d) in pair.distances().iter().enumerate() {
            let exact = 4.0 / (1.0 + step).powi(k as i32);
            assert!((d - exact).abs() < 1e-12 * exact.max(1.0));
        }
    }

    #[test]
    fn snapshots_of_single_path_match_trajectory() {
        let model = two_regime_cubic();
        let tm = stable(0.01);
        let snaps = ensemble_snapshots(
            &model,
            &tm,
            &[0.5],
            1,
            &[0.0, 0.5, 1.0],
            EnsembleSpec { paths: 1, master_seed: 12, workers: 1 },
            &SolverOptions::default(),
        )
        .unwrap();
        let traj = simulate(&model, &tm, &[0.5], 1, 100, SeedRecord::new(12, 0), &SolverOptions::default()).unwrap();
        for (snap, k) in snaps.iter().zip([0, 50, 100]) {
            assert_eq!(snap.states, traj.state(k));
            assert_eq!(snap.regimes, vec![traj.chain.states[k]]);
        }
    }

    #[test]
    fn deterministic_model_gives_identical_atoms() {
        let model = single_regime(&[(1.0, 0), (-1.0, 1)], 0.0);
        let snaps = ensemble_snapshots(
            &model,
            &one_state(0.1),
            &[0.0],
            0,
            &[2.0],
            EnsembleSpec { paths: 50, master_seed: 1, workers: 1 },
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(snaps[0].states.iter().all(|&x| x == snaps[0].states[0]));
    }

    #[test]
    fn snapshots_independent_of_workers() {
        let model = two_regime_cubic();
        let tm = stable(0.01);
        let run = |workers| {
            ensemble_snapshots(
                &model,
                &tm,
                &[0.5],
                1,
                &[0.05, 0.3],
                EnsembleSpec { paths: 300, master_seed: 77, workers },
                &SolverOptions::default(),
            )
            .unwrap()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn off_grid_times_are_rejected() {
        let model = two_regime_cubic();
        let err = ensemble_snapshots(
            &model,
            &stable(0.01),
            &[0.5],
            1,
            &[0.005],
            EnsembleSpec { paths: 2, master_seed: 1, workers: 1 },
            &SolverOptions::default(),
        );
        assert!(matches!(err, Err(SimulationError::OffGrid { .. })));
    }

    #[test]
    fn mismatched_model_and_chain() {
        let model = two_regime_cubic();
        let err = simulate(&model, &one_state(0.01), &[0.5], 0, 5, SeedRecord::new(0, 0), &SolverOptions::default());
        assert!(matches!(err, Err(SimulationError::RegimeMismatch { .. })));
        let err = simulate(&model, &stable(0.01), &[0.5, 1.0], 0, 5, SeedRecord::new(0, 0), &SolverOptions::default());
        assert!(matches!(err, Err(SimulationError::DimensionMismatch { .. })));
    }

    #[test]
    fn moment_series_independent_of_workers() {
        let model = two_regime_cubic();
        let tm = stable(0.01);
        let run = |workers| {
            second_moment_series(
                &model,
                &tm,
                &[0.5],
                1,
                200,
                EnsembleSpec { paths: 600, master_seed: 5, workers },
                &SolverOptions::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a, b);
        assert_eq!(a.mean[0], 0.25);
    }

    #[test]
    fn common_noise_reference_level_matches_plain_simulation() {
        let model = two_regime_cubic();
        let generator = Generator::from_rows(&[vec![-4.0, 4.0], vec![1.0, -1.0]]).unwrap();
        let spec = EnsembleSpec { paths: 20, master_seed: 9, workers: 1 };
        let out = common_noise_terminal(&model, &generator, &[0.5], 1, &[0.04, 0.02], 0.01, 2.0, spec, &SolverOptions::default()).unwrap();
        assert_eq!(out.len(), 3);
        let plain =
            ensemble_snapshots(&model, &transition_matrix(&generator, 0.01).unwrap(), &[0.5], 1, &[2.0], spec, &SolverOptions::default())
                .unwrap();
        assert_eq!(out[2].states, plain[0].states);
        assert_eq!(out[2].regimes, plain[0].regimes);
        // coarse levels sit close to the fine one along the same noise
        let gap: f64 = out[0].states.iter().zip(&out[2].states).map(|(a, b)| (a - b).abs()).sum::<f64>() / 20.0;
        assert!(gap < 0.2, "mean pathwise gap {gap}");
    }

    #[test]
    fn common_noise_rejects_incommensurate_steps() {
        let model = two_regime_cubic();
        let generator = Generator::from_rows(&[vec![-4.0, 4.0], vec![1.0, -1.0]]).unwrap();
        let spec = EnsembleSpec { paths: 2, master_seed: 9, workers: 1 };
        let err = common_noise_terminal(&model, &generator, &[0.5], 1, &[0.015], 0.01, 1.0, spec, &SolverOptions::default());
        assert!(matches!(err, Err(SimulationError::IncommensurateStep { .. })));
    }
}
