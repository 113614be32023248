//! The experiments behind each CLI subcommand.
//!
//! Every command is a pure function of the validated config: it writes its
//! artifacts into the output directory and returns the summary that is also
//! saved as JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Experiment, OrderCoupling};
use crate::hybrid_model::{
    check_assumption3, estimate_polynomial_lipschitz, falsify_constants, max_step_size, HybridModel, InequalityKind, LipschitzEstimate,
    ModelConstants, ModelError, SamplingBox, SwitchingCondition, Violation,
};
use crate::markov_chain::{stationary_distribution, transition_matrix, ChainError, TransitionMatrix};
use crate::measure_lab::{
    bootstrap_wasserstein, decay_slope, empirical_density, ks_two_sample, linear_fit, BootstrapSummary, DecayFit, EmpiricalMeasure,
    MeasureError,
};
use crate::output::{num, numbered, time_label, write_json, CsvWriter, Provenance, VERSION};
use crate::rng::{derive_seed, SeedRecord};
use crate::simulator::{
    common_noise_terminal, coupling_distance_series, ensemble_snapshots, grid_indices, simulate, EnsembleSpec, SimulationError,
    SnapshotEnsemble,
};

/// Significance level of the consecutive K-S tests.
pub const KS_ALPHA: f64 = 0.05;
/// Pairwise distances up to this multiple of the noise floor count as equal laws.
pub const INDEPENDENCE_FACTOR: f64 = 3.0;
/// Distances within this multiple of the noise floor make an order fit unreliable.
pub const ORDER_FLOOR_FACTOR: f64 = 2.0;
/// Accepted band for the fitted order slope.
pub const ORDER_SLOPE_BAND: (f64, f64) = (0.1, 0.5);
const VIOLATIONS_REPORTED: usize = 20;
// Key offset for bootstrap seeds, away from the initial-condition seeds.
const BOOTSTRAP_KEY: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("step {step} is not below the maximal step size {max_step}; pass --allow-unstable-step to run anyway")]
    UnstableStep { step: f64, max_step: f64 },
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("output error: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// 2 for configuration problems, 4 for numerical failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::UnstableStep { .. } | Self::Precondition(_) | Self::Model(_) | Self::Chain(_) => 2,
            Self::Simulation(_) | Self::Measure(_) => 4,
            Self::Io(_) => 1,
        }
    }
}

/// Where artifacts go and whether the step-size bound is enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub allow_unstable_step: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), allow_unstable_step: false }
    }
}

fn provenance(exp: &Experiment) -> Provenance {
    Provenance { config_sha256: exp.config.hash(), seed: exp.config.run.seed, version: VERSION.to_string(), model: exp.model_id.clone() }
}

fn prepare(dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn check_step(exp: &Experiment, step: f64, opts: &RunOptions) -> Result<(), ExperimentError> {
    if let Some(c) = &exp.constants {
        let max_step = max_step_size(c);
        if !(step < max_step) && !opts.allow_unstable_step {
            return Err(ExperimentError::UnstableStep { step, max_step });
        }
    }
    Ok(())
}

fn ensemble(exp: &Experiment, master_seed: u64) -> EnsembleSpec {
    EnsembleSpec { paths: exp.config.run.ensemble, master_seed, workers: exp.config.run.workers.max(1) }
}

fn need_initial(exp: &Experiment, count: usize) -> Result<Vec<(Vec<f64>, usize, u64)>, ExperimentError> {
    let ics = exp.initial_conditions();
    if ics.len() < count {
        return Err(ExperimentError::Precondition(format!("this command needs at least {count} [[initial]] entries, found {}", ics.len())));
    }
    Ok(ics)
}

fn main_chain(exp: &Experiment) -> Result<TransitionMatrix, ExperimentError> {
    Ok(transition_matrix(&exp.generator, exp.config.run.step)?)
}

// ---------------------------------------------------------------- check

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub model: String,
    pub stationary: Vec<f64>,
    pub constants: ModelConstants,
    pub switching: SwitchingCondition,
    pub step: f64,
    pub max_step_size: f64,
    pub step_ok: bool,
    pub lipschitz_estimate: LipschitzEstimate,
    pub sampling_box: [f64; 2],
    pub samples: usize,
    pub violation_counts: BTreeMap<String, usize>,
    /// The first few counterexamples.
    pub violations: Vec<Violation>,
    pub passes: bool,
}

fn kind_name(kind: InequalityKind) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Evaluates the switching condition, the step bound and sampled
/// falsification of the declared constants. Writes `check.json`.
pub fn cmd_check(exp: &Experiment, opts: &RunOptions) -> Result<CheckReport, ExperimentError> {
    let constants = exp
        .constants
        .clone()
        .ok_or_else(|| ConfigError::Invalid { field: "model.constants".into(), message: "check needs declared constants".into() })?;
    let mu = stationary_distribution(&exp.generator)?;
    let switching = check_assumption3(&constants.n, &mu);
    let [lo, hi] = exp.config.check.sampling_box;
    let bx = SamplingBox::new(lo, hi)?;
    let samples = exp.config.check.samples;
    let seed = exp.config.run.seed;
    let estimate = estimate_polynomial_lipschitz(&exp.model, bx, samples, seed)?;
    let found = falsify_constants(&exp.model, &constants, Some(&estimate.a), bx, samples, seed)?;
    let mut violation_counts = BTreeMap::new();
    for v in &found {
        *violation_counts.entry(kind_name(v.kind)).or_insert(0) += 1;
    }
    let max_step = max_step_size(&constants);
    let step = exp.config.run.step;
    let step_ok = step < max_step;
    let report = CheckReport {
        model: exp.model_id.clone(),
        stationary: mu.probs.clone(),
        passes: switching.passes && found.is_empty() && step_ok,
        constants,
        switching,
        step,
        max_step_size: max_step,
        step_ok,
        lipschitz_estimate: estimate,
        sampling_box: [lo, hi],
        samples,
        violation_counts,
        violations: found.into_iter().take(VIOLATIONS_REPORTED).collect(),
    };
    prepare(&opts.out_dir)?;
    write_json(&opts.out_dir.join("check.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySummary {
    /// 1-based position in the `[[initial]]` list.
    pub initial: usize,
    pub seed: u64,
    pub file: String,
    pub steps: usize,
    pub final_state: Vec<f64>,
    /// 1-based.
    pub final_regime: usize,
    pub max_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub model: String,
    pub step: f64,
    pub trajectories: Vec<TrajectorySummary>,
}

/// One trajectory CSV per initial condition: `k,t,x1..xn,regime`.
pub fn cmd_simulate(exp: &Experiment, opts: &RunOptions) -> Result<SimulateReport, ExperimentError> {
    let run = &exp.config.run;
    check_step(exp, run.step, opts)?;
    let ics = need_initial(exp, 1)?;
    let tm = main_chain(exp)?;
    let prov = provenance(exp);
    prepare(&opts.out_dir)?;
    let dim = exp.model.state_dim();
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend(numbered("x", dim));
    header.push("regime".into());
    let mut trajectories = Vec::new();
    for (k, (x0, i0, seed)) in ics.iter().enumerate() {
        let traj = simulate(&exp.model, &tm, x0, *i0, run.steps, SeedRecord::new(*seed, 0), &exp.config.solver)?;
        let file = format!("trajectory_{}.csv", k + 1);
        let mut w = CsvWriter::create(&opts.out_dir.join(&file), &prov, &header)?;
        let mut max_norm: f64 = 0.0;
        for step in 0..traj.len() {
            let x = traj.state(step);
            max_norm = max_norm.max(x.iter().map(|v| v * v).sum::<f64>().sqrt());
            let mut row = vec![step.to_string(), num(step as f64 * run.step)];
            row.extend(x.iter().map(|&v| num(v)));
            row.push((traj.chain.states[step] + 1).to_string());
            w.row(&row)?;
        }
        w.finish()?;
        trajectories.push(TrajectorySummary {
            initial: k + 1,
            seed: *seed,
            file,
            steps: run.steps,
            final_state: traj.state(traj.len() - 1).to_vec(),
            final_regime: traj.chain.states[traj.len() - 1] + 1,
            max_norm,
        });
    }
    let report = SimulateReport { model: exp.model_id.clone(), step: run.step, trajectories };
    write_json(&opts.out_dir.join("simulate.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- invariant

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensitySummary {
    pub time: f64,
    pub snapshot_file: String,
    pub density_file: String,
    pub integral: f64,
    pub mean_square: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantReport {
    pub model: String,
    pub step: f64,
    pub paths: usize,
    pub failed_paths: usize,
    pub component: usize,
    pub grid_step: f64,
    pub grid_points: usize,
    pub alpha: f64,
    /// Statistic and p-value of each test between `t_{i-1}` and `t_i`.
    pub ks_statistics: Vec<f64>,
    pub ks_p_values: Vec<f64>,
    /// First grid time after which every consecutive p-value exceeds `alpha`.
    pub t_star: Option<f64>,
    /// Share of tests after `t_star` whose p-value exceeds `alpha`.
    pub fraction_above_alpha_after_t_star: Option<f64>,
    pub fraction_above_alpha: f64,
    pub densities: Vec<DensitySummary>,
    pub protocol: String,
}

/// First index `i` such that every p-value of the tests `(t_{j-1}, t_j)`,
/// `j > i`, exceeds `alpha`. `p_values[j - 1]` belongs to test `j`.
pub fn stationarity_index(p_values: &[f64], alpha: f64) -> Option<usize> {
    if p_values.last().is_none_or(|&p| p <= alpha) {
        return None;
    }
    let last_reject = p_values.iter().rposition(|&p| p <= alpha);
    Some(last_reject.map_or(0, |j| j + 1))
}

fn write_snapshot(path: &Path, prov: &Provenance, snap: &SnapshotEnsemble) -> Result<(), ExperimentError> {
    let mut header = vec!["path_id".to_string()];
    header.extend(numbered("x", snap.dim));
    header.push("regime".into());
    let mut w = CsvWriter::create(path, prov, &header)?;
    for m in 0..snap.len() {
        let (x, r) = snap.atom(m);
        let mut row = vec![snap.path_ids[m].to_string()];
        row.extend(x.iter().map(|&v| num(v)));
        row.push((r + 1).to_string());
        w.row(&row)?;
    }
    w.finish()?;
    Ok(())
}

/// Snapshots, density tables and the consecutive K-S sequence from the first
/// initial condition.
pub fn cmd_invariant(exp: &Experiment, opts: &RunOptions) -> Result<InvariantReport, ExperimentError> {
    let run = &exp.config.run;
    let inv = &exp.config.invariant;
    check_step(exp, run.step, opts)?;
    let (x0, i0, seed) = need_initial(exp, 1)?.swap_remove(0);
    let tm = main_chain(exp)?;
    let grid: Vec<f64> = (0..inv.grid_points).map(|i| i as f64 * inv.grid_step).collect();
    let grid_idx =
        grid_indices(&grid, run.step).map_err(|e| ConfigError::Invalid { field: "invariant.grid_step".into(), message: e.to_string() })?;
    let density_idx = grid_indices(&run.snapshot_times, run.step)?;
    // one ensemble covers both time sets
    let mut by_index: BTreeMap<usize, f64> = BTreeMap::new();
    for (&k, &t) in grid_idx.iter().zip(&grid) {
        by_index.insert(k, t);
    }
    for (&k, &t) in density_idx.iter().zip(&run.snapshot_times) {
        by_index.insert(k, t);
    }
    let times: Vec<f64> = by_index.values().copied().collect();
    let snaps = ensemble_snapshots(&exp.model, &tm, &x0, i0, &times, ensemble(exp, seed), &exp.config.solver)?;
    let at = |k: usize| &snaps[by_index.keys().position(|&j| j == k).expect("time was requested")];
    let component = inv.component - 1;

    let prov = provenance(exp);
    prepare(&opts.out_dir)?;
    let mut densities = Vec::new();
    for (&k, &t) in density_idx.iter().zip(&run.snapshot_times) {
        let snap = at(k);
        let label = time_label(t);
        let snapshot_file = format!("snapshot_{label}.csv");
        write_snapshot(&opts.out_dir.join(&snapshot_file), &prov, snap)?;
        let table = empirical_density(&snap.component(component), inv.density)?;
        let density_file = format!("density_{label}.csv");
        let mut w = CsvWriter::create(&opts.out_dir.join(&density_file), &prov, &["x".into(), "density".into()])?;
        for (g, d) in table.grid.iter().zip(&table.density) {
            w.row(&[num(*g), num(*d)])?;
        }
        w.finish()?;
        let mean_square = crate::measure_lab::moment(&snap.states, snap.dim, 2)?.mean;
        densities.push(DensitySummary { time: t, snapshot_file, density_file, integral: table.integral(), mean_square });
    }

    let mut statistics = Vec::with_capacity(grid.len() - 1);
    let mut p_values = Vec::with_capacity(grid.len() - 1);
    let mut w = CsvWriter::create(
        &opts.out_dir.join("ks_sequence.csv"),
        &prov,
        &["i".into(), "t_prev".into(), "t".into(), "statistic".into(), "p_value".into()],
    )?;
    for j in 1..grid.len() {
        let ks = ks_two_sample(&at(grid_idx[j - 1]).component(component), &at(grid_idx[j]).component(component))?;
        w.row(&[j.to_string(), num(grid[j - 1]), num(grid[j]), num(ks.statistic), num(ks.p_value)])?;
        statistics.push(ks.statistic);
        p_values.push(ks.p_value);
    }
    w.finish()?;
    let star = stationarity_index(&p_values, KS_ALPHA);
    let above = |ps: &[f64]| ps.iter().filter(|&&p| p > KS_ALPHA).count() as f64 / ps.len().max(1) as f64;
    let report = InvariantReport {
        model: exp.model_id.clone(),
        step: run.step,
        paths: snaps[0].provenance.paths,
        failed_paths: snaps[0].provenance.failed_paths,
        component: inv.component,
        grid_step: inv.grid_step,
        grid_points: inv.grid_points,
        alpha: KS_ALPHA,
        t_star: star.map(|i| grid[i]),
        fraction_above_alpha_after_t_star: star.map(|i| above(&p_values[i..])),
        fraction_above_alpha: above(&p_values),
        ks_statistics: statistics,
        ks_p_values: p_values,
        densities,
        protocol: "One ensemble is recorded at every grid time t_i = i h; consecutive snapshots share their paths. \
                   The invariant law is estimated by the ensemble at grid times after t_star."
            .into(),
    };
    write_json(&opts.out_dir.join("invariant.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- initial independence

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDistance {
    /// 1-based positions in the `[[initial]]` list.
    pub a: usize,
    pub b: usize,
    pub mean: f64,
    pub sd: f64,
    pub ratio_to_floor: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndependenceReport {
    pub model: String,
    pub time: f64,
    pub step: f64,
    pub p: f64,
    pub paths: usize,
    pub subsample: usize,
    pub resamples: usize,
    pub initial: Vec<(Vec<f64>, usize)>,
    pub seeds: Vec<u64>,
    /// `W_p` between the two halves of the first ensemble.
    pub noise_floor: BootstrapSummary,
    pub pairs: Vec<PairDistance>,
    pub factor: f64,
    pub max_ratio: f64,
    pub all_within_bound: bool,
}

fn ratio(value: f64, floor: f64) -> f64 {
    if floor > 0.0 {
        value / floor
    } else if value == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn check_p_unit(p: f64) -> Result<(), ExperimentError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid { field: "run.p".into(), message: format!("W_p needs p in (0, 1), got {p}") }.into())
    }
}

/// Pairwise `W_p` between the ensembles started from each initial condition,
/// compared with the same-law noise floor.
pub fn cmd_initial_independence(exp: &Experiment, opts: &RunOptions) -> Result<IndependenceReport, ExperimentError> {
    let run = &exp.config.run;
    let ind = &exp.config.independence;
    check_step(exp, run.step, opts)?;
    check_p_unit(run.p)?;
    let ics = need_initial(exp, 2)?;
    if run.ensemble < 2 {
        return Err(ExperimentError::Precondition("the noise floor needs an ensemble of at least 2 paths".into()));
    }
    grid_indices(&[ind.time], run.step).map_err(|e| ConfigError::Invalid { field: "independence.time".into(), message: e.to_string() })?;
    let tm = main_chain(exp)?;
    let mut measures = Vec::with_capacity(ics.len());
    for (x0, i0, seed) in &ics {
        let snap = ensemble_snapshots(&exp.model, &tm, x0, *i0, &[ind.time], ensemble(exp, *seed), &exp.config.solver)?.swap_remove(0);
        measures.push(EmpiricalMeasure::from_snapshot(&snap)?);
    }
    let size = ind.subsample.min(run.ensemble / 2);
    let workers = run.workers.max(1);
    let (first, second) = measures[0].halves()?;
    let noise_floor = bootstrap_wasserstein(&first, &second, run.p, size, ind.resamples, derive_seed(run.seed, BOOTSTRAP_KEY), workers)?;
    let mut pairs = Vec::new();
    let mut key = BOOTSTRAP_KEY + 1;
    for a in 0..measures.len() {
        for b in a + 1..measures.len() {
            let w = bootstrap_wasserstein(&measures[a], &measures[b], run.p, size, ind.resamples, derive_seed(run.seed, key), workers)?;
            key += 1;
            let r = ratio(w.mean, noise_floor.mean);
            pairs.push(PairDistance {
                a: a + 1,
                b: b + 1,
                mean: w.mean,
                sd: w.sd,
                ratio_to_floor: r,
                within_bound: r <= INDEPENDENCE_FACTOR,
            });
        }
    }
    let prov = provenance(exp);
    prepare(&opts.out_dir)?;
    let mut w = CsvWriter::create(
        &opts.out_dir.join("independence_pairs.csv"),
        &prov,
        &["a".into(), "b".into(), "w_mean".into(), "w_sd".into(), "ratio_to_floor".into()],
    )?;
    for pair in &pairs {
        w.row(&[pair.a.to_string(), pair.b.to_string(), num(pair.mean), num(pair.sd), num(pair.ratio_to_floor)])?;
    }
    w.finish()?;
    let report = IndependenceReport {
        model: exp.model_id.clone(),
        time: ind.time,
        step: run.step,
        p: run.p,
        paths: run.ensemble,
        subsample: size,
        resamples: ind.resamples,
        initial: ics.iter().map(|(x, i, _)| (x.clone(), i + 1)).collect(),
        seeds: ics.iter().map(|ic| ic.2).collect(),
        max_ratio: pairs.iter().map(|p| p.ratio_to_floor).fold(0.0, f64::max),
        all_within_bound: pairs.iter().all(|p| p.within_bound),
        factor: INDEPENDENCE_FACTOR,
        noise_floor,
        pairs,
    };
    write_json(&opts.out_dir.join("independence.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- coupling decay

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub model: String,
    pub step: f64,
    pub steps: usize,
    pub p: f64,
    pub paths: usize,
    pub failed_paths: usize,
    pub burn_in: f64,
    /// Length of the fitted prefix; the series is cut where the mean first
    /// reaches zero.
    pub fitted_length: usize,
    pub fit: Option<DecayFit>,
    /// `-slope` of the fit.
    pub gamma_hat: Option<f64>,
    pub note: Option<String>,
}

/// Mean `|X_k - Y_k|^p` over coupled pairs from the first two initial
/// conditions, with a log-linear fit.
pub fn cmd_coupling_decay(exp: &Experiment, opts: &RunOptions) -> Result<DecayReport, ExperimentError> {
    let run = &exp.config.run;
    check_step(exp, run.step, opts)?;
    if let Some(c) = &exp.constants {
        if !(run.p < 4.0 / c.q) {
            return Err(ConfigError::Invalid { field: "run.p".into(), message: format!("needs p < 4/q = {}", 4.0 / c.q) }.into());
        }
    }
    let ics = need_initial(exp, 2)?;
    let tm = main_chain(exp)?;
    let series = coupling_distance_series(
        &exp.model,
        &tm,
        (&ics[0].0, ics[0].1),
        (&ics[1].0, ics[1].1),
        run.steps,
        run.p,
        ensemble(exp, run.seed),
        &exp.config.solver,
    )?;
    let prov = provenance(exp);
    prepare(&opts.out_dir)?;
    let mut w =
        CsvWriter::create(&opts.out_dir.join("coupling_decay.csv"), &prov, &["k".into(), "t".into(), "mean_dp".into(), "std_err".into()])?;
    for (k, (m, se)) in series.mean.iter().zip(&series.std_err).enumerate() {
        w.row(&[k.to_string(), num(k as f64 * run.step), num(*m), num(*se)])?;
    }
    w.finish()?;
    let fitted_length = series.mean.iter().position(|&m| !(m > 0.0)).unwrap_or(series.mean.len());
    let (fit, note) = match decay_slope(&series.mean[..fitted_length], run.step, run.burn_in) {
        Ok(fit) => (Some(fit), None),
        Err(e) => (None, Some(format!("fit skipped: {e}"))),
    };
    let report = DecayReport {
        model: exp.model_id.clone(),
        step: run.step,
        steps: run.steps,
        p: run.p,
        paths: series.paths,
        failed_paths: series.failed_paths,
        burn_in: run.burn_in,
        fitted_length,
        gamma_hat: fit.map(|f| -f.slope),
        fit,
        note,
    };
    write_json(&opts.out_dir.join("coupling_decay.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- wasserstein order

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderVerdict {
    /// The slope lies in the accepted band.
    OrderConsistent,
    /// The slope is outside the band but the distances are within the
    /// noise-floor multiple, so the fit cannot resolve the order.
    NoiseFloorLimited,
    /// The slope is outside the band and the distances are resolved.
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderLevel {
    pub step: f64,
    pub mean: f64,
    pub sd: f64,
    pub ratio_to_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub model: String,
    pub p: f64,
    pub reference_step: f64,
    pub horizon: f64,
    pub paths: usize,
    pub failed_paths: usize,
    pub coupling: OrderCoupling,
    pub subsample: usize,
    pub resamples: usize,
    pub levels: Vec<OrderLevel>,
    /// `W_p` between the two halves of the reference ensemble.
    pub noise_floor: BootstrapSummary,
    pub slope: f64,
    /// Spread of the slope refitted on each bootstrap resample.
    pub slope_sd: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub expected_slope: f64,
    pub slope_band: (f64, f64),
    pub near_noise_floor: bool,
    pub warning: Option<String>,
    pub verdict: OrderVerdict,
}

/// Fits `log W_p(pi^step, pi^reference)` against `log step`.
pub fn cmd_wasserstein_order(exp: &Experiment, opts: &RunOptions) -> Result<OrderReport, ExperimentError> {
    let run = &exp.config.run;
    let order = &exp.config.order;
    let ind = &exp.config.independence;
    check_p_unit(run.p)?;
    let mut distinct = order.steps.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(ExperimentError::Precondition(format!("the order fit needs at least 3 distinct step sizes, got {:?}", order.steps)));
    }
    let smallest = distinct[0];
    if !(order.reference_step > 0.0 && order.reference_step <= smallest / 4.0 * (1.0 + 1e-12)) {
        return Err(ConfigError::Invalid {
            field: "order.reference_step".into(),
            message: format!("must be positive and at most {} (a quarter of the smallest step)", smallest / 4.0),
        }
        .into());
    }
    for &s in order.steps.iter().chain([&order.reference_step]) {
        check_step(exp, s, opts)?;
    }
    if run.ensemble < 2 {
        return Err(ExperimentError::Precondition("the noise floor needs an ensemble of at least 2 paths".into()));
    }
    let (x0, i0, seed) = need_initial(exp, 1)?.swap_remove(0);
    let spec = ensemble(exp, seed);
    let terminal = match order.coupling {
        OrderCoupling::CommonNoise => common_noise_terminal(
            &exp.model,
            &exp.generator,
            &x0,
            i0,
            &order.steps,
            order.reference_step,
            order.horizon,
            spec,
            &exp.config.solver,
        )?,
        OrderCoupling::Independent => {
            let mut out = Vec::with_capacity(order.steps.len() + 1);
            for (l, &s) in order.steps.iter().chain([&order.reference_step]).enumerate() {
                let tm = transition_matrix(&exp.generator, s)?;
                let level_spec = EnsembleSpec { master_seed: derive_seed(seed, l as u64 + 1), ..spec };
                out.push(ensemble_snapshots(&exp.model, &tm, &x0, i0, &[order.horizon], level_spec, &exp.config.solver)?.swap_remove(0));
            }
            out
        }
    };
    let failed_paths = terminal.iter().map(|s| s.provenance.failed_paths).max().unwrap_or(0);
    let reference = EmpiricalMeasure::from_snapshot(terminal.last().expect("reference level"))?;
    let size = ind.subsample.min(run.ensemble / 2);
    let workers = run.workers.max(1);
    let (first, second) = reference.halves()?;
    let noise_floor = bootstrap_wasserstein(&first, &second, run.p, size, ind.resamples, derive_seed(run.seed, BOOTSTRAP_KEY), workers)?;
    let mut summaries = Vec::with_capacity(order.steps.len());
    for (l, snap) in terminal[..order.steps.len()].iter().enumerate() {
        let level = EmpiricalMeasure::from_snapshot(snap)?;
        let key = derive_seed(run.seed, BOOTSTRAP_KEY + 1 + l as u64);
        summaries.push(bootstrap_wasserstein(&level, &reference, run.p, size, ind.resamples, key, workers)?);
    }
    let log_steps: Vec<f64> = order.steps.iter().map(|s| s.ln()).collect();
    if let Some((l, _)) = summaries.iter().enumerate().find(|(_, w)| !(w.mean > 0.0)) {
        return Err(MeasureError::NonPositiveValues { index: l, value: summaries[l].mean }.into());
    }
    let fit = linear_fit(&log_steps, &summaries.iter().map(|w| w.mean.ln()).collect::<Vec<_>>())?;
    let resample_slopes: Vec<f64> = (0..ind.resamples)
        .filter_map(|r| {
            let ys: Option<Vec<f64>> = summaries.iter().map(|w| (w.values[r] > 0.0).then(|| w.values[r].ln())).collect();
            linear_fit(&log_steps, &ys?).ok().map(|f| f.slope)
        })
        .collect();
    let slope_sd = if resample_slopes.len() > 1 {
        let k = resample_slopes.len() as f64;
        let m = resample_slopes.iter().sum::<f64>() / k;
        (resample_slopes.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    let levels: Vec<OrderLevel> = order
        .steps
        .iter()
        .zip(&summaries)
        .map(|(&step, w)| OrderLevel { step, mean: w.mean, sd: w.sd, ratio_to_floor: ratio(w.mean, noise_floor.mean) })
        .collect();
    let near_noise_floor = levels.iter().any(|l| l.ratio_to_floor <= ORDER_FLOOR_FACTOR);
    let in_band = fit.slope >= ORDER_SLOPE_BAND.0 && fit.slope <= ORDER_SLOPE_BAND.1;
    let verdict = if in_band {
        OrderVerdict::OrderConsistent
    } else if near_noise_floor {
        OrderVerdict::NoiseFloorLimited
    } else {
        OrderVerdict::Inconsistent
    };
    let warning = near_noise_floor.then(|| {
        format!("some distances are within {ORDER_FLOOR_FACTOR}x the noise floor {:.4e}; the fit may be unreliable", noise_floor.mean)
    });

    let prov = provenance(exp);
    prepare(&opts.out_dir)?;
    let mut w = CsvWriter::create(
        &opts.out_dir.join("wasserstein_order.csv"),
        &prov,
        &["step".into(), "w_mean".into(), "w_sd".into(), "ratio_to_floor".into()],
    )?;
    for l in &levels {
        w.row(&[num(l.step), num(l.mean), num(l.sd), num(l.ratio_to_floor)])?;
    }
    w.finish()?;
    let report = OrderReport {
        model: exp.model_id.clone(),
        p: run.p,
        reference_step: order.reference_step,
        horizon: order.horizon,
        paths: run.ensemble,
        failed_paths,
        coupling: order.coupling,
        subsample: size,
        resamples: ind.resamples,
        levels,
        noise_floor,
        slope: fit.slope,
        slope_sd,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        expected_slope: run.p / 2.0,
        slope_band: ORDER_SLOPE_BAND,
        near_noise_floor,
        warning,
        verdict,
    };
    write_json(&opts.out_dir.join("wasserstein_order.json"), &report)?;
    Ok(report)
}
