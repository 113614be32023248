//! Experiment configuration files.
//!
//! A config is a TOML document:
//!
//! ```toml
//! [model]
//! builtin = "two-regime-cubic"      # or state_dim / noise_dim / [[model.regimes]]
//!
//! [chain]
//! generator = [[-4.0, 4.0], [1.0, -1.0]]
//!
//! [[initial]]
//! x = [0.5]
//! regime = 2                         # 1-based
//!
//! [run]
//! step = 0.01
//! steps = 4000
//! ensemble = 10000
//! seed = 7
//! ```
//!
//! The remaining sections (`[solver]`, `[check]`, `[invariant]`,
//! `[independence]`, `[order]`) are optional; see the README for every key.
//! Regimes are 1-based in files and 0-based in the library.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bem_stepper::SolverOptions;
use crate::hybrid_model::{
    builtin_model, ConstantsDecl, HybridModel, ModelConstants, Monomial, Polynomial, PolynomialModel, RegimePolynomials,
};
use crate::markov_chain::Generator;
use crate::measure_lab::DensityMethod;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub chain: ChainSection,
    #[serde(default)]
    pub initial: Vec<InitialCondition>,
    pub run: RunSection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub invariant: InvariantSection,
    #[serde(default)]
    pub independence: IndependenceSection,
    #[serde(default)]
    pub order: OrderSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub builtin: Option<String>,
    pub state_dim: Option<usize>,
    pub noise_dim: Option<usize>,
    pub regimes: Option<Vec<RegimeSpec>>,
    pub constants: Option<ConstantsDecl>,
}

/// Each polynomial is a list of terms `[coef, e_1, ..., e_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    pub drift: Vec<Vec<Vec<f64>>>,
    /// Row-major `state_dim x noise_dim`.
    pub diffusion: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    pub generator: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialCondition {
    pub x: Vec<f64>,
    /// 1-based.
    pub regime: usize,
    /// Master seed of this initial condition's ensemble; derived from the
    /// run seed when absent.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub step: f64,
    #[serde(default)]
    pub steps: usize,
    #[serde(default = "defaults::ensemble")]
    pub ensemble: usize,
    pub seed: u64,
    #[serde(default = "defaults::p")]
    pub p: f64,
    /// Fraction of a series dropped before fitting.
    #[serde(default = "defaults::burn_in")]
    pub burn_in: f64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: String,
    #[serde(default = "defaults::workers")]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    #[serde(rename = "box", default = "defaults::check_box")]
    pub sampling_box: [f64; 2],
    #[serde(default = "defaults::check_samples")]
    pub samples: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self { sampling_box: defaults::check_box(), samples: defaults::check_samples() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSection {
    /// Spacing `h` of the K-S grid `t_i = i h`.
    #[serde(default = "defaults::grid_step")]
    pub grid_step: f64,
    #[serde(default = "defaults::grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub density: DensityMethod,
    /// 1-based state component used for densities and K-S tests.
    #[serde(default = "defaults::component")]
    pub component: usize,
}

impl Default for InvariantSection {
    fn default() -> Self {
        Self {
            grid_step: defaults::grid_step(),
            grid_points: defaults::grid_points(),
            density: DensityMethod::default(),
            component: defaults::component(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndependenceSection {
    #[serde(default = "defaults::independence_time")]
    pub time: f64,
    /// Atoms per bootstrap subsample.
    #[serde(default = "defaults::subsample")]
    pub subsample: usize,
    #[serde(default = "defaults::resamples")]
    pub resamples: usize,
}

impl Default for IndependenceSection {
    fn default() -> Self {
        Self { time: defaults::independence_time(), subsample: defaults::subsample(), resamples: defaults::resamples() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OrderCoupling {
    /// All step sizes share the reference Brownian and regime paths.
    #[default]
    CommonNoise,
    /// Each step size gets its own ensemble seed.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSection {
    #[serde(default = "defaults::order_steps")]
    pub steps: Vec<f64>,
    #[serde(default = "defaults::reference_step")]
    pub reference_step: f64,
    #[serde(default = "defaults::horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub coupling: OrderCoupling,
}

impl Default for OrderSection {
    fn default() -> Self {
        Self {
            steps: defaults::order_steps(),
            reference_step: defaults::reference_step(),
            horizon: defaults::horizon(),
            coupling: OrderCoupling::default(),
        }
    }
}

mod defaults {
    pub fn ensemble() -> usize {
        1
    }
    pub fn p() -> f64 {
        0.5
    }
    pub fn burn_in() -> f64 {
        0.2
    }
    pub fn output_dir() -> String {
        "out".into()
    }
    pub fn workers() -> usize {
        1
    }
    pub fn check_box() -> [f64; 2] {
        [-10.0, 10.0]
    }
    pub fn check_samples() -> usize {
        10_000
    }
    pub fn grid_step() -> f64 {
        0.2
    }
    pub fn grid_points() -> usize {
        201
    }
    pub fn component() -> usize {
        1
    }
    pub fn independence_time() -> f64 {
        40.0
    }
    pub fn subsample() -> usize {
        2048
    }
    pub fn resamples() -> usize {
        8
    }
    pub fn order_steps() -> Vec<f64> {
        vec![0.02, 0.01, 0.005]
    }
    pub fn reference_step() -> f64 {
        0.00125
    }
    pub fn horizon() -> f64 {
        40.0
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    /// SHA-256 of the config with `workers` and `output_dir` blanked, so the
    /// hash names the experiment rather than where or how fast it ran.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run.workers = 0;
        canonical.run.output_dir.clear();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// A validated config with its model and generator built.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: PolynomialModel,
    pub model_id: String,
    pub generator: Generator,
    /// Resolved constants, when the model declares them.
    pub constants: Option<ModelConstants>,
}

fn polynomial(terms: &[Vec<f64>], dim: usize, field: &str) -> Result<Polynomial, ConfigError> {
    let mut out = Vec::with_capacity(terms.len());
    for (t, term) in terms.iter().enumerate() {
        if term.len() != dim + 1 {
            return Err(invalid(field, format!("term {} needs 1 coefficient and {dim} exponents, got {} numbers", t + 1, term.len())));
        }
        if !term[0].is_finite() {
            return Err(invalid(field, format!("term {} has a non-finite coefficient", t + 1)));
        }
        let mut exps = Vec::with_capacity(dim);
        for &e in &term[1..] {
            if !(e >= 0.0 && e.fract() == 0.0 && e <= 64.0) {
                return Err(invalid(field, format!("term {} has exponent {e}; exponents must be integers in 0..=64", t + 1)));
            }
            exps.push(e as u32);
        }
        out.push(Monomial { coef: term[0], exps });
    }
    Ok(Polynomial::new(out))
}

fn build_model(section: &ModelSection) -> Result<(PolynomialModel, String), ConfigError> {
    if let Some(name) = &section.builtin {
        if section.state_dim.is_some() || section.noise_dim.is_some() || section.regimes.is_some() {
            return Err(invalid("model", "`builtin` cannot be combined with state_dim, noise_dim or regimes"));
        }
        let model = builtin_model(name).map_err(|e| invalid("model.builtin", e.to_string()))?;
        let model = match &section.constants {
            Some(decl) => model.with_constants(Some(decl.clone())),
            None => model,
        };
        return Ok((model, name.clone()));
    }
    let state_dim = section.state_dim.ok_or_else(|| invalid("model.state_dim", "missing (or set model.builtin)"))?;
    let noise_dim = section.noise_dim.ok_or_else(|| invalid("model.noise_dim", "missing (or set model.builtin)"))?;
    let specs = section.regimes.as_ref().ok_or_else(|| invalid("model.regimes", "missing (or set model.builtin)"))?;
    let mut regimes = Vec::with_capacity(specs.len());
    for (r, spec) in specs.iter().enumerate() {
        let field = |part: &str, k: usize| format!("model.regimes[{}].{part}[{}]", r + 1, k + 1);
        let drift = spec.drift.iter().enumerate().map(|(k, p)| polynomial(p, state_dim, &field("drift", k))).collect::<Result<_, _>>()?;
        let diffusion =
            spec.diffusion.iter().enumerate().map(|(k, p)| polynomial(p, state_dim, &field("diffusion", k))).collect::<Result<_, _>>()?;
        regimes.push(RegimePolynomials { drift, diffusion });
    }
    let model =
        PolynomialModel::new(state_dim, noise_dim, regimes, section.constants.clone()).map_err(|e| invalid("model", e.to_string()))?;
    Ok((model, "polynomial".into()))
}

fn check_times(field: &str, times: &[f64], step: f64) -> Result<(), ConfigError> {
    crate::simulator::grid_indices(times, step).map(|_| ()).map_err(|e| invalid(field, e.to_string()))
}

impl Experiment {
    pub fn from_config(config: ExperimentConfig) -> Result<Self, ConfigError> {
        let (model, model_id) = build_model(&config.model)?;
        let generator = Generator::from_rows(&config.chain.generator).map_err(|e| invalid("chain.generator", e.to_string()))?;
        if generator.state_count() != model.regime_count() {
            return Err(invalid(
                "chain.generator",
                format!("{} states but the model has {} regimes", generator.state_count(), model.regime_count()),
            ));
        }
        let constants = model
            .declared_constants()
            .map(|decl| ModelConstants::resolve(&model, decl))
            .transpose()
            .map_err(|e| invalid("model.constants", e.to_string()))?;
        let run = &config.run;
        if !(run.step > 0.0 && run.step.is_finite()) {
            return Err(invalid("run.step", format!("must be positive, got {}", run.step)));
        }
        if run.ensemble == 0 {
            return Err(invalid("run.ensemble", "must be at least 1"));
        }
        if !(run.p > 0.0 && run.p.is_finite()) {
            return Err(invalid("run.p", format!("must be positive, got {}", run.p)));
        }
        if !(0.0..1.0).contains(&run.burn_in) {
            return Err(invalid("run.burn_in", format!("must lie in [0, 1), got {}", run.burn_in)));
        }
        check_times("run.snapshot_times", &run.snapshot_times, run.step)?;
        for (k, ic) in config.initial.iter().enumerate() {
            let field = format!("initial[{}]", k + 1);
            if ic.x.len() != model.state_dim() {
                return Err(invalid(&format!("{field}.x"), format!("needs {} components, got {}", model.state_dim(), ic.x.len())));
            }
            if ic.x.iter().any(|v| !v.is_finite()) {
                return Err(invalid(&format!("{field}.x"), "components must be finite"));
            }
            if ic.regime == 0 || ic.regime > model.regime_count() {
                return Err(invalid(&format!("{field}.regime"), format!("must lie in 1..={}, got {}", model.regime_count(), ic.regime)));
            }
        }
        config.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
        let [lo, hi] = config.check.sampling_box;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(invalid("check.box", format!("needs lo < hi, got [{lo}, {hi}]")));
        }
        let inv = &config.invariant;
        if !(inv.grid_step > 0.0) || inv.grid_points < 2 {
            return Err(invalid("invariant", "grid_step must be positive and grid_points at least 2"));
        }
        if inv.component == 0 || inv.component > model.state_dim() {
            return Err(invalid("invariant.component", format!("must lie in 1..={}", model.state_dim())));
        }
        let ind = &config.independence;
        if ind.subsample == 0 || ind.resamples == 0 {
            return Err(invalid("independence", "subsample and resamples must be at least 1"));
        }
        Ok(Self { config, model, model_id, generator, constants })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_config(ExperimentConfig::load(path)?)
    }

    /// Initial conditions as `(x, 0-based regime, seed)`, deriving missing
    /// seeds from the run seed and the position in the list.
    pub fn initial_conditions(&self) -> Vec<(Vec<f64>, usize, u64)> {
        self.config
            .initial
            .iter()
            .enumerate()
            .map(|(k, ic)| {
                let seed = ic.seed.unwrap_or_else(|| crate::rng::derive_seed(self.config.run.seed, k as u64));
                (ic.x.clone(), ic.regime - 1, seed)
            })
            .collect()
    }
}
