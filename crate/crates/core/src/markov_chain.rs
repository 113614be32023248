//! Continuous-time Markov chain machinery for the switching process.
//!
//! Regimes are 0-based indices everywhere in the library. Configuration files
//! and CSV outputs use the 1-based labels `1..=N`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::rng::{SeedRecord, Stream};

const ROW_SUM_TOL: f64 = 1e-12;
const RENORMALIZE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("generator must be a non-empty square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("generator entry ({}, {}) is not finite", .row + 1, .col + 1)]
    NonFinite { row: usize, col: usize },
    #[error("negative off-diagonal rate {value} at ({}, {})", .row + 1, .col + 1)]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("generator row {} sums to {sum:e}, expected 0", .row + 1)]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("generator is reducible: state {} cannot reach state {}", .from + 1, .to + 1)]
    Reducible { from: usize, to: usize },
    #[error("stationary system is numerically singular")]
    SingularSystem,
    #[error("step size must be finite and non-negative, got {0}")]
    InvalidStep(f64),
    #[error("transition matrix row {} sums to {sum}, beyond renormalization tolerance", .row + 1)]
    RowSumDrift { row: usize, sum: f64 },
    #[error("regime {regime} out of range for a {states}-state chain (0-based)")]
    RegimeOutOfRange { regime: usize, states: usize },
}

/// A validated conservative, irreducible rate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    rates: DMatrix<f64>,
}

impl Generator {
    /// Validates a row-major list of rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let n = rows.len();
        if n == 0 {
            return Err(ChainError::NotSquare { rows: 0, cols: 0 });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(ChainError::NotSquare { rows: n, cols: bad.len() });
        }
        let rates = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        validate_generator(rates)
    }

    pub fn state_count(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.state_count()).map(|i| self.rates.row(i).iter().copied().collect()).collect()
    }
}

/// Checks sign, conservativeness and irreducibility of a rate matrix.
pub fn validate_generator(rates: DMatrix<f64>) -> Result<Generator, ChainError> {
    let (rows, cols) = rates.shape();
    if rows == 0 || rows != cols {
        return Err(ChainError::NotSquare { rows, cols });
    }
    for i in 0..rows {
        let mut sum = 0.0;
        for j in 0..cols {
            let v = rates[(i, j)];
            if !v.is_finite() {
                return Err(ChainError::NonFinite { row: i, col: j });
            }
            if i != j && v < 0.0 {
                return Err(ChainError::NegativeOffDiagonal { row: i, col: j, value: v });
            }
            sum += v;
        }
        if sum.abs() > ROW_SUM_TOL {
            return Err(ChainError::RowSumNonzero { row: i, sum });
        }
    }
    check_irreducible(&rates)?;
    Ok(Generator { rates })
}

// Strong connectivity of the off-diagonal support graph: everything reachable
// from state 0 forwards and backwards.
fn check_irreducible(rates: &DMatrix<f64>) -> Result<(), ChainError> {
    let n = rates.nrows();
    let reach = |forward: bool| -> Vec<bool> {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for w in 0..n {
                let rate = if forward { rates[(u, w)] } else { rates[(w, u)] };
                if w != u && rate > 0.0 && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    };
    if let Some(to) = reach(true).iter().position(|s| !s) {
        return Err(ChainError::Reducible { from: 0, to });
    }
    if let Some(from) = reach(false).iter().position(|s| !s) {
        return Err(ChainError::Reducible { from, to: 0 });
    }
    Ok(())
}

/// The unique probability vector with `mu * rates = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDistribution {
    pub probs: Vec<f64>,
}

/// Solves `mu * rates = 0, sum(mu) = 1` with the last balance equation
/// replaced by the normalization row.
pub fn stationary_distribution(g: &Generator) -> Result<StationaryDistribution, ChainError> {
    let n = g.state_count();
    let mut system = g.rates.transpose();
    for j in 0..n {
        system[(n - 1, j)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let solution = system.lu().solve(&rhs).ok_or(ChainError::SingularSystem)?;
    if solution.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(ChainError::SingularSystem);
    }
    let total: f64 = solution.iter().sum();
    Ok(StationaryDistribution { probs: solution.iter().map(|p| p / total).collect() })
}

/// One-step transition probabilities `exp(rates * step)` of the skeleton chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    probs: DMatrix<f64>,
    step: f64,
    // Per-row cumulative sums for inverse-CDF sampling; +inf past the last
    // positive entry so zero-probability tails are never selected.
    cumulative: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn state_count(&self) -> usize {
        self.probs.nrows()
    }

    /// Next state from `current` given one uniform draw in `[0, 1)`.
    #[inline]
    pub fn next_state(&self, current: usize, uniform: f64) -> usize {
        let row = &self.cumulative[current];
        row.iter().position(|&c| uniform < c).unwrap_or(row.len() - 1)
    }
}

pub fn transition_matrix(g: &Generator, step: f64) -> Result<TransitionMatrix, ChainError> {
    if !step.is_finite() || step < 0.0 {
        return Err(ChainError::InvalidStep(step));
    }
    let mut probs = expm(&(g.rates() * step));
    let n = probs.nrows();
    for i in 0..n {
        for j in 0..n {
            let v = probs[(i, j)];
            if v < 0.0 {
                if v < -RENORMALIZE_TOL {
                    return Err(ChainError::RowSumDrift { row: i, sum: probs.row(i).sum() });
                }
                probs[(i, j)] = 0.0;
            }
        }
        let sum = probs.row(i).sum();
        if (sum - 1.0).abs() > RENORMALIZE_TOL {
            return Err(ChainError::RowSumDrift { row: i, sum });
        }
        for j in 0..n {
            probs[(i, j)] = (probs[(i, j)] / sum).min(1.0);
        }
    }
    let cumulative = (0..n)
        .map(|i| {
            let last = (0..n).rev().find(|&j| probs[(i, j)] > 0.0).unwrap_or(n - 1);
            let mut acc = 0.0;
            (0..n)
                .map(|j| {
                    acc += probs[(i, j)];
                    if j >= last {
                        f64::INFINITY
                    } else {
                        acc
                    }
                })
                .collect()
        })
        .collect();
    Ok(TransitionMatrix { probs, step, cumulative })
}

// Padé coefficients of degrees 7, 9 and 13 with their 1-norm thresholds.
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068;
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols()).map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of degree 7, 9 or 13.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let norm = one_norm(a);
    if norm == 0.0 {
        return ident;
    }
    let a2 = a * a;
    let (u, v, squarings) = if norm <= THETA9 {
        let b: &[f64] = if norm <= THETA7 { &PADE7 } else { &PADE9 };
        // Odd powers go to U, even powers to V.
        let mut power = ident.clone();
        let mut u_inner = &ident * b[1];
        let mut v = &ident * b[0];
        for k in 1..b.len() / 2 {
            power = &power * &a2;
            v += &power * b[2 * k];
            u_inner += &power * b[2 * k + 1];
        }
        (a * u_inner, v, 0)
    } else {
        let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
        let scaled = a / 2f64.powi(s);
        let b = &PADE13;
        let a2 = &scaled * &scaled;
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let u_high = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
        let u = &scaled * (u_high + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
        let v_high = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
        let v = v_high + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
        (u, v, s)
    };
    let numer = &v + &u;
    let denom = &v - &u;
    let mut r = denom.lu().solve(&numer).expect("Padé denominator is nonsingular within its norm threshold");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

/// A sampled skeleton path `r_0, ..., r_K` on the grid `k * step`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    pub states: Vec<usize>,
    pub step: f64,
    pub seed: SeedRecord,
}

impl ChainPath {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

fn check_regime(tm: &TransitionMatrix, regime: usize) -> Result<(), ChainError> {
    if regime >= tm.state_count() {
        return Err(ChainError::RegimeOutOfRange { regime, states: tm.state_count() });
    }
    Ok(())
}

pub(crate) fn sample_states<R: Rng>(tm: &TransitionMatrix, start: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut current = start;
    states.push(current);
    for _ in 0..steps {
        current = tm.next_state(current, rng.random::<f64>());
        states.push(current);
    }
    states
}

/// Samples `steps` transitions from `start` using inverse-CDF on one uniform
/// per step. A pure function of its arguments.
pub fn sample_chain(tm: &TransitionMatrix, start: usize, steps: usize, seed: SeedRecord) -> Result<ChainPath, ChainError> {
    check_regime(tm, start)?;
    let mut rng = seed.rng(Stream::Chain);
    Ok(ChainPath { states: sample_states(tm, start, steps, &mut rng), step: tm.step(), seed })
}

/// Two chains run independently until they first occupy the same state and
/// move together from then on.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledChains {
    pub first: ChainPath,
    pub second: ChainPath,
    /// First index at which the two paths coincide, if within the horizon.
    pub meeting: Option<usize>,
}

/// The first chain uses the same stream as [`sample_chain`], so it equals
/// `sample_chain(tm, i0, steps, seed)`. The second chain draws from its own
/// stream until the meeting index and copies the first afterwards.
pub fn couple_chains(tm: &TransitionMatrix, i0: usize, j0: usize, steps: usize, seed: SeedRecord) -> Result<CoupledChains, ChainError> {
    check_regime(tm, i0)?;
    check_regime(tm, j0)?;
    let mut rng_first = seed.rng(Stream::Chain);
    let mut rng_second = seed.rng(Stream::CoupledChain);
    let mut first = Vec::with_capacity(steps + 1);
    let mut second = Vec::with_capacity(steps + 1);
    let (mut a, mut b) = (i0, j0);
    let mut meeting = (a == b).then_some(0);
    first.push(a);
    second.push(b);
    for k in 1..=steps {
        a = tm.next_state(a, rng_first.random::<f64>());
        b = if meeting.is_some() { a } else { tm.next_state(b, rng_second.random::<f64>()) };
        if meeting.is_none() && a == b {
            meeting = Some(k);
        }
        first.push(a);
        second.push(b);
    }
    let path = |states| ChainPath { states, step: tm.step(), seed };
    Ok(CoupledChains { first: path(first), second: path(second), meeting })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unstable() -> Generator {
        Generator::from_rows(&[vec![-1.0, 1.0], vec![3.0, -3.0]]).unwrap()
    }

    // Independent closed form for a two-state chain with rates alpha (1->2)
    // and beta (2->1).
    fn two_state_closed_form(alpha: f64, beta: f64, dt: f64) -> [[f64; 2]; 2] {
        let s = alpha + beta;
        let e = (-s * dt).exp();
        [[(beta + alpha * e) / s, (alpha - alpha * e) / s], [(beta - beta * e) / s, (alpha + beta * e) / s]]
    }

    #[test]
    fn accepts_valid_generators() {
        assert_eq!(unstable().state_count(), 2);
        assert_eq!(Generator::from_rows(&[vec![0.0]]).unwrap().state_count(), 1);
    }

    #[test]
    fn rejects_invalid_generators() {
        assert_eq!(Generator::from_rows(&[vec![-1.0, 1.0], vec![0.0, 0.0]]), Err(ChainError::Reducible { from: 1, to: 0 }));
        assert!(matches!(
            Generator::from_rows(&[vec![1.0, -1.0], vec![3.0, -3.0]]),
            Err(ChainError::NegativeOffDiagonal { row: 0, col: 1, .. })
        ));
        assert!(matches!(Generator::from_rows(&[vec![-1.0, 1.5], vec![3.0, -3.0]]), Err(ChainError::RowSumNonzero { row: 0, .. })));
        assert!(matches!(Generator::from_rows(&[vec![-1.0, 1.0]]), Err(ChainError::NotSquare { .. })));
        // 1 -> 2 -> 3 with no way back to 1
        assert!(matches!(
            Generator::from_rows(&[vec![-1.0, 1.0, 0.0], vec![0.0, -1.0, 1.0], vec![0.0, 2.0, -2.0]]),
            Err(ChainError::Reducible { .. })
        ));
    }

    #[test]
    fn stationary_examples() {
        let cases = [
            ([[-1.0, 1.0], [3.0, -3.0]], [0.75, 0.25]),
            ([[-1.0, 1.0], [1.0, -1.0]], [0.5, 0.5]),
            ([[-4.0, 4.0], [1.0, -1.0]], [0.2, 0.8]),
        ];
        for (rates, expected) in cases {
            let g = Generator::from_rows(&rates.map(|r| r.to_vec())).unwrap();
            let mu = stationary_distribution(&g).unwrap();
            for (p, e) in mu.probs.iter().zip(expected) {
                assert!((p - e).abs() < 1e-12, "{p} vs {e}");
            }
        }
    }

    #[test]
    fn zero_step_is_identity() {
        let tm = transition_matrix(&unstable(), 0.0).unwrap();
        assert_eq!(tm.probs(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn two_state_matches_closed_form() {
        let g = unstable();
        for dt in [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0] {
            let tm = transition_matrix(&g, dt).unwrap();
            let exact = two_state_closed_form(1.0, 3.0, dt);
            for (i, row) in exact.iter().enumerate() {
                for (j, e) in row.iter().enumerate() {
                    assert!((tm.probs()[(i, j)] - e).abs() < 1e-12);
                }
            }
        }
        let tm = transition_matrix(&g, 0.01).unwrap();
        assert!((tm.probs()[(0, 0)] - (3.0 + (-0.04f64).exp()) / 4.0).abs() < 1e-14);
    }

    #[test]
    fn long_step_rows_approach_stationary() {
        let g = unstable();
        let mu = stationary_distribution(&g).unwrap();
        let tm = transition_matrix(&g, 10.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((tm.probs()[(i, j)] - mu.probs[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn expm_of_diagonal_and_nilpotent() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-20.0, 0.5, 3.0]));
        let e = expm(&d);
        for (i, v) in [-20.0f64, 0.5, 3.0].iter().enumerate() {
            assert!((e[(i, i)] - v.exp()).abs() < 1e-13 * v.exp().max(1.0));
        }
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 7.0, 0.0, 0.0]);
        assert_eq!(expm(&n), DMatrix::from_row_slice(2, 2, &[1.0, 7.0, 0.0, 1.0]));
    }

    #[test]
    fn single_state_chain_is_constant() {
        let g = Generator::from_rows(&[vec![0.0]]).unwrap();
        let tm = transition_matrix(&g, 0.1).unwrap();
        let path = sample_chain(&tm, 0, 50, SeedRecord::new(1, 0)).unwrap();
        assert!(path.states.iter().all(|&s| s == 0));
    }

    #[test]
    fn sampling_replays_exactly() {
        let tm = transition_matrix(&unstable(), 0.01).unwrap();
        let a = sample_chain(&tm, 1, 100, SeedRecord::new(99, 4)).unwrap();
        let b = sample_chain(&tm, 1, 100, SeedRecord::new(99, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 101);
        assert_eq!(a.states[0], 1);
    }

    #[test]
    fn occupation_fraction_matches_stationary() {
        let tm = transition_matrix(&unstable(), 0.01).unwrap();
        let path = sample_chain(&tm, 0, 1_000_000, SeedRecord::new(5, 0)).unwrap();
        let frac = path.states.iter().filter(|&&s| s == 0).count() as f64 / path.states.len() as f64;
        assert!((frac - 0.75).abs() < 0.01, "occupation {frac}");
    }

    #[test]
    fn rejects_out_of_range_start() {
        let tm = transition_matrix(&unstable(), 0.01).unwrap();
        assert!(matches!(sample_chain(&tm, 2, 3, SeedRecord::new(0, 0)), Err(ChainError::RegimeOutOfRange { .. })));
    }

    #[test]
    fn coupling_from_equal_states_meets_immediately() {
        let tm = transition_matrix(&unstable(), 0.01).unwrap();
        let c = couple_chains(&tm, 1, 1, 200, SeedRecord::new(3, 0)).unwrap();
        assert_eq!(c.meeting, Some(0));
        assert_eq!(c.first.states, c.second.states);
    }

    #[test]
    fn coupling_meeting_index_is_first_coincidence() {
        let tm = transition_matrix(&unstable(), 0.05).unwrap();
        for path in 0..200 {
            let seed = SeedRecord::new(11, path);
            let c = couple_chains(&tm, 0, 1, 400, seed).unwrap();
            let scanned = c.first.states.iter().zip(&c.second.states).position(|(a, b)| a == b);
            assert_eq!(c.meeting, scanned);
            assert_eq!(c.first, sample_chain(&tm, 0, 400, seed).unwrap());
            if let Some(tau) = c.meeting {
                assert_eq!(c.first.states[tau..], c.second.states[tau..]);
            }
        }
    }

    #[test]
    fn meeting_time_tail_decays() {
        let tm = transition_matrix(&unstable(), 0.01).unwrap();
        let horizon = 300;
        let trials = 10_000;
        let mut survival = vec![0usize; horizon + 1];
        for path in 0..trials {
            let c = couple_chains(&tm, 0, 1, horizon, SeedRecord::new(21, path)).unwrap();
            let tau = c.meeting.unwrap_or(horizon + 1);
            for (k, s) in survival.iter_mut().enumerate() {
                if tau > k {
                    *s += 1;
                }
            }
        }
        let pts: Vec<(f64, f64)> =
            survival.iter().enumerate().filter(|(_, &s)| s > 0).map(|(k, &s)| (k as f64, (s as f64 / trials as f64).ln())).collect();
        let n = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        assert!(sxy / sxx < 0.0);
        for w in survival.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    fn random_generator(n: usize) -> impl Strategy<Value = Generator> {
        proptest::collection::vec(0.05f64..5.0, n * n).prop_map(move |v| {
            let mut rows = vec![vec![0.0; n]; n];
            for i in 0..n {
                let mut sum = 0.0;
                for j in 0..n {
                    if i != j {
                        rows[i][j] = v[i * n + j];
                        sum += v[i * n + j];
                    }
                }
                rows[i][i] = -sum;
            }
            // The diagonal absorbs rounding so each row sums to zero exactly
            // enough for validation.
            Generator::from_rows(&rows).unwrap()
        })
    }

    proptest! {
        #[test]
        fn semigroup_property(g in (2usize..5).prop_flat_map(random_generator), d1 in 0.0f64..2.0, d2 in 0.0f64..2.0) {
            let p1 = transition_matrix(&g, d1).unwrap();
            let p2 = transition_matrix(&g, d2).unwrap();
            let p12 = transition_matrix(&g, d1 + d2).unwrap();
            let prod = p1.probs() * p2.probs();
            prop_assert!((prod - p12.probs()).abs().max() < 1e-10);
        }

        #[test]
        fn stationary_is_invariant(g in (2usize..5).prop_flat_map(random_generator), dt in 0.0f64..5.0) {
            let mu = stationary_distribution(&g).unwrap();
            let tm = transition_matrix(&g, dt).unwrap();
            let n = g.state_count();
            let row = nalgebra::RowDVector::from_vec(mu.probs.clone());
            let moved = &row * tm.probs();
            for j in 0..n {
                prop_assert!((moved[j] - mu.probs[j]).abs() < 1e-10);
            }
            let balance = &row * g.rates();
            prop_assert!(balance.iter().all(|b| b.abs() < 1e-10));
            prop_assert!((mu.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..n {
                prop_assert!((tm.probs().row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
