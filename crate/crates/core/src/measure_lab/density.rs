//! One-dimensional density tables.

use serde::{Deserialize, Serialize};

use super::MeasureError;

const MAX_BINS: usize = 10_000;
const MAX_GRID: usize = 20_001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DensityMethod {
    /// Freedman-Diaconis bin width.
    #[default]
    Histogram,
    /// Gaussian kernel with Silverman's bandwidth.
    Kde,
}

/// Density values on a uniform grid: bin centres for histograms, evaluation
/// points for kernel estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityTable {
    pub method: DensityMethod,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Bin width or grid spacing.
    pub spacing: f64,
}

impl DensityTable {
    /// Total mass: bin sum for histograms, trapezoid rule for kernel estimates.
    pub fn integral(&self) -> f64 {
        match self.method {
            DensityMethod::Histogram => self.density.iter().sum::<f64>() * self.spacing,
            DensityMethod::Kde => {
                let n = self.density.len();
                let inner: f64 = self.density.iter().sum();
                (inner - 0.5 * (self.density[0] + self.density[n - 1])) * self.spacing
            }
        }
    }
}

// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn empirical_density(samples: &[f64], method: DensityMethod) -> Result<DensityTable, MeasureError> {
    if samples.is_empty() {
        return Err(MeasureError::EmptySample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    match method {
        DensityMethod::Histogram => Ok(histogram(&sorted)),
        DensityMethod::Kde => Ok(kde(&sorted)),
    }
}

fn histogram(sorted: &[f64]) -> DensityTable {
    let n = sorted.len();
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let range = hi - lo;
    if range == 0.0 {
        return DensityTable { method: DensityMethod::Histogram, grid: vec![lo], density: vec![1.0], spacing: 1.0 };
    }
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let mut width = 2.0 * iqr / (n as f64).cbrt();
    if !(width > 0.0) {
        width = range / ((n as f64).log2().ceil() + 1.0);
    }
    let bins = ((range / width).ceil() as usize).clamp(1, MAX_BINS);
    let width = range / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in sorted {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    DensityTable {
        method: DensityMethod::Histogram,
        grid: (0..bins).map(|k| lo + (k as f64 + 0.5) * width).collect(),
        density: counts.iter().map(|&c| c as f64 / (n as f64 * width)).collect(),
        spacing: width,
    }
}

fn kde(sorted: &[f64]) -> DensityTable {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = if sorted.len() > 1 { (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let spread = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let scale = match sd.min(spread / 1.34) {
        s if s > 0.0 => s,
        _ => sd.max(spread / 1.34),
    };
    let mut h = 0.9 * scale * n.powf(-0.2);
    if !(h > 0.0) {
        h = 1e-3 * sorted[0].abs().max(1.0);
    }
    let (lo, hi) = (sorted[0] - 8.0 * h, sorted[sorted.len() - 1] + 8.0 * h);
    let points = (((hi - lo) / (0.5 * h)).ceil() as usize + 1).min(MAX_GRID);
    let spacing = (hi - lo) / (points - 1) as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..points).map(|k| lo + k as f64 * spacing).collect();
    let density = grid
        .iter()
        .map(|&g| {
            let from = sorted.partition_point(|&x| x < g - 8.0 * h);
            let to = sorted.partition_point(|&x| x <= g + 8.0 * h);
            sorted[from..to].iter().map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>() * norm
        })
        .collect();
    DensityTable { method: DensityMethod::Kde, grid, density, spacing }
}
