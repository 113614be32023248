//! Moments and log-linear decay fits.

use serde::Serialize;

use super::MeasureError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub count: usize,
}

/// Monte Carlo mean of `|x|^order` over row-major points of dimension `dim`.
pub fn moment(points: &[f64], dim: usize, order: u32) -> Result<MomentEstimate, MeasureError> {
    if points.is_empty() || dim == 0 {
        return Err(MeasureError::EmptySample);
    }
    if !points.len().is_multiple_of(dim) {
        return Err(MeasureError::DimensionMismatch(points.len(), dim));
    }
    let values: Vec<f64> = points
        .chunks_exact(dim)
        .map(|x| {
            let sq: f64 = x.iter().map(|v| v * v).sum();
            if order == 2 {
                sq
            } else {
                sq.sqrt().powi(order as i32)
            }
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_err = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { 0.0 };
    Ok(MomentEstimate { mean, std_err, count: values.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares line through `(x, y)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<DecayFit, MeasureError> {
    if xs.len() != ys.len() {
        return Err(MeasureError::DimensionMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MeasureError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(DecayFit { slope, intercept, r_squared, points: xs.len() })
}

/// Fits `log value = intercept + slope * k * step` over the series after
/// dropping the first `burn_in` fraction of it.
pub fn decay_slope(values: &[f64], step: f64, burn_in: f64) -> Result<DecayFit, MeasureError> {
    let start = ((burn_in.clamp(0.0, 1.0) * values.len() as f64).ceil() as usize).min(values.len());
    let window = &values[start..];
    if let Some((k, &v)) = window.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(MeasureError::NonPositiveValues { index: start + k, value: v });
    }
    if window.len() < 3 {
        return Err(MeasureError::TooFewPoints(window.len()));
    }
    let xs: Vec<f64> = (start..values.len()).map(|k| k as f64 * step).collect();
    let ys: Vec<f64> = window.iter().map(|v| v.ln()).collect();
    linear_fit(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_sample() {
        let m = moment(&[3.0, 4.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(m.mean, 25.0);
        assert_eq!(m.std_err, 0.0);
        assert_eq!(moment(&[3.0, 4.0], 2, 1).unwrap().mean, 5.0);
    }

    #[test]
    fn normal_second_moment() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = moment(&xs, 1, 2).unwrap();
        assert!((m.mean - 1.0).abs() < 3.0 * m.std_err, "{m:?}");
    }

    #[test]
    fn empty_moment() {
        assert_eq!(moment(&[], 1, 2), Err(MeasureError::EmptySample));
    }

    #[test]
    fn exact_exponential_decay() {
        let step = 0.01;
        let series: Vec<f64> = (0..500).map(|k| (-2.0 * k as f64 * step).exp()).collect();
        let fit = decay_slope(&series, step, 0.2).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-10);
    }

    #[test]
    fn zero_value_is_rejected() {
        let series = [1.0, 0.5, 0.0, 0.1];
        assert_eq!(decay_slope(&series, 0.1, 0.0), Err(MeasureError::NonPositiveValues { index: 2, value: 0.0 }));
    }

    #[test]
    fn too_short_after_burn_in() {
        assert_eq!(decay_slope(&[1.0, 0.5, 0.25, 0.125], 1.0, 0.5), Err(MeasureError::TooFewPoints(2)));
    }

    #[test]
    fn noisy_decay() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let step = 0.01;
        let series: Vec<f64> = (0..2000)
            .map(|k| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                (-(k as f64) * step).exp() * (1.0 + 0.01 * eps)
            })
            .collect();
        let fit = decay_slope(&series, step, 0.1).unwrap();
        assert!((fit.slope + 1.0).abs() < 0.05, "{fit:?}");
    }
}
