//! Summary statistics for replica outputs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the sample variance, from the fourth central moment.
pub fn variance_std_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = mean(xs);
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    ((m4 - (n - 3.0) / (n - 1.0) * m2 * m2) / n).max(0.0).sqrt()
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Mean with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        let m = mean(xs);
        let se = std_error(xs);
        Self { mean: m, std_error: se, lower: m - 1.96 * se, upper: m + 1.96 * se }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit test. Cells with expected count below 5 are
/// pooled into one.
pub fn chi_square(observed: &[u64], probabilities: &[f64]) -> ChiSquare {
    assert_eq!(observed.len(), probabilities.len());
    let total: u64 = observed.iter().sum();
    let n = total as f64;
    let (mut stat, mut cells) = (0.0, 0usize);
    let (mut pooled_o, mut pooled_e) = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probabilities) {
        let e = n * p;
        if e < 5.0 {
            pooled_o += o as f64;
            pooled_e += e;
        } else {
            stat += (o as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pooled_e > 0.0 {
        stat += (pooled_o - pooled_e).powi(2) / pooled_e;
        cells += 1;
    }
    let dof = cells.saturating_sub(1).max(1);
    let p_value = ChiSquared::new(dof as f64).map(|d| 1.0 - d.cdf(stat)).unwrap_or(f64::NAN);
    ChiSquare { statistic: stat, dof, p_value }
}

/// Median of a non-empty slice.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert!((correlation(&xs, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-15);
        assert_eq!(median(&xs), 2.5);
    }

    #[test]
    fn chi_square_p_values() {
        let perfect = chi_square(&[100, 200, 700], &[0.1, 0.2, 0.7]);
        assert_eq!(perfect.statistic, 0.0);
        assert!((perfect.p_value - 1.0).abs() < 1e-12);
        let bad = chi_square(&[300, 200, 500], &[0.1, 0.2, 0.7]);
        assert!(bad.p_value < 1e-10);
        // two degrees of freedom: P(χ² > 2) = e^{-1}
        let c = chi_square(&[110, 190, 700], &[0.1, 0.2, 0.7]);
        let expected_stat = 100.0 / 100.0 + 100.0 / 200.0;
        assert!((c.statistic - expected_stat).abs() < 1e-12);
        assert!((c.p_value - (-expected_stat / 2.0f64).exp()).abs() < 1e-12);
    }
}
