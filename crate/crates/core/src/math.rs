// SPDX-License-Identifier: Apache-2.0

//! Log-space arithmetic shared by the recursion and the model family.

use std::f64::consts::PI;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln Σ exp(x_i)`, returning `-inf` for an empty slice or all `-inf` inputs.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Streaming log-sum-exp accumulator with a running maximum.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    scaled_sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

impl LogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            scaled_sum: 0.0,
        }
    }

    pub fn push(&mut self, value: f64) {
        if value == f64::NEG_INFINITY {
            return;
        }
        if value <= self.max {
            self.scaled_sum += (value - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - value).exp() + 1.0;
            self.max = value;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled_sum.ln()
        }
    }
}

impl FromIterator<f64> for LogSumExp {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = LogSumExp::new();
        for v in iter {
            acc.push(v);
        }
        acc
    }
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

/// Log density of N(mean, variance) at `x`.
pub fn normal_log_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * variance).ln() - 0.5 * d * d / variance
}

/// `ln(1 - exp(x))` for `x <= 0`, accurate near both ends.
pub fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, f64::NEG_INFINITY]) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn streaming_matches_batch() {
        let xs = [-3.0, 2.5, -700.0, 1.0, 0.0, f64::NEG_INFINITY, 4.0];
        let acc: LogSumExp = xs.iter().copied().collect();
        assert!((acc.value() - log_sum_exp(&xs)).abs() < 1e-12);
    }

    #[test]
    fn log1m_exp_matches_direct() {
        for &x in &[-1e-8, -0.1, -0.69, -0.7, -5.0, -40.0] {
            let direct = (1.0 - f64::exp(x)).ln();
            assert!((log1m_exp(x) - direct).abs() < 1e-7 * direct.abs().max(1.0));
        }
    }
}
