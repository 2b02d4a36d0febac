// SPDX-License-Identifier: Apache-2.0

//! Quadrature reference for the single-series intercept model.

use bocpdms::math::{ln_gamma, log_sum_exp};

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            loop {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    let (mut q0, mut q1) = (1.0, x);
                    for k in 2..=n {
                        let q2 = ((2 * k - 1) as f64 * x * q1 - (k - 1) as f64 * q0) / k as f64;
                        q0 = q1;
                        q1 = q2;
                    }
                    let dq = n as f64 * (x * q1 - q0) / (x * x - 1.0);
                    return (x, 2.0 / ((1.0 - x * x) * dq * dq));
                }
            }
        })
        .collect()
}

/// Composite Gauss-Legendre nodes on `[lo, hi]`.
pub fn nodes(lo: f64, hi: f64, panels: usize, rule: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let h = (hi - lo) / panels as f64;
    (0..panels)
        .flat_map(|p| {
            let mid = lo + (p as f64 + 0.5) * h;
            rule.iter()
                .map(move |&(x, w)| (mid + 0.5 * h * x, 0.5 * h * w))
        })
        .collect()
}

pub fn ln_normal(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - mean).powi(2) / var)
}

/// `ln ∫∫ Π N(y_i; c, σ²) N(c; 0, σ² g) IG(σ²; a, b) dc dσ²` by quadrature
/// over `(c / σ, ln σ²)`.
pub fn quadrature_log_marginal(ys: &[f64], a: f64, b: f64, g: f64) -> f64 {
    let rule = gauss_legendre(20);
    let us = nodes(-14.0, 45.0, 120, &rule);
    let half = 12.0 * g.sqrt() + 30.0;
    let zs = nodes(-half, half, 120, &rule);
    let ln_ig = |s2: f64| a * b.ln() - ln_gamma(a) - (a + 1.0) * s2.ln() - b / s2;
    let mut terms = Vec::with_capacity(us.len() * zs.len());
    for &(u, wu) in &us {
        let s2 = u.exp();
        let sd = s2.sqrt();
        // dσ² = σ² du and dc = σ dz.
        let outer = ln_ig(s2) + 1.5 * u + wu.ln();
        for &(z, wz) in &zs {
            let c = sd * z;
            let mut f = outer + wz.ln() + ln_normal(c, 0.0, s2 * g);
            for &y in ys {
                f += ln_normal(y, c, s2);
            }
            terms.push(f);
        }
    }
    log_sum_exp(&terms)
}
