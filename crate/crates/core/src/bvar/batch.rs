// SPDX-License-Identifier: Apache-2.0

//! Non-incremental posterior and marginal likelihood from a stacked design.
//!
//! These are dense reference computations: the coefficient blocks are laid
//! side by side into one vector and every quantity is formed directly.

use nalgebra::{DMatrix, DVector};

use super::{BvarPrior, DesignLayout};
use crate::error::{invalid, Result};
use crate::math::{ln_gamma, LN_2PI};

/// Posterior after a batch of observations.
#[derive(Debug, Clone)]
pub struct BatchPosterior {
    /// `Σ Xᵀ Ω⁻¹ X + I/g` over all blocks.
    pub precision: DMatrix<f64>,
    /// `Σ Xᵀ Ω⁻¹ y`.
    pub cross: DVector<f64>,
    pub a_post: f64,
    pub b_post: f64,
    pub n_obs: usize,
}

impl BatchPosterior {
    /// Posterior mean of the stacked coefficient vector.
    pub fn coefficients(&self) -> DVector<f64> {
        self.precision
            .clone()
            .cholesky()
            .expect("posterior precision is positive definite")
            .solve(&self.cross)
    }
}

fn embed(layout: &DesignLayout, s: usize, row: &[f64]) -> DVector<f64> {
    let block = layout.block_of()[s];
    let offset: usize = layout.block_dims()[..block].iter().sum();
    let mut x = DVector::zeros(layout.total_dim());
    x.rows_mut(offset, row.len())
        .copy_from(&DVector::from_column_slice(row));
    x
}

/// `rows[t][s]` is the design row of location `s` at step `t`.
pub fn batch_posterior(
    prior: &BvarPrior,
    layout: &DesignLayout,
    a: f64,
    b: f64,
    rows: &[Vec<Vec<f64>>],
    ys: &[Vec<f64>],
) -> Result<BatchPosterior> {
    if rows.len() != ys.len() {
        return Err(invalid("design and observation counts differ"));
    }
    let k = layout.total_dim();
    let mut precision = DMatrix::identity(k, k) / prior.coef_scale;
    let mut cross = DVector::zeros(k);
    let mut yy = 0.0;
    for (step_rows, y) in rows.iter().zip(ys) {
        for (s, row) in step_rows.iter().enumerate() {
            let x = embed(layout, s, row);
            let w = 1.0 / prior.omega[s];
            precision += &x * x.transpose() * w;
            cross += &x * (y[s] * w);
            yy += y[s] * y[s] * w;
        }
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| invalid("batch precision is not positive definite"))?;
    let fit = cross.dot(&chol.solve(&cross));
    let n = rows.len();
    Ok(BatchPosterior {
        precision,
        cross,
        a_post: a + 0.5 * (n * layout.locations()) as f64,
        b_post: b + 0.5 * (yy - fit),
        n_obs: n,
    })
}

/// `ln p(y_1, .., y_n)` for the given design, integrating out coefficients
/// and noise scale. Zero observations give 0.
pub fn batch_log_marginal(
    prior: &BvarPrior,
    layout: &DesignLayout,
    a: f64,
    b: f64,
    rows: &[Vec<Vec<f64>>],
    ys: &[Vec<f64>],
) -> Result<f64> {
    let post = batch_posterior(prior, layout, a, b, rows, ys)?;
    let n = post.n_obs as f64;
    let s = layout.locations() as f64;
    let k = layout.total_dim() as f64;
    let log_det_p = post
        .precision
        .clone()
        .cholesky()
        .expect("checked in batch_posterior")
        .l()
        .diagonal()
        .iter()
        .map(|v| 2.0 * v.ln())
        .sum::<f64>();
    let log_omega: f64 = prior.omega.iter().map(|w| w.ln()).sum();
    Ok(-0.5 * n * s * LN_2PI
        - 0.5 * n * log_omega
        - 0.5 * k * prior.coef_scale.ln()
        - 0.5 * log_det_p
        + a * b.ln()
        - post.a_post * post.b_post.ln()
        + ln_gamma(post.a_post)
        - ln_gamma(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvar::SufficientStatistics;
    use approx::assert_relative_eq;

    #[test]
    fn empty_batch_has_unit_mass() {
        let prior = BvarPrior::isotropic(1.0, 2.0, 3.0, 2).unwrap();
        let layout = DesignLayout::new(vec![0, 1], vec![2, 3]);
        let v = batch_log_marginal(&prior, &layout, 1.0, 2.0, &[], &[]).unwrap();
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn incremental_and_batch_agree_on_shared_block() {
        let prior = BvarPrior::new(1.3, 0.9, 2.0, vec![1.0, 0.5]).unwrap();
        let layout = DesignLayout::single_block(2, 3);
        let mut st = SufficientStatistics::init(&prior, &layout).unwrap();
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        let mut total = 0.0;
        for t in 0..10 {
            let tf = t as f64;
            let r = vec![
                vec![1.0, 0.0, (tf * 0.7).sin()],
                vec![0.0, 1.0, (tf * 0.3).cos()],
            ];
            let y = vec![(tf * 1.1).sin() + 0.2, (tf * 0.4).cos() - 0.1];
            total += st.observe(&prior, &layout, &r, &y).unwrap();
            rows.push(r);
            ys.push(y);
        }
        let batch = batch_log_marginal(&prior, &layout, 1.3, 0.9, &rows, &ys).unwrap();
        assert_relative_eq!(total, batch, epsilon = 1e-9);
        let post = batch_posterior(&prior, &layout, 1.3, 0.9, &rows, &ys).unwrap();
        assert_relative_eq!(st.b_post(), post.b_post, max_relative = 1e-10);
        let p = st.precision_matrix(0);
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(
                    p[i * 3 + j],
                    post.precision[(i, j)],
                    max_relative = 1e-10,
                    epsilon = 1e-12
                );
            }
        }
    }
}
