// SPDX-License-Identifier: Apache-2.0

//! Conjugate Bayesian vector autoregressions.
//!
//! Observation model for one time step with `S` locations:
//!
//! ```text
//! y_t | c, σ² ~ N(X_t c, σ² Ω),   c | σ² ~ N(0, σ² g I),   σ² ~ IG(a, b)
//! ```
//!
//! with diagonal `Ω`. The coefficient vector is split into blocks; each
//! location's design row touches exactly one block. Per block the state
//! keeps the Cholesky factor of the precision `P = Σ xxᵀ/ω + I/g` and the
//! cross moment `w = Σ x y/ω`. The one-step predictive is a multivariate
//! Student-t with `2 a_n` degrees of freedom, location `X P⁻¹ w` and scale
//! `(b_n / a_n)(Ω + X P⁻¹ Xᵀ)`.

pub mod batch;
pub mod cholesky;

use crate::error::{invalid, Error, Result};
use crate::math::{digamma, ln_gamma, LN_2PI};
use crate::spatial::SsbvarStructure;
use cholesky::CholeskyFactor;

/// Hyperparameters `(a, b, g, Ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BvarPrior {
    pub a: f64,
    pub b: f64,
    /// `g` in `V_c = g I`.
    pub coef_scale: f64,
    /// Diagonal of `Ω`, one entry per location.
    pub omega: Vec<f64>,
}

impl BvarPrior {
    pub fn new(a: f64, b: f64, coef_scale: f64, omega: Vec<f64>) -> Result<Self> {
        let prior = Self {
            a,
            b,
            coef_scale,
            omega,
        };
        prior.validate()?;
        Ok(prior)
    }

    /// `Ω = I` on `locations` series.
    pub fn isotropic(a: f64, b: f64, coef_scale: f64, locations: usize) -> Result<Self> {
        Self::new(a, b, coef_scale, vec![1.0; locations])
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.a) || !positive(self.b) {
            return Err(invalid(format!(
                "prior shape and scale must be positive, got a = {}, b = {}",
                self.a, self.b
            )));
        }
        if !positive(self.coef_scale) {
            return Err(invalid(format!(
                "coefficient prior scale must be positive, got {}",
                self.coef_scale
            )));
        }
        if self.omega.is_empty() || !self.omega.iter().all(|&w| positive(w)) {
            return Err(invalid("Ω must have positive diagonal entries"));
        }
        Ok(())
    }
}

/// Assignment of locations to coefficient blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignLayout {
    block_of: Vec<usize>,
    block_dims: Vec<usize>,
    diagonal: bool,
}

impl DesignLayout {
    pub fn new(block_of: Vec<usize>, block_dims: Vec<usize>) -> Self {
        assert!(
            block_of.iter().all(|&b| b < block_dims.len()),
            "block index out of range"
        );
        let mut counts = vec![0usize; block_dims.len()];
        for &b in &block_of {
            counts[b] += 1;
        }
        let diagonal = counts.iter().all(|&c| c <= 1);
        Self {
            block_of,
            block_dims,
            diagonal,
        }
    }

    /// A single block of dimension `k` shared by `locations` rows.
    pub fn single_block(locations: usize, k: usize) -> Self {
        Self::new(vec![0; locations], vec![k])
    }

    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn locations(&self) -> usize {
        self.block_of.len()
    }

    pub fn total_dim(&self) -> usize {
        self.block_dims.iter().sum()
    }

    /// True when no two locations share a block, so the predictive scale is
    /// diagonal.
    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    fn check_rows(&self, rows: &[Vec<f64>]) -> Result<()> {
        if rows.len() != self.locations() {
            return Err(Error::DimensionMismatch {
                context: "design rows",
                expected: self.locations(),
                actual: rows.len(),
            });
        }
        for (s, row) in rows.iter().enumerate() {
            let k = self.block_dims[self.block_of[s]];
            if row.len() != k {
                return Err(Error::DimensionMismatch {
                    context: "design row length",
                    expected: k,
                    actual: row.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    precision: CholeskyFactor,
    cross: Vec<f64>,
}

/// Conjugate posterior state of one run-length hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStatistics {
    blocks: Vec<Block>,
    a_post: f64,
    b_post: f64,
    birth_a: f64,
    birth_b: f64,
    n_obs: usize,
}

impl SufficientStatistics {
    /// Prior state: precision `I/g`, zero cross moment, `(a_n, b_n) = (a, b)`.
    pub fn init(prior: &BvarPrior, layout: &DesignLayout) -> Result<Self> {
        Self::with_hyperparameters(prior, layout, prior.a, prior.b)
    }

    /// Prior state with `(a, b)` overriding the prior's values.
    pub fn with_hyperparameters(
        prior: &BvarPrior,
        layout: &DesignLayout,
        a: f64,
        b: f64,
    ) -> Result<Self> {
        if !(prior.coef_scale > 0.0) || !prior.coef_scale.is_finite() {
            return Err(invalid(format!(
                "coefficient prior scale must be positive, got {}",
                prior.coef_scale
            )));
        }
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(invalid(format!("a and b must be positive, got {a}, {b}")));
        }
        if layout.block_dims().contains(&0) {
            return Err(invalid("coefficient blocks must have at least one column"));
        }
        let blocks = layout
            .block_dims()
            .iter()
            .map(|&k| Block {
                precision: CholeskyFactor::scaled_identity(k, 1.0 / prior.coef_scale),
                cross: vec![0.0; k],
            })
            .collect();
        Ok(Self {
            blocks,
            a_post: a,
            b_post: b,
            birth_a: a,
            birth_b: b,
            n_obs: 0,
        })
    }

    pub fn a_post(&self) -> f64 {
        self.a_post
    }

    pub fn b_post(&self) -> f64 {
        self.b_post
    }

    /// `(a, b)` the hypothesis was born with.
    pub fn birth_hyperparameters(&self) -> (f64, f64) {
        (self.birth_a, self.birth_b)
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Dense precision matrix of `block` (row-major).
    pub fn precision_matrix(&self, block: usize) -> Vec<f64> {
        self.blocks[block].precision.matrix()
    }

    pub fn precision_factor(&self, block: usize) -> &CholeskyFactor {
        &self.blocks[block].precision
    }

    pub fn cross_moment(&self, block: usize) -> &[f64] {
        &self.blocks[block].cross
    }

    /// MAP coefficients `P⁻¹ w`, one vector per block.
    pub fn map_coefficients(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| b.precision.solve(&b.cross))
            .collect()
    }

    /// Closed-form one-step predictive for design rows `rows[s]`.
    pub fn predictive(
        &self,
        prior: &BvarPrior,
        layout: &DesignLayout,
        rows: &[Vec<f64>],
    ) -> Result<Predictive> {
        layout.check_rows(rows)?;
        let s_count = layout.locations();
        let proj: Vec<Vec<f64>> = self
            .blocks
            .iter()
            .map(|b| {
                let mut u = b.cross.clone();
                b.precision.forward_solve_in_place(&mut u);
                u
            })
            .collect();
        let mut z = Vec::with_capacity(s_count);
        let mut mean = Vec::with_capacity(s_count);
        for (s, row) in rows.iter().enumerate() {
            let block = layout.block_of()[s];
            let mut zs = row.clone();
            self.blocks[block].precision.forward_solve_in_place(&mut zs);
            mean.push(dot(&zs, &proj[block]));
            z.push(zs);
        }
        let scale = if layout.is_diagonal() {
            let diag: Vec<f64> = (0..s_count)
                .map(|s| prior.omega[s] + dot(&z[s], &z[s]))
                .collect();
            ScaleMatrix::Diagonal(diag)
        } else {
            let mut m = vec![0.0; s_count * s_count];
            for i in 0..s_count {
                for j in i..s_count {
                    let mut v = if layout.block_of()[i] == layout.block_of()[j] {
                        dot(&z[i], &z[j])
                    } else {
                        0.0
                    };
                    if i == j {
                        v += prior.omega[i];
                    }
                    m[i * s_count + j] = v;
                    m[j * s_count + i] = v;
                }
            }
            let chol = CholeskyFactor::from_matrix(&m, s_count)?;
            ScaleMatrix::Dense { chol, matrix: m }
        };
        let log_det = match &scale {
            ScaleMatrix::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
            ScaleMatrix::Dense { chol, .. } => chol.log_det(),
        };
        Ok(Predictive {
            mean,
            scale,
            log_det,
            a_post: self.a_post,
            b_post: self.b_post,
        })
    }

    /// Adds one observation. `quad` is the predictive quadratic form
    /// `eᵀ(Ω + X P⁻¹ Xᵀ)⁻¹ e` evaluated before the update.
    pub fn update(
        &mut self,
        prior: &BvarPrior,
        layout: &DesignLayout,
        rows: &[Vec<f64>],
        y: &[f64],
        quad: f64,
    ) -> Result<()> {
        layout.check_rows(rows)?;
        if y.len() != layout.locations() {
            return Err(Error::DimensionMismatch {
                context: "observation",
                expected: layout.locations(),
                actual: y.len(),
            });
        }
        if !quad.is_finite() || quad < 0.0 {
            return Err(Error::State(format!(
                "invalid predictive quadratic form {quad}"
            )));
        }
        for (s, row) in rows.iter().enumerate() {
            let block = &mut self.blocks[layout.block_of()[s]];
            let weight = 1.0 / prior.omega[s];
            update_factor(&mut block.precision, row, weight)?;
            for (c, x) in block.cross.iter_mut().zip(row) {
                *c += x * y[s] * weight;
            }
        }
        self.a_post += 0.5 * y.len() as f64;
        self.b_post += 0.5 * quad;
        self.n_obs += 1;
        Ok(())
    }

    /// Evaluates the predictive at `y`, then absorbs `y`. Returns the
    /// predictive log density.
    pub fn observe(
        &mut self,
        prior: &BvarPrior,
        layout: &DesignLayout,
        rows: &[Vec<f64>],
        y: &[f64],
    ) -> Result<f64> {
        let eval = self.predictive(prior, layout, rows)?.evaluate(y);
        self.update(prior, layout, rows, y, eval.quad)?;
        Ok(eval.log_pdf)
    }
}

/// Rank-one update with one jittered retry.
fn update_factor(factor: &mut CholeskyFactor, x: &[f64], weight: f64) -> Result<()> {
    let backup = factor.clone();
    if factor.rank_one_update(x, weight).is_ok() {
        return Ok(());
    }
    *factor = backup;
    let k = factor.dim();
    let jitter = 1e-10 * factor.trace_of_matrix() / k as f64;
    let mut unit = vec![0.0; k];
    for i in 0..k {
        unit[i] = 1.0;
        factor.rank_one_update(&unit, jitter)?;
        unit[i] = 0.0;
    }
    factor.rank_one_update(x, weight)?;
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
enum ScaleMatrix {
    Diagonal(Vec<f64>),
    Dense {
        chol: CholeskyFactor,
        matrix: Vec<f64>,
    },
}

/// Multivariate Student-t predictive of one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictive {
    mean: Vec<f64>,
    scale: ScaleMatrix,
    log_det: f64,
    a_post: f64,
    b_post: f64,
}

/// Predictive log density at one point with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveEval {
    pub log_pdf: f64,
    /// `eᵀ(Ω + X P⁻¹ Xᵀ)⁻¹ e`; independent of `(a, b)`.
    pub quad: f64,
    /// `∂ log_pdf / ∂ a_n`.
    pub d_a: f64,
    /// `∂ log_pdf / ∂ b_n`.
    pub d_b: f64,
}

/// Mean and covariance of a predictive.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Row-major `S × S`.
    pub covariance: Vec<f64>,
    /// False when `2 a_n <= 2`; the covariance then holds the scale matrix.
    pub finite: bool,
}

impl Predictive {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Degrees of freedom `2 a_n`.
    pub fn df(&self) -> f64 {
        2.0 * self.a_post
    }

    pub fn a_post(&self) -> f64 {
        self.a_post
    }

    pub fn b_post(&self) -> f64 {
        self.b_post
    }

    /// `eᵀ(Ω + X P⁻¹ Xᵀ)⁻¹ e` with `e = y - mean`.
    pub fn quad_form(&self, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.dim());
        match &self.scale {
            ScaleMatrix::Diagonal(d) => y
                .iter()
                .zip(&self.mean)
                .zip(d)
                .map(|((yi, mi), di)| (yi - mi) * (yi - mi) / di)
                .sum(),
            ScaleMatrix::Dense { chol, .. } => {
                let mut e: Vec<f64> = y.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
                chol.forward_solve_in_place(&mut e);
                dot(&e, &e)
            }
        }
    }

    /// Log density for a given quadratic form and posterior `(a_n, b_n)`.
    pub fn log_pdf_with(&self, quad: f64, a_n: f64, b_n: f64) -> f64 {
        let half_s = 0.5 * self.dim() as f64;
        ln_gamma(a_n + half_s) - ln_gamma(a_n) - half_s * LN_2PI - 0.5 * self.log_det
            + a_n * b_n.ln()
            - (a_n + half_s) * (b_n + 0.5 * quad).ln()
    }

    pub fn log_pdf(&self, y: &[f64]) -> f64 {
        self.log_pdf_with(self.quad_form(y), self.a_post, self.b_post)
    }

    pub fn evaluate(&self, y: &[f64]) -> PredictiveEval {
        let quad = self.quad_form(y);
        let (a, b) = (self.a_post, self.b_post);
        let half_s = 0.5 * self.dim() as f64;
        let b_q = b + 0.5 * quad;
        PredictiveEval {
            log_pdf: self.log_pdf_with(quad, a, b),
            quad,
            d_a: digamma(a + half_s) - digamma(a) + b.ln() - b_q.ln(),
            d_b: a / b - (a + half_s) / b_q,
        }
    }

    /// `Ω + X P⁻¹ Xᵀ` (row-major), before scaling by `b_n / a_n`.
    pub fn shape_matrix(&self) -> Vec<f64> {
        match &self.scale {
            ScaleMatrix::Diagonal(d) => {
                let n = d.len();
                let mut m = vec![0.0; n * n];
                for (i, v) in d.iter().enumerate() {
                    m[i * n + i] = *v;
                }
                m
            }
            ScaleMatrix::Dense { matrix, .. } => matrix.clone(),
        }
    }

    /// Student-t scale matrix `(b_n / a_n)(Ω + X P⁻¹ Xᵀ)`.
    pub fn scale_matrix(&self) -> Vec<f64> {
        let f = self.b_post / self.a_post;
        self.shape_matrix().into_iter().map(|v| v * f).collect()
    }

    pub fn moments(&self) -> Moments {
        let scale = self.scale_matrix();
        match student_t_covariance(self.df(), &scale) {
            Some(covariance) => Moments {
                mean: self.mean.clone(),
                covariance,
                finite: true,
            },
            None => Moments {
                mean: self.mean.clone(),
                covariance: scale,
                finite: false,
            },
        }
    }
}

/// `df / (df - 2) · scale`, or `None` when `df <= 2`.
pub fn student_t_covariance(df: f64, scale: &[f64]) -> Option<Vec<f64>> {
    if df > 2.0 {
        let f = df / (df - 2.0);
        Some(scale.iter().map(|v| v * f).collect())
    } else {
        None
    }
}

/// One member of the model universe: a (SS)BVAR structure with its prior.
#[derive(Debug, Clone, PartialEq)]
pub struct BvarModel {
    name: String,
    structure: SsbvarStructure,
    prior: BvarPrior,
    layout: DesignLayout,
}

impl BvarModel {
    pub fn new(
        name: impl Into<String>,
        structure: SsbvarStructure,
        prior: BvarPrior,
    ) -> Result<Self> {
        prior.validate()?;
        if prior.omega.len() != structure.locations() {
            return Err(Error::DimensionMismatch {
                context: "Ω diagonal",
                expected: structure.locations(),
                actual: prior.omega.len(),
            });
        }
        let layout = structure.layout();
        Ok(Self {
            name: name.into(),
            structure,
            prior,
            layout,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn structure(&self) -> &SsbvarStructure {
        &self.structure
    }

    pub fn prior(&self) -> &BvarPrior {
        &self.prior
    }

    pub fn layout(&self) -> &DesignLayout {
        &self.layout
    }

    /// Number of past observations needed before the first prediction.
    pub fn lag_length(&self) -> usize {
        self.structure.lags()
    }

    pub fn locations(&self) -> usize {
        self.structure.locations()
    }

    /// Design rows for all locations; `history[l - 1] = y_{t-l}`.
    pub fn design_rows(&self, history: &[&[f64]], exogenous: &[f64]) -> Vec<Vec<f64>> {
        self.structure.design_rows(history, exogenous)
    }

    pub fn prior_stats(&self, a: f64, b: f64) -> Result<SufficientStatistics> {
        SufficientStatistics::with_hyperparameters(&self.prior, &self.layout, a, b)
    }

    pub fn predictive(
        &self,
        stats: &SufficientStatistics,
        rows: &[Vec<f64>],
    ) -> Result<Predictive> {
        stats.predictive(&self.prior, &self.layout, rows)
    }

    pub fn update(
        &self,
        stats: &mut SufficientStatistics,
        rows: &[Vec<f64>],
        y: &[f64],
        quad: f64,
    ) -> Result<()> {
        stats.update(&self.prior, &self.layout, rows, y, quad)
    }
}
