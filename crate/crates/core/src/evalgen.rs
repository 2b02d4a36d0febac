// SPDX-License-Identifier: Apache-2.0

//! Synthetic scenarios with planted changepoints, exhaustive oracles for
//! small streams, and evaluation metrics.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::bvar::batch::batch_log_marginal;
use crate::engine::{HazardSpec, ModelUniverse, Segmentation};
use crate::error::{invalid, Error, Result};
use crate::math::log_sum_exp;
use crate::spatial::{grid_points, NeighbourhoodSystem};

/// Largest number of modelled steps the exhaustive oracles accept.
pub const BRUTE_FORCE_MAX_STEPS: usize = 12;

/// Spatial layout of a scenario.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

/// Generator of one segment.
///
/// Lag matrices come either from `coefficients[l][s][s']` or from
/// `ring_coefficients[l][i]`, the coefficient shared by all members of ring
/// `i` (ring 0 is the location itself) at lag `l + 1`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    /// First time index of the segment (1-based).
    pub start: usize,
    #[serde(default)]
    pub label: String,
    #[serde(default = "one")]
    pub noise_sd: f64,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default)]
    pub ring_coefficients: Vec<Vec<f64>>,
    #[serde(default)]
    pub coefficients: Vec<Vec<Vec<f64>>>,
}

fn one() -> f64 {
    1.0
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub t: usize,
    pub seed: u64,
    /// Steps simulated under the first segment and discarded.
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default)]
    pub grid: Option<GridShape>,
    #[serde(default)]
    pub coords: Option<Vec<Vec<f64>>>,
    pub segments: Vec<SegmentSpec>,
}

/// Simulated stream with its planted truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// `series[t - 1]` is `y_t`.
    pub series: Vec<Vec<f64>>,
    /// `(start, label)` per segment.
    pub truth: Vec<(usize, String)>,
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn points(&self) -> Result<Vec<Vec<f64>>> {
        match (&self.grid, &self.coords) {
            (Some(g), None) => Ok(grid_points(g.rows, g.cols)),
            (None, Some(c)) => Ok(c.clone()),
            _ => Err(Error::Config(
                "scenario needs exactly one of `grid` or `coords`".into(),
            )),
        }
    }

    /// Lag matrices `A_l` (row-major `S × S`) of every segment.
    pub fn lag_matrices(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        let points = self.points()?;
        let s = points.len();
        let mut out = Vec::with_capacity(self.segments.len());
        for (k, seg) in self.segments.iter().enumerate() {
            let mats = match (
                seg.coefficients.is_empty(),
                seg.ring_coefficients.is_empty(),
            ) {
                (false, true) => {
                    let mut mats = Vec::new();
                    for a in &seg.coefficients {
                        if a.len() != s || a.iter().any(|row| row.len() != s) {
                            return Err(Error::Config(format!(
                                "segment {k}: lag matrices must be {s} × {s}"
                            )));
                        }
                        mats.push(a.iter().flatten().copied().collect());
                    }
                    mats
                }
                (true, false) => {
                    let n_rings = seg
                        .ring_coefficients
                        .iter()
                        .map(Vec::len)
                        .max()
                        .unwrap_or(0);
                    let nbh = if n_rings > 1 {
                        if seg.radii.len() + 1 < n_rings {
                            return Err(Error::Config(format!(
                                "segment {k}: {} ring coefficients need {} radii",
                                n_rings,
                                n_rings - 1
                            )));
                        }
                        NeighbourhoodSystem::from_points(&points, &seg.radii)?
                    } else {
                        NeighbourhoodSystem::isolated(s)
                    };
                    let mut mats = Vec::new();
                    for coefs in &seg.ring_coefficients {
                        let mut a = vec![0.0; s * s];
                        for target in 0..s {
                            for (i, &c) in coefs.iter().enumerate() {
                                for src in nbh.members(target, i) {
                                    a[target * s + src] = c;
                                }
                            }
                        }
                        mats.push(a);
                    }
                    mats
                }
                (true, true) => Vec::new(),
                (false, false) => {
                    return Err(Error::Config(format!(
                        "segment {k}: give either `coefficients` or `ring_coefficients`"
                    )))
                }
            };
            out.push(mats);
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("scenario length must be positive".into()));
        }
        let first = self
            .segments
            .first()
            .ok_or_else(|| Error::Config("scenario needs at least one segment".into()))?;
        if first.start != 1 {
            return Err(Error::Config(
                "the first segment must start at t = 1".into(),
            ));
        }
        for w in self.segments.windows(2) {
            if w[1].start <= w[0].start {
                return Err(Error::Config(
                    "segment starts must be strictly increasing".into(),
                ));
            }
        }
        for seg in &self.segments {
            if !(seg.noise_sd > 0.0) || !seg.noise_sd.is_finite() {
                return Err(Error::Config(format!(
                    "noise_sd must be positive, got {}",
                    seg.noise_sd
                )));
            }
        }
        Ok(())
    }
}

/// Spectral radius of the companion matrix of `y_t = Σ A_l y_{t-l}`.
pub fn companion_spectral_radius(lag_matrices: &[Vec<f64>], s: usize) -> f64 {
    let l = lag_matrices.len();
    if l == 0 || s == 0 {
        return 0.0;
    }
    let n = s * l;
    let mut c = DMatrix::<f64>::zeros(n, n);
    for (lag, a) in lag_matrices.iter().enumerate() {
        for i in 0..s {
            for j in 0..s {
                c[(i, lag * s + j)] = a[i * s + j];
            }
        }
    }
    for i in s..n {
        c[(i, i - s)] = 1.0;
    }
    c.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Simulates the scenario; identical spec and seed give identical output.
pub fn simulate(spec: &ScenarioSpec) -> Result<Simulation> {
    spec.validate()?;
    let s = spec.points()?.len();
    let mats = spec.lag_matrices()?;
    for (k, m) in mats.iter().enumerate() {
        let radius = companion_spectral_radius(m, s);
        if radius >= 1.0 {
            return Err(Error::UnstableSegment { segment: k, radius });
        }
    }
    let max_lag = mats.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut past: Vec<Vec<f64>> = Vec::new();
    let mut series = Vec::with_capacity(spec.t);
    let total = spec.burn_in + spec.t;
    let mut seg_idx = 0;
    for step in 0..total {
        let t = step as i64 - spec.burn_in as i64 + 1;
        while seg_idx + 1 < spec.segments.len() && t >= spec.segments[seg_idx + 1].start as i64 {
            seg_idx += 1;
        }
        let seg = &spec.segments[seg_idx];
        let mut y = vec![seg.intercept; s];
        for (lag, a) in mats[seg_idx].iter().enumerate() {
            if let Some(prev) = past.get(past.len().wrapping_sub(lag + 1)) {
                for i in 0..s {
                    y[i] += (0..s).map(|j| a[i * s + j] * prev[j]).sum::<f64>();
                }
            }
        }
        for v in y.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += seg.noise_sd * e;
        }
        past.push(y.clone());
        if past.len() > max_lag.max(1) {
            past.remove(0);
        }
        if t >= 1 {
            series.push(y);
        }
    }
    let truth = spec
        .segments
        .iter()
        .map(|seg| (seg.start, seg.label.clone()))
        .collect();
    Ok(Simulation { series, truth })
}

/// Per-model log marginal likelihoods of every contiguous block of modelled
/// steps, `table[m][i][j]` for steps `i..=j`.
fn segment_marginals(
    series: &[Vec<f64>],
    universe: &ModelUniverse,
) -> Result<(usize, Vec<Vec<Vec<f64>>>)> {
    if universe.exogenous() != 0 {
        return Err(invalid(
            "exhaustive oracles do not support exogenous inputs",
        ));
    }
    let lag = universe.members()[0].lag_length();
    if universe.members().iter().any(|m| m.lag_length() != lag) {
        return Err(invalid("exhaustive oracles need a common lag length"));
    }
    if series.len() <= lag {
        return Err(invalid("series too short for the lag length"));
    }
    let n = series.len() - lag;
    if n > BRUTE_FORCE_MAX_STEPS {
        return Err(invalid(format!(
            "exhaustive enumeration refused: {n} modelled steps exceed {BRUTE_FORCE_MAX_STEPS}"
        )));
    }
    let mut table = Vec::with_capacity(universe.len());
    for model in universe.members() {
        let rows: Vec<Vec<Vec<f64>>> = (lag..series.len())
            .map(|t| {
                let hist: Vec<&[f64]> = (1..=lag).map(|l| series[t - l].as_slice()).collect();
                model.design_rows(&hist, &[])
            })
            .collect();
        let prior = model.prior();
        let mut m_table = vec![vec![f64::NAN; n]; n];
        for i in 0..n {
            for j in i..n {
                m_table[i][j] = batch_log_marginal(
                    prior,
                    model.layout(),
                    prior.a,
                    prior.b,
                    &rows[i..=j],
                    &series[lag + i..=lag + j],
                )?;
            }
        }
        table.push(m_table);
    }
    Ok((lag, table))
}

/// Segment boundaries of composition `mask` over `n` steps.
fn segments_of(mask: u32, n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..n {
        if mask & (1 << (k - 1)) != 0 {
            out.push((start, k - 1));
            start = k;
        }
    }
    out.push((start, n - 1));
    out
}

/// `ln p(y_{L+1:T} | y_{1:L})` summed over every segmentation and model
/// assignment under product-partition semantics.
pub fn brute_force_evidence(
    series: &[Vec<f64>],
    universe: &ModelUniverse,
    hazard: HazardSpec,
) -> Result<f64> {
    let (_, table) = segment_marginals(series, universe)?;
    let n = table[0].len();
    let log_q: Vec<f64> = universe.prior_q().iter().map(|q| q.ln()).collect();
    let mut terms = Vec::with_capacity(1 << (n - 1));
    for mask in 0..(1u32 << (n - 1)) {
        let segs = segments_of(mask, n);
        let cps = segs.len() - 1;
        let mut v = cps as f64 * hazard.log_h() + (n - 1 - cps) as f64 * hazard.log_1m_h();
        for &(i, j) in &segs {
            let per_model: Vec<f64> = (0..universe.len())
                .map(|m| log_q[m] + table[m][i][j])
                .collect();
            v += log_sum_exp(&per_model);
        }
        terms.push(v);
    }
    Ok(log_sum_exp(&terms))
}

/// Most probable segmentation and model assignment by enumeration. Times
/// in the result are absolute (1-based).
pub fn brute_force_map(
    series: &[Vec<f64>],
    universe: &ModelUniverse,
    hazard: HazardSpec,
) -> Result<Segmentation> {
    let (lag, table) = segment_marginals(series, universe)?;
    let n = table[0].len();
    let log_q: Vec<f64> = universe.prior_q().iter().map(|q| q.ln()).collect();
    let mut best: Option<Segmentation> = None;
    for mask in 0..(1u32 << (n - 1)) {
        let segs = segments_of(mask, n);
        let cps = segs.len() - 1;
        let mut v = cps as f64 * hazard.log_h() + (n - 1 - cps) as f64 * hazard.log_1m_h();
        let mut entries = Vec::with_capacity(segs.len());
        for &(i, j) in &segs {
            let mut bm = 0;
            for m in 1..universe.len() {
                if log_q[m] + table[m][i][j] > log_q[bm] + table[bm][i][j] {
                    bm = m;
                }
            }
            v += log_q[bm] + table[bm][i][j];
            entries.push((lag + i + 1, bm));
        }
        if best.as_ref().is_none_or(|b| v > b.log_map_density) {
            best = Some(Segmentation {
                entries,
                log_map_density: v,
            });
        }
    }
    Ok(best.expect("at least one segmentation"))
}

/// Mean with a 95% normal-approximation half width (`1.96 · SEM`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(invalid("cannot summarise an empty sample"));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let half_width = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, half_width })
    }
}

/// One-step-ahead accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mse: Estimate,
    pub nll: Estimate,
    pub n: usize,
}

/// MSE of point forecasts (averaged over locations, then steps) and mean
/// negative predictive log density.
pub fn metrics(
    predicted: &[Vec<f64>],
    actual: &[Vec<f64>],
    log_densities: &[f64],
) -> Result<MetricSummary> {
    if predicted.is_empty() {
        return Err(invalid("metrics need at least one prediction"));
    }
    if predicted.len() != actual.len() || predicted.len() != log_densities.len() {
        return Err(invalid("predictions, actuals and densities must align"));
    }
    let sq: Vec<f64> = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| p.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / p.len() as f64)
        .collect();
    let nll: Vec<f64> = log_densities.iter().map(|l| -l).collect();
    Ok(MetricSummary {
        mse: Estimate::from_samples(&sq)?,
        nll: Estimate::from_samples(&nll)?,
        n: predicted.len(),
    })
}

/// Indicator basis for the standardized generalized variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SgvBasis {
    /// One-hot over all `|M|` models. Its covariance is always singular, so
    /// the value is identically zero.
    #[default]
    Full,
    /// Drops the last category; root taken over `|M| - 1` dimensions.
    Reduced,
}

/// SGV at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgvPoint {
    pub value: f64,
    /// `ln value`; `-inf` for a zero determinant.
    pub log_value: f64,
    /// Set while fewer than `window` steps are available.
    pub shortened: bool,
}

/// Windowed SGV of the most probable model index.
pub fn sgv_trace(
    argmax: &[usize],
    n_models: usize,
    window: usize,
    basis: SgvBasis,
) -> Result<Vec<SgvPoint>> {
    if window < 2 {
        return Err(invalid("SGV window must be at least 2"));
    }
    if n_models == 0 || argmax.iter().any(|&m| m >= n_models) {
        return Err(invalid("model index out of range"));
    }
    let dim = match basis {
        SgvBasis::Full => n_models,
        SgvBasis::Reduced => n_models - 1,
    };
    let mut out = Vec::with_capacity(argmax.len());
    for t in 0..argmax.len() {
        let lo = (t + 1).saturating_sub(window);
        let win = &argmax[lo..=t];
        let shortened = win.len() < window;
        let value = if dim == 0 || win.len() < 2 {
            0.0
        } else {
            let n = win.len() as f64;
            let mut p = vec![0.0; dim];
            for &m in win {
                if m < dim {
                    p[m] += 1.0 / n;
                }
            }
            // One-hot sample covariance: (n / (n - 1)) (diag(p) - p pᵀ).
            let f = n / (n - 1.0);
            let cov = DMatrix::from_fn(dim, dim, |i, j| {
                f * (if i == j { p[i] } else { 0.0 } - p[i] * p[j])
            });
            let eig = cov.symmetric_eigenvalues();
            let max = eig.iter().copied().fold(0.0, f64::max);
            if eig.iter().any(|&e| e <= 1e-12 * max.max(1e-300)) {
                0.0
            } else {
                (eig.iter().map(|e| e.ln()).sum::<f64>() / dim as f64).exp()
            }
        };
        out.push(SgvPoint {
            value,
            log_value: value.ln(),
            shortened,
        });
    }
    Ok(out)
}
