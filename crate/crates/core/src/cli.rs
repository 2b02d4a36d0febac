// SPDX-License-Identifier: Apache-2.0

//! Command-line front end: CSV ingestion, seasonal demeaning, run
//! configuration and the output files written by `bocpdms`.
//!
//! Output files in the output directory:
//!
//! * `steps.jsonl`: one JSON record per processed observation.
//! * `rld.csv`: log run-length distribution, one row per step, `-inf` for
//!   run lengths without retained mass.
//! * `segmentation.csv`: final MAP segmentation.
//! * `summary.json`: evidence, one-step MSE and NLL with 95% half widths,
//!   final hyperparameters and model posterior.
//! * `sgv.csv`: windowed SGV of the most probable model.
//! * `seasonal_means.csv`: only when demeaning by period.
//!
//! Log-space values use 17 significant digits; `-inf` is written as the
//! token `-inf` (quoted inside JSON).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Deserialize;

use crate::bvar::{BvarModel, BvarPrior};
use crate::engine::{Engine, EngineConfig, HazardSpec, ModelUniverse, RecursionMode, StepOutput};
use crate::error::{Error, Result};
use crate::evalgen::{
    metrics, sgv_trace, simulate, GridShape, MetricSummary, ScenarioSpec, SgvBasis,
};
use crate::hyperopt::HyperoptConfig;
use crate::spatial::{
    grid_points, lag_grid, sparsity_pattern, DecaySpec, NeighbourhoodSystem, Pooling, SparsityMask,
    SsbvarStructure,
};

/// Observations read from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Location ids from the header, index column excluded.
    pub columns: Vec<String>,
    /// Name and values of the index column, if one was named.
    pub index_name: Option<String>,
    pub index: Option<Vec<String>>,
    /// `series[t][s]`.
    pub series: Vec<Vec<f64>>,
    /// Largest number of decimals per column, `None` if some cell used
    /// exponent notation.
    pub decimals: Vec<Option<usize>>,
}

impl Dataset {
    /// Time label of step `t` (1-based): the index value or `t` itself.
    pub fn label(&self, t: usize) -> String {
        match &self.index {
            Some(ix) => ix[t - 1].clone(),
            None => t.to_string(),
        }
    }

    /// Formats `value` of column `s` the way the input wrote it.
    pub fn format_cell(&self, s: usize, value: f64) -> String {
        match self.decimals[s] {
            Some(d) => format!("{value:.d$}"),
            None => format!("{value}"),
        }
    }

    /// Writes the dataset back as CSV with `values` in place of the series;
    /// the index column comes first.
    pub fn write_csv<W: Write>(&self, out: W, values: &[Vec<f64>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let map = |e: csv::Error| Error::Config(format!("csv write failed: {e}"));
        let mut header = Vec::new();
        if let Some(name) = &self.index_name {
            header.push(name.clone());
        }
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(map)?;
        for (t, row) in values.iter().enumerate() {
            let mut rec = Vec::with_capacity(row.len() + 1);
            if let Some(ix) = &self.index {
                rec.push(ix[t].clone());
            }
            rec.extend(row.iter().enumerate().map(|(s, &v)| self.format_cell(s, v)));
            w.write_record(&rec).map_err(map)?;
        }
        w.flush()
            .map_err(|e| Error::Config(format!("csv write failed: {e}")))?;
        Ok(())
    }
}

fn decimals_of(text: &str) -> Option<usize> {
    if text.contains(['e', 'E']) {
        return None;
    }
    Some(text.split_once('.').map_or(0, |(_, frac)| frac.len()))
}

/// Reads a rectangular CSV with a header row of location ids.
pub fn ingest(path: impl AsRef<Path>, index_column: Option<&str>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, path, index_column)
}

/// As [`ingest`], reading from `reader`; `path` only labels errors.
pub fn ingest_reader<R: Read>(
    reader: R,
    path: &Path,
    index_column: Option<&str>,
) -> Result<Dataset> {
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(parse_err(1, 0, e.to_string())),
        None => return Err(parse_err(1, 0, "missing header row".into())),
    };
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(parse_err(1, 0, "missing header row".into()));
    }
    if let Some(c) = header.iter().position(|h| h.parse::<f64>().is_ok()) {
        return Err(parse_err(
            1,
            c + 1,
            "header must name locations, found a number".into(),
        ));
    }
    let index_pos = match index_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| parse_err(1, 0, format!("index column {name:?} not in header")))?,
        ),
        None => None,
    };
    let width = header.len();
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != index_pos)
        .map(|(_, h)| h.to_string())
        .collect();
    if columns.is_empty() {
        return Err(parse_err(1, 0, "no data columns".into()));
    }
    let mut series = Vec::new();
    let mut index = index_pos.map(|_| Vec::new());
    let mut decimals = vec![Some(0usize); columns.len()];
    for (k, rec) in records.enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| parse_err(row, 0, e.to_string()))?;
        if rec.len() != width {
            return Err(parse_err(
                row,
                rec.len().min(width) + 1,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        let mut values = Vec::with_capacity(columns.len());
        for (c, cell) in rec.iter().enumerate() {
            if Some(c) == index_pos {
                if let Some(ix) = index.as_mut() {
                    ix.push(cell.to_string());
                }
                continue;
            }
            if cell.is_empty() {
                return Err(parse_err(row, c + 1, "blank cell".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, c + 1, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, c + 1, format!("non-finite value {cell:?}")));
            }
            let s = values.len();
            decimals[s] = match (decimals[s], decimals_of(cell)) {
                (Some(a), Some(b)) => Some(a.max(b)),
                _ => None,
            };
            values.push(v);
        }
        series.push(values);
    }
    if series.is_empty() {
        return Err(parse_err(2, 0, "no data rows".into()));
    }
    Ok(Dataset {
        columns,
        index_name: index_column.map(str::to_string),
        index,
        series,
        decimals,
    })
}

/// Per-(phase, location) means removed by [`deseasonalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeasonalMeans {
    pub period: usize,
    /// `means[phase][s]`; step `t` (1-based) has phase `(t - 1) % period`.
    pub means: Vec<Vec<f64>>,
}

impl SeasonalMeans {
    /// Adds the means back to `values`, whose first row is step `first_t`.
    pub fn reseasonalize(&self, values: &[Vec<f64>], first_t: usize) -> Vec<Vec<f64>> {
        values
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let phase = (first_t - 1 + k) % self.period;
                row.iter()
                    .zip(&self.means[phase])
                    .map(|(v, m)| v + m)
                    .collect()
            })
            .collect()
    }
}

/// Subtracts the mean of each (phase, location) cell.
pub fn deseasonalize(series: &[Vec<f64>], period: usize) -> Result<(Vec<Vec<f64>>, SeasonalMeans)> {
    if period < 1 {
        return Err(Error::invalid("seasonal period must be at least 1"));
    }
    if series.len() < period {
        return Err(Error::invalid(format!(
            "series of length {} is shorter than the period {period}",
            series.len()
        )));
    }
    let s = series[0].len();
    let mut sums = vec![vec![0.0; s]; period];
    let mut counts = vec![0usize; period];
    for (t, row) in series.iter().enumerate() {
        counts[t % period] += 1;
        for (acc, v) in sums[t % period].iter_mut().zip(row) {
            *acc += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(row, &n)| row.into_iter().map(|v| v / n as f64).collect())
        .collect();
    let out = series
        .iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter()
                .zip(&means[t % period])
                .map(|(v, m)| v - m)
                .collect()
        })
        .collect();
    Ok((out, SeasonalMeans { period, means }))
}

/// Per-location mean and standard deviation used by `normalize`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

fn standardize(series: &mut [Vec<f64>]) -> Result<Standardization> {
    let n = series.len();
    if n < 2 {
        return Err(Error::Config(
            "normalisation needs at least two observations".into(),
        ));
    }
    let s = series[0].len();
    let mut mean = vec![0.0; s];
    for row in series.iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; s];
    for row in series.iter() {
        for ((acc, v), m) in sd.iter_mut().zip(row).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    for v in sd.iter_mut() {
        *v = (*v / (n - 1) as f64).sqrt();
        if !(*v > 0.0) {
            return Err(Error::Config("cannot normalise a constant series".into()));
        }
    }
    for row in series.iter_mut() {
        for ((v, m), d) in row.iter_mut().zip(&mean).zip(&sd) {
            *v = (*v - m) / d;
        }
    }
    Ok(Standardization { mean, sd })
}

/// Regression family of a model block in the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Independent autoregressions.
    Ar,
    /// Unrestricted VAR.
    Var,
    /// Neighbourhood-masked SSBVAR.
    Nbh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolingName {
    #[default]
    None,
    Location,
    Global,
}

impl From<PoolingName> for Pooling {
    fn from(p: PoolingName) -> Self {
        match p {
            PoolingName::None => Pooling::None,
            PoolingName::Location => Pooling::PerLocationRing,
            PoolingName::Global => Pooling::GlobalRing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagGridSpec {
    pub t1: usize,
    pub t2: usize,
    pub c: f64,
}

/// One `[[models]]` block: a family expanded over its lag lengths.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFamily {
    pub name: String,
    pub kind: ModelKind,
    #[serde(default)]
    pub lags: Vec<usize>,
    #[serde(default)]
    pub lag_grid: Option<LagGridSpec>,
    /// Ring radii for `nbh` models.
    #[serde(default)]
    pub radii: Vec<f64>,
    /// `Π(l)` per lag; defaults to every ring at every lag.
    #[serde(default)]
    pub decay: Vec<usize>,
    #[serde(default)]
    pub pooling: PoolingName,
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default = "one")]
    pub g: f64,
    #[serde(default)]
    pub omega: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    #[default]
    Paper,
    Strict,
}

impl From<ModeName> for RecursionMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Paper => RecursionMode::PaperFaithful,
            ModeName::Strict => RecursionMode::StrictPpm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SgvBasisName {
    #[default]
    Full,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperoptSection {
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
}

fn one() -> f64 {
    1.0
}

fn default_alpha0() -> f64 {
    crate::hyperopt::DEFAULT_ALPHA0
}

fn default_lambda() -> f64 {
    100.0
}

fn default_rmax() -> Option<usize> {
    Some(100)
}

fn default_horizon() -> usize {
    1
}

fn default_sgv_window() -> usize {
    8
}

fn default_rld_columns() -> usize {
    1000
}

fn default_true() -> bool {
    true
}

/// Contents of a run configuration file. Relative paths are resolved
/// against the directory of the file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Observation CSV.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Scenario file simulated instead of reading `data`.
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    /// Column holding time labels rather than a location.
    #[serde(default)]
    pub index_column: Option<String>,
    /// CSV of location coordinates, one row per location.
    #[serde(default)]
    pub coordinates: Option<PathBuf>,
    /// Regular grid alternative to `coordinates`.
    #[serde(default)]
    pub grid: Option<GridShape>,
    #[serde(default = "default_lambda")]
    pub hazard_lambda: f64,
    /// Hypotheses kept per model; `0` disables pruning.
    #[serde(default = "default_rmax", deserialize_with = "rmax_field")]
    pub r_max: Option<usize>,
    #[serde(default)]
    pub mode: ModeName,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Z-score each location before the run.
    #[serde(default)]
    pub normalize: bool,
    /// Period whose (phase, location) means are removed first.
    #[serde(default)]
    pub deseasonalize: Option<usize>,
    /// Replaces the seed of `scenario` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_sgv_window")]
    pub sgv_window: usize,
    #[serde(default)]
    pub sgv_basis: SgvBasisName,
    /// Width of `rld.csv`; run lengths beyond it are not written.
    #[serde(default = "default_rld_columns")]
    pub rld_columns: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub prior_q: Option<Vec<f64>>,
    #[serde(default)]
    pub hyperopt: Option<HyperoptSection>,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub models: Vec<ModelFamily>,
}

fn rmax_field<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<usize>, D::Error> {
    let v = usize::deserialize(d)?;
    Ok((v > 0).then_some(v))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a configuration file and resolves its relative paths.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data,
            &mut cfg.scenario,
            &mut cfg.coordinates,
            &mut cfg.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Range checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.models.is_empty() {
            return cfg("the model universe is empty: add at least one [[models]] block".into());
        }
        match (&self.data, &self.scenario) {
            (None, None) => return cfg("give either `data` or `scenario`".into()),
            (Some(_), Some(_)) => return cfg("`data` and `scenario` are mutually exclusive".into()),
            _ => {}
        }
        for p in [&self.data, &self.scenario, &self.coordinates]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return cfg(format!("file not found: {}", p.display()));
            }
        }
        if !(self.hazard_lambda >= 1.0) || !self.hazard_lambda.is_finite() {
            return cfg(format!(
                "hazard_lambda must be finite and >= 1, got {}",
                self.hazard_lambda
            ));
        }
        if self.horizon < 1 {
            return cfg("horizon must be at least 1".into());
        }
        if self.sgv_window < 2 {
            return cfg("sgv_window must be at least 2".into());
        }
        if self.deseasonalize == Some(0) {
            return cfg("deseasonalize period must be at least 1".into());
        }
        if let Some(h) = &self.hyperopt {
            HyperoptConfig::new(h.alpha0).map_err(|e| Error::Config(e.to_string()))?;
        }
        for fam in &self.models {
            if fam.lags.is_empty() == fam.lag_grid.is_none() {
                return cfg(format!(
                    "model {:?}: give exactly one of `lags` or `lag_grid`",
                    fam.name
                ));
            }
            if fam.kind == ModelKind::Nbh && fam.radii.is_empty() {
                return cfg(format!("model {:?}: nbh models need `radii`", fam.name));
            }
            if fam.kind != ModelKind::Nbh
                && (!fam.radii.is_empty() || fam.pooling != PoolingName::None)
            {
                return cfg(format!(
                    "model {:?}: radii and pooling apply to nbh models only",
                    fam.name
                ));
            }
            for (k, v) in [("a", fam.a), ("b", fam.b), ("g", fam.g)] {
                if !(v > 0.0) || !v.is_finite() {
                    return cfg(format!(
                        "model {:?}: {k} must be positive, got {v}",
                        fam.name
                    ));
                }
            }
        }
        Ok(())
    }
}

fn read_coordinates(path: &Path) -> Result<Vec<Vec<f64>>> {
    let ds = ingest(path, None)?;
    Ok(ds.series)
}

fn build_universe(
    cfg: &RunConfig,
    locations: usize,
    points: Option<&[Vec<f64>]>,
) -> Result<ModelUniverse> {
    let mut members = Vec::new();
    for fam in &cfg.models {
        let lags = match fam.lag_grid {
            Some(g) => lag_grid(g.t1, g.t2, g.c).map_err(|e| Error::Config(e.to_string()))?,
            None => fam.lags.clone(),
        };
        let omega = fam.omega.clone().unwrap_or_else(|| vec![1.0; locations]);
        let prior =
            BvarPrior::new(fam.a, fam.b, fam.g, omega).map_err(|e| Error::Config(e.to_string()))?;
        for &lag in &lags {
            let mask = match fam.kind {
                ModelKind::Ar => SparsityMask::diagonal(locations, lag),
                ModelKind::Var => SparsityMask::full(locations, lag),
                ModelKind::Nbh => {
                    let pts = points.ok_or_else(|| {
                        Error::Config(format!(
                            "model {:?} needs `coordinates` or `grid`",
                            fam.name
                        ))
                    })?;
                    if pts.len() != locations {
                        return Err(Error::Config(format!(
                            "{} coordinates for {locations} locations",
                            pts.len()
                        )));
                    }
                    let nbh = NeighbourhoodSystem::from_points(pts, &fam.radii)
                        .map_err(|e| Error::Config(e.to_string()))?;
                    let decay = if fam.decay.is_empty() {
                        DecaySpec::constant(lag, nbh.num_rings())
                    } else {
                        DecaySpec::new(fam.decay.clone())
                    };
                    sparsity_pattern(lag, &nbh, &decay, fam.pooling.into())
                        .map_err(|e| Error::Config(format!("model {:?}: {e}", fam.name)))?
                }
            };
            let name = if lags.len() > 1 {
                format!("{}_L{lag}", fam.name)
            } else {
                fam.name.clone()
            };
            let model = BvarModel::new(name, SsbvarStructure::new(mask, 0), prior.clone())
                .map_err(|e| Error::Config(e.to_string()))?;
            members.push(model);
        }
    }
    ModelUniverse::new(members, cfg.prior_q.clone()).map_err(|e| Error::Config(e.to_string()))
}

/// Series, labels and point set a run operates on.
struct Prepared {
    dataset: Dataset,
    points: Option<Vec<Vec<f64>>>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    if let Some(path) = &cfg.scenario {
        let mut spec = ScenarioSpec::from_file(path)?;
        if let Some(seed) = cfg.seed {
            spec.seed = seed;
        }
        let sim = simulate(&spec)?;
        let s = sim.series[0].len();
        return Ok(Prepared {
            points: Some(spec.points()?),
            dataset: Dataset {
                columns: (0..s).map(|i| format!("s{i}")).collect(),
                index_name: None,
                index: None,
                series: sim.series,
                decimals: vec![None; s],
            },
        });
    }
    let path = cfg.data.as_ref().expect("validated");
    let dataset = ingest(path, cfg.index_column.as_deref())?;
    let points = match (&cfg.coordinates, &cfg.grid) {
        (Some(p), None) => Some(read_coordinates(p)?),
        (None, Some(g)) => Some(grid_points(g.rows, g.cols)),
        (None, None) => None,
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "`coordinates` and `grid` are mutually exclusive".into(),
            ))
        }
    };
    Ok(Prepared { dataset, points })
}

/// Text form of a real: 17 significant digits, `-inf`/`inf`/`nan` tokens.
pub fn fmt_real(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.16e}")
    }
}

fn json_real(v: f64) -> String {
    if v.is_finite() {
        fmt_real(v)
    } else {
        format!("\"{}\"", fmt_real(v))
    }
}

fn json_str(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn json_array(vs: &[f64]) -> String {
    let items: Vec<String> = vs.iter().map(|&v| json_real(v)).collect();
    format!("[{}]", items.join(","))
}

/// Result of a completed or collapsed run.
#[derive(Debug, Clone)]
pub struct RunReport {
    /// Steps processed successfully.
    pub steps: usize,
    pub log_evidence: f64,
    /// MAP changepoints as time labels.
    pub changepoints: Vec<String>,
    /// Model name of each MAP segment, aligned with segment starts.
    pub segment_models: Vec<String>,
    pub metrics: Option<MetricSummary>,
    /// Final `p(m | y)`.
    pub model_posterior: Vec<f64>,
    pub model_names: Vec<String>,
    /// Set when the run stopped at a numerical collapse.
    pub collapsed_at: Option<usize>,
}

struct Outputs {
    dir: PathBuf,
    steps: BufWriter<File>,
    rld: BufWriter<File>,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_io(dir: &Path, name: &str, res: std::io::Result<()>) -> Result<()> {
    res.map_err(|e| Error::io(dir.join(name), e))
}

/// Runs the configured analysis and writes every output file into
/// `out_dir`. On numerical collapse the files cover the processed prefix,
/// `steps.jsonl` ends with a failure record and the error is returned.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let Prepared {
        mut dataset,
        points,
    } = prepare(cfg)?;
    let locations = dataset.columns.len();
    let universe = build_universe(cfg, locations, points.as_deref())?;
    let mut engine_cfg = EngineConfig::new(HazardSpec::constant(cfg.hazard_lambda)?);
    engine_cfg.mode = cfg.mode.into();
    engine_cfg.r_max = cfg.r_max;
    engine_cfg.horizon = cfg.horizon;
    engine_cfg.hyperopt = cfg.hyperopt.map(|h| HyperoptConfig { alpha0: h.alpha0 });
    engine_cfg.parallel = cfg.parallel;
    let model_names: Vec<String> = universe
        .members()
        .iter()
        .map(|m| m.name().to_string())
        .collect();
    let mut engine = Engine::new(universe, engine_cfg)?;

    let seasonal = match cfg.deseasonalize {
        Some(p) => {
            let (s, means) =
                deseasonalize(&dataset.series, p).map_err(|e| Error::Config(e.to_string()))?;
            dataset.series = s;
            Some(means)
        }
        None => None,
    };
    let standardization = if cfg.normalize {
        Some(standardize(&mut dataset.series)?)
    } else {
        None
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        steps: create(out_dir, "steps.jsonl")?,
        rld: create(out_dir, "rld.csv")?,
    };
    let width = cfg.rld_columns.min(dataset.series.len()).max(1);
    let header: Vec<String> = (0..width).map(|r| format!("r{r}")).collect();
    write_io(
        &out.dir,
        "rld.csv",
        writeln!(out.rld, "t,{}", header.join(",")),
    )?;

    let mut argmax = Vec::new();
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    let mut densities = Vec::new();
    let mut previous_mean: Option<Vec<f64>> = None;
    let mut last: Option<StepOutput> = None;
    let mut collapsed_at = None;
    for (k, y) in dataset.series.iter().enumerate() {
        let t = k + 1;
        let step = match engine.step(y) {
            Ok(s) => s,
            Err(Error::NumericalCollapse { t }) => {
                collapsed_at = Some(t);
                let rec = format!(
                    "{{\"t\":{t},\"time\":{},\"error\":\"numerical collapse\"}}",
                    json_str(&dataset.label(t))
                );
                write_io(&out.dir, "steps.jsonl", writeln!(out.steps, "{rec}"))?;
                break;
            }
            Err(e) => return Err(e),
        };
        let Some(step) = step else {
            write_io(
                &out.dir,
                "rld.csv",
                writeln!(out.rld, "{t},{}", vec!["-inf"; width].join(",")),
            )?;
            continue;
        };
        if let (Some(lp), Some(mean)) = (step.log_predictive, previous_mean.take()) {
            predicted.push(mean);
            actual.push(y.clone());
            densities.push(lp);
        }
        previous_mean = step.forecasts.first().map(|f| f.mean.clone());
        argmax.push(step.most_probable_model());
        write_step(&mut out, &dataset, &step, &model_names)?;
        write_rld_row(&mut out, &step, width)?;
        last = Some(step);
    }
    write_io(&out.dir, "steps.jsonl", out.steps.flush())?;
    write_io(&out.dir, "rld.csv", out.rld.flush())?;

    let summary_metrics = if predicted.is_empty() {
        None
    } else {
        Some(metrics(&predicted, &actual, &densities)?)
    };
    let (changepoints, segment_models) = match &last {
        Some(s) => write_segmentation(out_dir, &dataset, s, &model_names)?,
        None => {
            write_segmentation_header(out_dir)?;
            (Vec::new(), Vec::new())
        }
    };
    let basis = match cfg.sgv_basis {
        SgvBasisName::Full => SgvBasis::Full,
        SgvBasisName::Reduced => SgvBasis::Reduced,
    };
    write_sgv(
        out_dir,
        &argmax,
        model_names.len(),
        cfg.sgv_window,
        basis,
        dataset.series.len(),
    )?;
    if let Some(means) = &seasonal {
        write_seasonal(out_dir, &dataset, means)?;
    }
    let report = RunReport {
        steps: last.as_ref().map_or(0, |s| s.t),
        log_evidence: last.as_ref().map_or(f64::NEG_INFINITY, |s| s.log_evidence),
        changepoints,
        segment_models,
        metrics: summary_metrics,
        model_posterior: last
            .as_ref()
            .map(|s| s.model_posterior.clone())
            .unwrap_or_default(),
        model_names,
        collapsed_at,
    };
    write_summary(out_dir, &report, &engine, standardization.as_ref())?;
    match collapsed_at {
        Some(t) => Err(Error::NumericalCollapse { t }),
        None => Ok(report),
    }
}

fn write_step(out: &mut Outputs, ds: &Dataset, step: &StepOutput, names: &[String]) -> Result<()> {
    let forecasts: Vec<String> = step
        .forecasts
        .iter()
        .map(|f| {
            let s = f.mean.len();
            let var: Vec<f64> = (0..s).map(|i| f.covariance[i * s + i]).collect();
            format!(
                "{{\"h\":{},\"mean\":{},\"variance\":{},\"finite\":{}}}",
                f.horizon,
                json_array(&f.mean),
                json_array(&var),
                f.finite
            )
        })
        .collect();
    let cp = step
        .map
        .entries
        .last()
        .is_some_and(|&(start, _)| start == step.t);
    let map_model = step.map.entries.last().map_or(0, |&(_, m)| m);
    let rec = format!(
        "{{\"t\":{},\"time\":{},\"log_evidence\":{},\"log_predictive\":{},\"model_posterior\":{},\
         \"most_probable_model\":{},\"rld_argmax\":{},\"map_model\":{},\"changepoint\":{},\"forecasts\":[{}]}}",
        step.t,
        json_str(&ds.label(step.t)),
        json_real(step.log_evidence),
        step.log_predictive.map_or("null".into(), json_real),
        json_array(&step.model_posterior),
        json_str(&names[step.most_probable_model()]),
        step.rld_argmax(),
        json_str(&names[map_model]),
        cp,
        forecasts.join(",")
    );
    write_io(&out.dir, "steps.jsonl", writeln!(out.steps, "{rec}"))
}

fn write_rld_row(out: &mut Outputs, step: &StepOutput, width: usize) -> Result<()> {
    let mut row = vec![f64::NEG_INFINITY; width];
    for &(r, p) in &step.global_rld {
        if r < width {
            row[r] = p.ln();
        }
    }
    let cells: Vec<String> = row.into_iter().map(fmt_real).collect();
    write_io(
        &out.dir,
        "rld.csv",
        writeln!(out.rld, "{},{}", step.t, cells.join(",")),
    )
}

fn write_segmentation_header(dir: &Path) -> Result<()> {
    let mut w = create(dir, "segmentation.csv")?;
    write_io(
        dir,
        "segmentation.csv",
        writeln!(w, "start_t,start_time,model"),
    )?;
    write_io(dir, "segmentation.csv", w.flush())
}

fn write_segmentation(
    dir: &Path,
    ds: &Dataset,
    step: &StepOutput,
    names: &[String],
) -> Result<(Vec<String>, Vec<String>)> {
    let mut w = create(dir, "segmentation.csv")?;
    let name = "segmentation.csv";
    write_io(dir, name, writeln!(w, "start_t,start_time,model"))?;
    let mut models = Vec::new();
    for &(start, m) in &step.map.entries {
        write_io(
            dir,
            name,
            writeln!(
                w,
                "{start},{},{}",
                csv_cell(&ds.label(start)),
                csv_cell(&names[m])
            ),
        )?;
        models.push(names[m].clone());
    }
    write_io(
        dir,
        name,
        writeln!(
            w,
            "# log_map_density,{}",
            fmt_real(step.map.log_map_density)
        ),
    )?;
    write_io(dir, name, w.flush())?;
    let cps = step
        .map
        .changepoints()
        .into_iter()
        .map(|t| ds.label(t))
        .collect();
    Ok((cps, models))
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_sgv(
    dir: &Path,
    argmax: &[usize],
    n_models: usize,
    window: usize,
    basis: SgvBasis,
    t_total: usize,
) -> Result<()> {
    let name = "sgv.csv";
    let mut w = create(dir, name)?;
    write_io(dir, name, writeln!(w, "t,sgv,log_sgv,shortened"))?;
    if !argmax.is_empty() {
        let first_t = t_total.saturating_sub(argmax.len()) + 1;
        let trace = sgv_trace(argmax, n_models, window, basis)?;
        for (k, p) in trace.iter().enumerate() {
            write_io(
                dir,
                name,
                writeln!(
                    w,
                    "{},{},{},{}",
                    first_t + k,
                    fmt_real(p.value),
                    fmt_real(p.log_value),
                    p.shortened
                ),
            )?;
        }
    }
    write_io(dir, name, w.flush())
}

fn write_seasonal(dir: &Path, ds: &Dataset, means: &SeasonalMeans) -> Result<()> {
    let name = "seasonal_means.csv";
    let mut w = create(dir, name)?;
    let cols: Vec<String> = ds.columns.iter().map(|c| csv_cell(c)).collect();
    write_io(dir, name, writeln!(w, "phase,{}", cols.join(",")))?;
    for (phase, row) in means.means.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        write_io(dir, name, writeln!(w, "{phase},{}", cells.join(",")))?;
    }
    write_io(dir, name, w.flush())
}

fn write_summary(
    dir: &Path,
    report: &RunReport,
    engine: &Engine,
    stdz: Option<&Standardization>,
) -> Result<()> {
    let name = "summary.json";
    let mut w = create(dir, name)?;
    let estimate = |e: crate::evalgen::Estimate| {
        format!(
            "{{\"mean\":{},\"half_width\":{}}}",
            json_real(e.mean),
            json_real(e.half_width)
        )
    };
    let (mse, nll, n) = match &report.metrics {
        Some(m) => (estimate(m.mse), estimate(m.nll), m.n),
        None => ("null".into(), "null".into(), 0),
    };
    let models: Vec<String> = report
        .model_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (a, b) = engine.hyperparameters(i);
            format!(
                "{{\"name\":{},\"posterior\":{},\"a\":{},\"b\":{}}}",
                json_str(name),
                json_real(report.model_posterior.get(i).copied().unwrap_or(0.0)),
                json_real(a),
                json_real(b)
            )
        })
        .collect();
    let cps: Vec<String> = report.changepoints.iter().map(|c| json_str(c)).collect();
    let status = match report.collapsed_at {
        Some(t) => format!("{{\"collapse_at\":{t}}}"),
        None => "\"ok\"".into(),
    };
    let norm = match stdz {
        Some(s) => format!(
            "{{\"mean\":{},\"sd\":{}}}",
            json_array(&s.mean),
            json_array(&s.sd)
        ),
        None => "null".into(),
    };
    let text = format!(
        "{{\n  \"status\":{status},\n  \"steps\":{},\n  \"log_evidence\":{},\n  \"mse\":{mse},\n  \"nll\":{nll},\n  \
         \"metric_steps\":{n},\n  \"changepoints\":[{}],\n  \"normalization\":{norm},\n  \"models\":[{}]\n}}\n",
        report.steps,
        json_real(report.log_evidence),
        cps.join(","),
        models.join(",")
    );
    write_io(dir, name, w.write_all(text.as_bytes()))?;
    write_io(dir, name, w.flush())
}

/// Command-line arguments; flags override the configuration file.
#[derive(Debug, Parser)]
#[command(
    name = "bocpdms",
    version,
    about = "Bayesian on-line changepoint detection with model selection"
)]
pub struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Observation CSV, replacing `data` in the configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scenario file to simulate instead of reading data.
    #[arg(long, conflicts_with = "data")]
    pub scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["paper", "strict"])]
    pub mode: Option<String>,
    /// Hypotheses kept per model; 0 disables pruning.
    #[arg(long)]
    pub rmax: Option<usize>,
    /// Expected segment length of the constant hazard.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Seed for simulated scenarios.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Process exit code of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 1,
        Error::Parse { .. } => 2,
        Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => 3,
        Error::NumericalCollapse { .. } => 4,
        Error::NotPositiveDefinite(_) | Error::State(_) | Error::UnstableSegment { .. } => 5,
    }
}

/// Configuration after applying command-line overrides.
pub fn resolve(args: &Args) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
        cfg.scenario = None;
    }
    if let Some(s) = &args.scenario {
        cfg.scenario = Some(s.clone());
        cfg.data = None;
    }
    if let Some(m) = &args.mode {
        cfg.mode = if m == "strict" {
            ModeName::Strict
        } else {
            ModeName::Paper
        };
    }
    if let Some(r) = args.rmax {
        cfg.r_max = (r > 0).then_some(r);
    }
    if let Some(l) = args.lambda {
        cfg.hazard_lambda = l;
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("bocpdms_out"));
    Ok((cfg, out))
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args(args: Args) -> i32 {
    let result = resolve(&args).and_then(|(cfg, out)| {
        let started = std::time::Instant::now();
        let report = run(&cfg, &out)?;
        eprintln!(
            "processed {} steps in {:.2?}; log evidence {:.6}; changepoints at {:?}",
            report.steps,
            started.elapsed(),
            report.log_evidence,
            report.changepoints
        );
        Ok(())
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
