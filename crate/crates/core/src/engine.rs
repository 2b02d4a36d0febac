// SPDX-License-Identifier: Apache-2.0

//! Joint run-length and model recursion.
//!
//! Every retained hypothesis `(m, r)` holds `ln p(y_{1:t}, r_t = r, m_t = m)`
//! together with the conjugate statistics of its current segment. A step
//! evaluates all predictives read-only, forms growth and changepoint masses,
//! aggregates them into the evidence and posteriors, updates the MAP
//! segmentation, prunes, and only then mutates the surviving statistics.
//! A collapse (all masses `-inf`) therefore leaves the engine at the last
//! valid step.

use std::collections::{BTreeMap, VecDeque};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::bvar::{BvarModel, Predictive, PredictiveEval, SufficientStatistics};
use crate::error::{invalid, Error, Result};
use crate::hyperopt::{axpy, chain_to_log_space, Grad2, HyperState, HyperoptConfig};
use crate::math::LogSumExp;

/// Constant hazard `H = 1 / λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardSpec {
    lambda: f64,
}

impl HazardSpec {
    /// `λ >= 1` so that `H ∈ (0, 1]`.
    pub fn constant(lambda: f64) -> Result<Self> {
        if !(lambda >= 1.0) || !lambda.is_finite() {
            return Err(invalid(format!(
                "expected run length λ must be finite and >= 1, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn h(&self) -> f64 {
        1.0 / self.lambda
    }

    pub fn log_h(&self) -> f64 {
        -self.lambda.ln()
    }

    /// `ln(1 - H)`; `-inf` when `λ = 1`.
    pub fn log_1m_h(&self) -> f64 {
        (-1.0 / self.lambda).ln_1p()
    }
}

/// Whether growth masses carry the conditional model posterior at the
/// parent run length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RecursionMode {
    /// Growth includes `q(m | y_{1:t-1}, r_{t-1})`.
    #[default]
    PaperFaithful,
    /// Growth omits that factor; the evidence is then the exact sum over
    /// segmentations of a product partition model.
    StrictPpm,
}

impl FromStr for RecursionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" | "paper-faithful" => Ok(Self::PaperFaithful),
            "strict" | "strict-ppm" => Ok(Self::StrictPpm),
            other => Err(invalid(format!(
                "unknown recursion mode {other:?} (expected \"paper\" or \"strict\")"
            ))),
        }
    }
}

/// Candidate models with prior probabilities `q(m)`.
#[derive(Debug, Clone)]
pub struct ModelUniverse {
    members: Vec<BvarModel>,
    prior_q: Vec<f64>,
}

impl ModelUniverse {
    /// Uniform `q` when `prior_q` is `None`.
    pub fn new(members: Vec<BvarModel>, prior_q: Option<Vec<f64>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| invalid("model universe must not be empty"))?;
        let (s, e) = (first.locations(), first.structure().exogenous());
        for m in &members {
            if m.locations() != s || m.structure().exogenous() != e {
                return Err(invalid(format!(
                    "model {:?} has {} locations and {} exogenous inputs, expected {s} and {e}",
                    m.name(),
                    m.locations(),
                    m.structure().exogenous()
                )));
            }
        }
        for (i, m) in members.iter().enumerate() {
            if members[..i].iter().any(|o| o.name() == m.name()) {
                return Err(invalid(format!("duplicate model name {:?}", m.name())));
            }
        }
        let n = members.len();
        let prior_q = prior_q.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        if prior_q.len() != n {
            return Err(Error::DimensionMismatch {
                context: "model prior",
                expected: n,
                actual: prior_q.len(),
            });
        }
        if prior_q.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
            return Err(invalid("model prior probabilities must be non-negative"));
        }
        let total: f64 = prior_q.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("model prior must sum to 1, got {total}")));
        }
        Ok(Self { members, prior_q })
    }

    pub fn members(&self) -> &[BvarModel] {
        &self.members
    }

    pub fn prior_q(&self) -> &[f64] {
        &self.prior_q
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn locations(&self) -> usize {
        self.members[0].locations()
    }

    pub fn exogenous(&self) -> usize {
        self.members[0].structure().exogenous()
    }

    pub fn max_lag(&self) -> usize {
        self.members
            .iter()
            .map(BvarModel::lag_length)
            .max()
            .unwrap_or(0)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.members.iter().position(|m| m.name() == name)
    }
}

/// Engine settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub hazard: HazardSpec,
    pub mode: RecursionMode,
    /// Run lengths kept per model (plus `r = 0`); `None` disables pruning.
    pub r_max: Option<usize>,
    /// Forecast horizons `1..=horizon` emitted each step.
    pub horizon: usize,
    pub hyperopt: Option<HyperoptConfig>,
    /// Fan per-model work out over the rayon pool.
    pub parallel: bool,
}

impl EngineConfig {
    pub fn new(hazard: HazardSpec) -> Self {
        Self {
            hazard,
            mode: RecursionMode::default(),
            r_max: None,
            horizon: 1,
            hyperopt: None,
            parallel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_max == Some(0) {
            return Err(invalid("R_max must be at least 1"));
        }
        if self.horizon < 1 {
            return Err(invalid("forecast horizon must be at least 1"));
        }
        if let Some(h) = self.hyperopt {
            HyperoptConfig::new(h.alpha0)?;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct SegNode {
    cp_time: usize,
    model: usize,
    prev: Option<Arc<SegNode>>,
}

// Iterative drop so long chains cannot overflow the stack.
impl Drop for SegNode {
    fn drop(&mut self) {
        let mut next = self.prev.take();
        while let Some(node) = next {
            match Arc::try_unwrap(node) {
                Ok(mut n) => next = n.prev.take(),
                Err(_) => break,
            }
        }
    }
}

/// Changepoints `(time, model)` in increasing time order with the log of
/// the MAP density.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub entries: Vec<(usize, usize)>,
    pub log_map_density: f64,
}

impl Segmentation {
    fn from_node(node: &Option<Arc<SegNode>>, log_map_density: f64) -> Self {
        let mut entries = Vec::new();
        let mut cur = node.as_ref();
        while let Some(n) = cur {
            entries.push((n.cp_time, n.model));
            cur = n.prev.as_ref();
        }
        entries.reverse();
        Self {
            entries,
            log_map_density,
        }
    }

    /// Changepoint times after the first segment start.
    pub fn changepoints(&self) -> Vec<usize> {
        self.entries.iter().skip(1).map(|&(t, _)| t).collect()
    }
}

/// One retained `(m, r)` hypothesis.
#[derive(Debug, Clone)]
pub struct GridEntry {
    run_length: usize,
    log_joint: f64,
    stats: SufficientStatistics,
    /// `ln MAP_{b-1} - ln p(y_{1:b-1})` for birth time `b`.
    map_parent: f64,
    seg_parent: Option<Arc<SegNode>>,
    log_cq: f64,
    d: Vec<Grad2>,
    dlog_cq: Vec<Grad2>,
    next: Option<Predictive>,
}

impl GridEntry {
    pub fn run_length(&self) -> usize {
        self.run_length
    }

    pub fn log_joint(&self) -> f64 {
        self.log_joint
    }

    pub fn stats(&self) -> &SufficientStatistics {
        &self.stats
    }

    /// `ln q(m | y_{1:t}, r)` from the step that produced this entry.
    pub fn log_cond_model_posterior(&self) -> f64 {
        self.log_cq
    }

    /// Derivatives of the log joint with respect to `(ln a_j, ln b_j)`.
    pub fn log_joint_gradient(&self) -> &[Grad2] {
        &self.d
    }
}

/// Retained hypotheses of one model in increasing run-length order.
#[derive(Debug, Clone, Default)]
pub struct RunLengthGrid {
    entries: Vec<GridEntry>,
}

impl RunLengthGrid {
    pub fn entries(&self) -> &[GridEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn run_lengths(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.run_length).collect()
    }

    pub fn log_joints(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.log_joint).collect()
    }
}

/// One cell of the joint posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointEntry {
    pub model: usize,
    pub run_length: usize,
    pub log_joint: f64,
    pub probability: f64,
    /// `ln q(m | y_{1:t}, r)`.
    pub log_cond_model_posterior: f64,
}

/// Mixture forecast of `y_{t+h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub horizon: usize,
    pub mean: Vec<f64>,
    /// Row-major `S × S`.
    pub covariance: Vec<f64>,
    /// False when some component had `df <= 2` and its scale matrix was
    /// used instead of the (infinite) covariance.
    pub finite: bool,
}

/// Everything the engine reports after processing `y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub t: usize,
    /// `ln p(y_{1:t})` over the active hypotheses (before pruning).
    pub log_evidence: f64,
    /// Evidence gained this step relative to the pruned state of `t - 1`.
    pub log_evidence_increment: f64,
    /// Mixture predictive log density of `y_t` given `y_{1:t-1}`; `None` on
    /// the first active step.
    pub log_predictive: Option<f64>,
    /// Joint posterior before pruning, model-major, run lengths ascending.
    pub joint: Vec<JointEntry>,
    /// `p(m | y_{1:t})`; zero for models not active yet.
    pub model_posterior: Vec<f64>,
    /// `p(r | y_{1:t})`, run lengths ascending.
    pub global_rld: Vec<(usize, f64)>,
    pub forecasts: Vec<Forecast>,
    pub map: Segmentation,
    /// Gradient of `ln p(y_{1:t})` with respect to `(ln a_j, ln b_j)`.
    pub log_evidence_gradient: Option<Vec<Grad2>>,
    /// Gradient of the evidence increment, used for the ascent step.
    pub increment_gradient: Option<Vec<Grad2>>,
}

impl StepOutput {
    /// `p(r | m, y_{1:t})`, empty for an inactive model.
    pub fn model_rld(&self, model: usize) -> Vec<(usize, f64)> {
        let pm = self.model_posterior[model];
        self.joint
            .iter()
            .filter(|e| e.model == model)
            .map(|e| {
                (
                    e.run_length,
                    if pm > 0.0 { e.probability / pm } else { 0.0 },
                )
            })
            .collect()
    }

    /// Most probable run length of the global run-length distribution.
    pub fn rld_argmax(&self) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for &(r, p) in &self.global_rld {
            if p > best.1 {
                best = (r, p);
            }
        }
        best.0
    }

    pub fn most_probable_model(&self) -> usize {
        argmax(&self.model_posterior)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Ratio of posterior to prior odds of `m1` against `m2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesFactor {
    pub value: f64,
    /// Set when `p(m2 | y) = 0` and the value is reported as `+inf`.
    pub saturated: bool,
}

pub fn bayes_factor(
    model_posterior: &[f64],
    prior_q: &[f64],
    m1: usize,
    m2: usize,
) -> Result<BayesFactor> {
    let n = model_posterior.len();
    if m1 >= n || m2 >= n || prior_q.len() != n {
        return Err(invalid("model index out of range"));
    }
    if m1 == m2 {
        return Ok(BayesFactor {
            value: 1.0,
            saturated: false,
        });
    }
    let den = model_posterior[m2] * prior_q[m1];
    if den == 0.0 {
        return Ok(BayesFactor {
            value: f64::INFINITY,
            saturated: true,
        });
    }
    Ok(BayesFactor {
        value: model_posterior[m1] * prior_q[m2] / den,
        saturated: false,
    })
}

#[derive(Debug, Clone)]
struct ModelState {
    grid: Option<RunLengthGrid>,
    hyper: HyperState,
}

#[derive(Debug, Clone)]
struct LastStep {
    log_evidence: f64,
    log_map: f64,
    seg: Option<Arc<SegNode>>,
    /// LSE of the retained log joints after pruning.
    log_norm: f64,
    /// Post-pruning posterior-weighted derivative vectors.
    weighted_grad: Vec<Grad2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Fresh,
    Growth(usize),
}

#[derive(Debug, Clone)]
struct Candidate {
    r: usize,
    log_joint: f64,
    source: Source,
    map_parent: f64,
    seg_parent: Option<Arc<SegNode>>,
}

struct ModelEval {
    rows: Vec<Vec<f64>>,
    fresh: SufficientStatistics,
    fresh_eval: PredictiveEval,
    evals: Vec<PredictiveEval>,
}

struct ModelPlan {
    cands: Vec<Candidate>,
    keep: Vec<bool>,
    log_cq: Vec<f64>,
    d: Vec<Vec<Grad2>>,
    dlog_cq: Vec<Vec<Grad2>>,
    eval: ModelEval,
}

/// Streaming BOCPDMS engine.
#[derive(Debug, Clone)]
pub struct Engine {
    universe: ModelUniverse,
    config: EngineConfig,
    log_q: Vec<f64>,
    states: Vec<ModelState>,
    /// Most recent observation first.
    history: VecDeque<Vec<f64>>,
    t: usize,
    last: Option<LastStep>,
    last_exogenous: Vec<f64>,
    poisoned: bool,
}

impl Engine {
    pub fn new(universe: ModelUniverse, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let alpha0 = config.hyperopt.map_or(0.0, |h| h.alpha0);
        let states = universe
            .members()
            .iter()
            .map(|m| {
                Ok(ModelState {
                    grid: None,
                    hyper: HyperState::new(m.prior().a, m.prior().b, alpha0)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let log_q = universe.prior_q().iter().map(|q| q.ln()).collect();
        let exo = universe.exogenous();
        Ok(Self {
            universe,
            config,
            log_q,
            states,
            history: VecDeque::new(),
            t: 0,
            last: None,
            last_exogenous: vec![0.0; exo],
            poisoned: false,
        })
    }

    pub fn universe(&self) -> &ModelUniverse {
        &self.universe
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Number of observations processed.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Grid of `model`, `None` before its activation.
    pub fn grid(&self, model: usize) -> Option<&RunLengthGrid> {
        self.states[model].grid.as_ref()
    }

    /// Total number of retained hypotheses.
    pub fn retained(&self) -> usize {
        self.states
            .iter()
            .filter_map(|s| s.grid.as_ref())
            .map(RunLengthGrid::len)
            .sum()
    }

    /// Current `(a, b)` used for newly born hypotheses of `model`.
    pub fn hyperparameters(&self, model: usize) -> (f64, f64) {
        let h = &self.states[model].hyper;
        (h.a(), h.b())
    }

    pub fn hyper_state(&self, model: usize) -> &HyperState {
        &self.states[model].hyper
    }

    /// Segmentation after the last step.
    pub fn map_segmentation(&self) -> Option<Segmentation> {
        self.last
            .as_ref()
            .map(|l| Segmentation::from_node(&l.seg, l.log_map))
    }

    pub fn step(&mut self, y: &[f64]) -> Result<Option<StepOutput>> {
        let exo = vec![0.0; self.universe.exogenous()];
        self.step_with_exogenous(y, &exo)
    }

    /// Processes `y_t` with exogenous inputs `z_t`. Returns `None` while no
    /// model has enough history to predict.
    pub fn step_with_exogenous(&mut self, y: &[f64], z: &[f64]) -> Result<Option<StepOutput>> {
        if self.poisoned {
            return Err(Error::State(
                "engine is unusable after a failed sufficient-statistic update".into(),
            ));
        }
        let s_count = self.universe.locations();
        if y.len() != s_count {
            return Err(Error::DimensionMismatch {
                context: "observation",
                expected: s_count,
                actual: y.len(),
            });
        }
        if z.len() != self.universe.exogenous() {
            return Err(Error::DimensionMismatch {
                context: "exogenous inputs",
                expected: self.universe.exogenous(),
                actual: z.len(),
            });
        }
        if let Some(v) = y.iter().chain(z).find(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "observation contains non-finite value {v}"
            )));
        }
        let t = self.t + 1;
        let n_models = self.universe.len();
        let hyperopt = self.config.hyperopt.is_some();

        // Pass A: read-only predictive evaluation.
        let history: Vec<&[f64]> = self.history.iter().map(Vec::as_slice).collect();
        let use_cache = self.universe.exogenous() == 0;
        let evaluate = |(m, state): (usize, &ModelState)| -> Result<Option<ModelEval>> {
            let model = &self.universe.members()[m];
            let lag = model.lag_length();
            if state.grid.is_none() && t - 1 != lag {
                return Ok(None);
            }
            let rows = model.design_rows(&history[..lag], z);
            let fresh = model.prior_stats(state.hyper.a(), state.hyper.b())?;
            let fresh_eval = model.predictive(&fresh, &rows)?.evaluate(y);
            let mut evals = Vec::new();
            if let Some(grid) = &state.grid {
                evals.reserve(grid.entries.len());
                for e in &grid.entries {
                    let ev = match (&e.next, use_cache) {
                        (Some(p), true) => p.evaluate(y),
                        _ => model.predictive(&e.stats, &rows)?.evaluate(y),
                    };
                    evals.push(ev);
                }
            }
            Ok(Some(ModelEval {
                rows,
                fresh,
                fresh_eval,
                evals,
            }))
        };
        let evals: Vec<Option<ModelEval>> = if self.config.parallel {
            self.states
                .par_iter()
                .enumerate()
                .map(evaluate)
                .collect::<Result<_>>()?
        } else {
            self.states
                .iter()
                .enumerate()
                .map(evaluate)
                .collect::<Result<_>>()?
        };

        // Warm-up: no model has enough history yet.
        if evals.iter().all(Option::is_none) {
            self.history.push_front(y.to_vec());
            self.history.truncate(self.universe.max_lag());
            self.last_exogenous = z.to_vec();
            self.t = t;
            return Ok(None);
        }

        // Growth and changepoint masses.
        let hazard = self.config.hazard;
        let paper = self.config.mode == RecursionMode::PaperFaithful;
        let cp_parent = self.last.as_ref().map(|l| {
            (
                hazard.log_h() + l.log_norm,
                l.log_map - l.log_evidence,
                l.seg.clone(),
            )
        });
        let mut cands: Vec<Vec<Candidate>> = vec![Vec::new(); n_models];
        let mut pred_acc = LogSumExp::new();
        for m in 0..n_models {
            let Some(ev) = &evals[m] else { continue };
            let lq = self.log_q[m];
            let list = &mut cands[m];
            match (&self.states[m].grid, &cp_parent) {
                (Some(grid), Some((cp_mass, map_parent, seg))) => {
                    list.push(Candidate {
                        r: 0,
                        log_joint: ev.fresh_eval.log_pdf + lq + cp_mass,
                        source: Source::Fresh,
                        map_parent: *map_parent,
                        seg_parent: seg.clone(),
                    });
                    let log_norm = self.last.as_ref().map_or(0.0, |l| l.log_norm);
                    for (i, (e, pe)) in grid.entries.iter().zip(&ev.evals).enumerate() {
                        let mut lj = pe.log_pdf + e.log_joint + hazard.log_1m_h();
                        if paper {
                            lj += e.log_cq;
                        }
                        pred_acc.push(e.log_joint - log_norm + pe.log_pdf);
                        list.push(Candidate {
                            r: e.run_length + 1,
                            log_joint: lj,
                            source: Source::Growth(i),
                            map_parent: e.map_parent,
                            seg_parent: e.seg_parent.clone(),
                        });
                    }
                }
                (None, _) => list.push(Candidate {
                    r: 0,
                    log_joint: lq + ev.fresh_eval.log_pdf,
                    source: Source::Fresh,
                    map_parent: 0.0,
                    seg_parent: None,
                }),
                (Some(_), None) => unreachable!("active grid without a previous step"),
            }
        }

        // Aggregation.
        let log_evidence: f64 = cands
            .iter()
            .flatten()
            .map(|c| c.log_joint)
            .collect::<LogSumExp>()
            .value();
        if !(log_evidence > f64::NEG_INFINITY) || log_evidence.is_nan() {
            return Err(Error::NumericalCollapse { t });
        }
        let mut by_r: BTreeMap<usize, LogSumExp> = BTreeMap::new();
        for c in cands.iter().flatten() {
            by_r.entry(c.r).or_default().push(c.log_joint);
        }
        let lse_r: BTreeMap<usize, f64> = by_r.iter().map(|(&r, acc)| (r, acc.value())).collect();
        let log_cq: Vec<Vec<f64>> = cands
            .iter()
            .map(|list| {
                list.iter()
                    .map(|c| {
                        let l = lse_r[&c.r];
                        if l == f64::NEG_INFINITY {
                            f64::NEG_INFINITY
                        } else {
                            c.log_joint - l
                        }
                    })
                    .collect()
            })
            .collect();
        let mut joint = Vec::new();
        let mut model_posterior = vec![0.0; n_models];
        for (m, list) in cands.iter().enumerate() {
            for (c, &lcq) in list.iter().zip(&log_cq[m]) {
                let p = (c.log_joint - log_evidence).exp();
                model_posterior[m] += p;
                joint.push(JointEntry {
                    model: m,
                    run_length: c.r,
                    log_joint: c.log_joint,
                    probability: p,
                    log_cond_model_posterior: lcq,
                });
            }
        }
        let global_rld: Vec<(usize, f64)> = lse_r
            .iter()
            .map(|(&r, &l)| (r, (l - log_evidence).exp()))
            .collect();
        let log_evidence_increment = log_evidence - self.last.as_ref().map_or(0.0, |l| l.log_norm);
        let log_predictive = self.last.as_ref().map(|_| pred_acc.value());

        // MAP recursion: ties go to the smallest run length, then lowest id.
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for (m, list) in cands.iter().enumerate() {
            for (i, c) in list.iter().enumerate() {
                let v = c.log_joint + c.map_parent;
                let better = match best {
                    None => true,
                    Some((bv, br, _, _)) => v > bv || (v == bv && c.r < br),
                };
                if better {
                    best = Some((v, c.r, m, i));
                }
            }
        }
        let (log_map, map_r, map_m, map_i) = best.expect("at least one candidate");
        let seg = Some(Arc::new(SegNode {
            cp_time: t - map_r,
            model: map_m,
            prev: cands[map_m][map_i].seg_parent.clone(),
        }));

        // Hyperparameter derivatives.
        let mut d: Vec<Vec<Vec<Grad2>>> = vec![Vec::new(); n_models];
        let mut dlog_cq: Vec<Vec<Vec<Grad2>>> = vec![Vec::new(); n_models];
        let mut log_evidence_gradient = None;
        let mut increment_gradient = None;
        if hyperopt {
            let zero = vec![[0.0; 2]; n_models];
            let prev_weighted = self.last.as_ref().map(|l| &l.weighted_grad);
            for m in 0..n_models {
                let Some(ev) = &evals[m] else { continue };
                let grid = self.states[m].grid.as_ref();
                let (fa, fb) = ev.fresh.birth_hyperparameters();
                let g0 = chain_to_log_space(ev.fresh_eval.d_a, ev.fresh_eval.d_b, fa, fb);
                for c in &cands[m] {
                    let mut dv = match c.source {
                        Source::Fresh => match (grid, prev_weighted) {
                            (Some(_), Some(pw)) => pw.clone(),
                            _ => zero.clone(),
                        },
                        Source::Growth(i) => {
                            let e = &grid.expect("growth from an active grid").entries[i];
                            let mut dv = e.d.clone();
                            if paper {
                                axpy(&mut dv, 1.0, &e.dlog_cq);
                            }
                            dv
                        }
                    };
                    let g = match c.source {
                        Source::Fresh => g0,
                        Source::Growth(i) => {
                            let e = &grid.expect("active").entries[i];
                            let (ba, bb) = e.stats.birth_hyperparameters();
                            chain_to_log_space(ev.evals[i].d_a, ev.evals[i].d_b, ba, bb)
                        }
                    };
                    dv[m][0] += g[0];
                    dv[m][1] += g[1];
                    d[m].push(dv);
                }
            }
            let mut cq_weighted: BTreeMap<usize, Vec<Grad2>> = BTreeMap::new();
            let mut total = zero.clone();
            for m in 0..n_models {
                for (k, c) in cands[m].iter().enumerate() {
                    let w = (c.log_joint - log_evidence).exp();
                    axpy(&mut total, w, &d[m][k]);
                    let cq = log_cq[m][k].exp();
                    axpy(
                        cq_weighted.entry(c.r).or_insert_with(|| zero.clone()),
                        cq,
                        &d[m][k],
                    );
                }
            }
            for m in 0..n_models {
                for (k, c) in cands[m].iter().enumerate() {
                    let mut v = d[m][k].clone();
                    axpy(&mut v, -1.0, &cq_weighted[&c.r]);
                    dlog_cq[m].push(v);
                }
            }
            let mut inc = total.clone();
            if let Some(pw) = prev_weighted {
                axpy(&mut inc, -1.0, pw);
            }
            log_evidence_gradient = Some(total);
            increment_gradient = Some(inc);
        }

        // Pruning: top R_max per model by model-specific posterior, r = 0 kept.
        let keep: Vec<Vec<bool>> = cands
            .iter()
            .map(|list| match self.config.r_max {
                Some(r_max) if list.len() > r_max => {
                    let mut order: Vec<usize> = (0..list.len()).collect();
                    order.sort_by(|&i, &j| {
                        list[j]
                            .log_joint
                            .total_cmp(&list[i].log_joint)
                            .then(list[i].r.cmp(&list[j].r))
                    });
                    let mut keep = vec![false; list.len()];
                    for &i in &order[..r_max] {
                        keep[i] = true;
                    }
                    if let Some(i) = list.iter().position(|c| c.r == 0) {
                        keep[i] = true;
                    }
                    keep
                }
                _ => vec![true; list.len()],
            })
            .collect();

        let mut surviving = LogSumExp::new();
        for (list, k) in cands.iter().zip(&keep) {
            for (c, &kept) in list.iter().zip(k) {
                if kept {
                    surviving.push(c.log_joint);
                }
            }
        }
        let log_norm = surviving.value();
        let weighted_grad = if hyperopt {
            let mut acc = vec![[0.0; 2]; n_models];
            for m in 0..n_models {
                for (k, c) in cands[m].iter().enumerate() {
                    if keep[m][k] {
                        axpy(&mut acc, (c.log_joint - log_norm).exp(), &d[m][k]);
                    }
                }
            }
            acc
        } else {
            Vec::new()
        };

        // Pass B: mutate surviving statistics.
        let mut plans: Vec<Option<ModelPlan>> = Vec::with_capacity(n_models);
        for (((((ev, cands), keep), log_cq), d), dlog_cq) in evals
            .into_iter()
            .zip(cands)
            .zip(keep)
            .zip(log_cq)
            .zip(d)
            .zip(dlog_cq)
        {
            plans.push(ev.map(|eval| ModelPlan {
                cands,
                keep,
                log_cq,
                d,
                dlog_cq,
                eval,
            }));
        }
        let models = self.universe.members();
        let apply =
            |((m, state), plan): ((usize, &mut ModelState), Option<ModelPlan>)| -> Result<()> {
                match plan {
                    Some(plan) => apply_plan(&models[m], state, plan, y),
                    None => Ok(()),
                }
            };
        let applied: Result<Vec<()>> = if self.config.parallel {
            self.states
                .par_iter_mut()
                .enumerate()
                .zip(plans.into_par_iter())
                .map(apply)
                .collect()
        } else {
            self.states
                .iter_mut()
                .enumerate()
                .zip(plans)
                .map(apply)
                .collect()
        };
        if let Err(e) = applied {
            self.poisoned = true;
            return Err(e);
        }

        if let Some(inc) = &increment_gradient {
            for (m, state) in self.states.iter_mut().enumerate() {
                if state.grid.is_some() {
                    state.hyper.sgd_step(inc[m]);
                }
            }
        }

        self.history.push_front(y.to_vec());
        self.history.truncate(self.universe.max_lag());
        self.last_exogenous = z.to_vec();
        self.t = t;
        self.last = Some(LastStep {
            log_evidence,
            log_map,
            seg: seg.clone(),
            log_norm,
            weighted_grad,
        });

        let forecasts = self.compute_forecasts(self.config.horizon, true)?;
        Ok(Some(StepOutput {
            t,
            log_evidence,
            log_evidence_increment,
            log_predictive,
            joint,
            model_posterior,
            global_rld,
            forecasts,
            map: Segmentation::from_node(&seg, log_map),
            log_evidence_gradient,
            increment_gradient,
        }))
    }

    /// Mixture forecasts for horizons `1..=horizon` from the current state.
    /// Exogenous inputs are held at their last observed values.
    pub fn forecast(&mut self, horizon: usize) -> Result<Vec<Forecast>> {
        if horizon < 1 {
            return Err(invalid("forecast horizon must be at least 1"));
        }
        self.compute_forecasts(horizon, false)
    }

    fn compute_forecasts(&mut self, horizon: usize, cache: bool) -> Result<Vec<Forecast>> {
        let Some(last) = &self.last else {
            return Ok(Vec::new());
        };
        let log_norm = last.log_norm;
        let s_count = self.universe.locations();
        let mut pseudo: VecDeque<Vec<f64>> = self.history.clone();
        let z = self.last_exogenous.clone();
        let cache = cache && self.universe.exogenous() == 0;
        let mut out = Vec::with_capacity(horizon);
        for h in 1..=horizon {
            let hist: Vec<&[f64]> = pseudo.iter().map(Vec::as_slice).collect();
            let models = self.universe.members();
            let moments =
                |(m, state): (usize, &mut ModelState)| -> Result<(Vec<f64>, Vec<f64>, bool)> {
                    let mut mean = vec![0.0; s_count];
                    let mut second = vec![0.0; s_count * s_count];
                    let mut finite = true;
                    let Some(grid) = state.grid.as_mut() else {
                        return Ok((mean, second, finite));
                    };
                    let model = &models[m];
                    let lag = model.lag_length();
                    if hist.len() < lag {
                        return Ok((mean, second, finite));
                    }
                    let rows = model.design_rows(&hist[..lag], &z);
                    for e in grid.entries.iter_mut() {
                        let w = (e.log_joint - log_norm).exp();
                        let needed = w > 0.0;
                        if !needed && !(cache && h == 1) {
                            continue;
                        }
                        let pred = model.predictive(&e.stats, &rows)?;
                        if needed {
                            let mo = pred.moments();
                            finite &= mo.finite;
                            for i in 0..s_count {
                                mean[i] += w * mo.mean[i];
                                for j in 0..s_count {
                                    second[i * s_count + j] += w
                                        * (mo.covariance[i * s_count + j]
                                            + mo.mean[i] * mo.mean[j]);
                                }
                            }
                        }
                        if cache && h == 1 {
                            e.next = Some(pred);
                        }
                    }
                    Ok((mean, second, finite))
                };
            let parts: Vec<(Vec<f64>, Vec<f64>, bool)> = if self.config.parallel {
                self.states
                    .par_iter_mut()
                    .enumerate()
                    .map(moments)
                    .collect::<Result<_>>()?
            } else {
                self.states
                    .iter_mut()
                    .enumerate()
                    .map(moments)
                    .collect::<Result<_>>()?
            };
            let mut mean = vec![0.0; s_count];
            let mut second = vec![0.0; s_count * s_count];
            let mut finite = true;
            for (pm, ps, pf) in parts {
                mean.iter_mut().zip(&pm).for_each(|(a, b)| *a += b);
                second.iter_mut().zip(&ps).for_each(|(a, b)| *a += b);
                finite &= pf;
            }
            let mut covariance = second;
            for i in 0..s_count {
                for j in 0..s_count {
                    covariance[i * s_count + j] -= mean[i] * mean[j];
                }
            }
            pseudo.push_front(mean.clone());
            pseudo.truncate(self.universe.max_lag());
            out.push(Forecast {
                horizon: h,
                mean,
                covariance,
                finite,
            });
        }
        Ok(out)
    }
}

fn apply_plan(model: &BvarModel, state: &mut ModelState, plan: ModelPlan, y: &[f64]) -> Result<()> {
    let ModelPlan {
        cands,
        keep,
        log_cq,
        d,
        dlog_cq,
        eval,
    } = plan;
    let mut old: Vec<Option<GridEntry>> = state
        .grid
        .take()
        .map(|g| g.entries.into_iter().map(Some).collect())
        .unwrap_or_default();
    let mut fresh = Some(eval.fresh);
    let mut d = d.into_iter();
    let mut dlog_cq = dlog_cq.into_iter();
    let mut entries = Vec::with_capacity(keep.iter().filter(|&&k| k).count());
    for ((c, kept), lcq) in cands.into_iter().zip(keep).zip(log_cq) {
        let dv = d.next().unwrap_or_default();
        let dq = dlog_cq.next().unwrap_or_default();
        if !kept {
            continue;
        }
        let (mut stats, quad) = match c.source {
            Source::Fresh => (
                fresh.take().expect("one changepoint hypothesis per model"),
                eval.fresh_eval.quad,
            ),
            Source::Growth(i) => (
                old[i].take().expect("each parent grows once").stats,
                eval.evals[i].quad,
            ),
        };
        model.update(&mut stats, &eval.rows, y, quad)?;
        entries.push(GridEntry {
            run_length: c.r,
            log_joint: c.log_joint,
            stats,
            map_parent: c.map_parent,
            seg_parent: c.seg_parent,
            log_cq: lcq,
            d: dv,
            dlog_cq: dq,
            next: None,
        });
    }
    state.grid = Some(RunLengthGrid { entries });
    Ok(())
}

/// `ln p(y_{1:t})` trace of a full run, stopping at the first error.
pub fn log_evidence_trace(engine: &mut Engine, ys: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for y in ys {
        if let Some(o) = engine.step(y)? {
            out.push(o.log_evidence);
        }
    }
    Ok(out)
}
