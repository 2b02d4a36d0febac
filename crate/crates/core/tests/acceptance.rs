// SPDX-License-Identifier: Apache-2.0

#![allow(clippy::needless_range_loop)]

//! Acceptance criteria. Prints one `[PASS]` or `[FAIL]` line per criterion
//! and exits non-zero if any runnable criterion fails. A criterion whose
//! input data is absent is reported as `[FAIL]` with the reason but does not
//! change the exit status.

mod common;

#[allow(dead_code)]
#[path = "../examples/planted_grid.rs"]
mod planted_grid;

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use bocpdms::bvar::batch::batch_log_marginal;
use bocpdms::bvar::cholesky::CholeskyFactor;
use bocpdms::bvar::{BvarModel, BvarPrior};
use bocpdms::cli::{run, RunConfig};
use bocpdms::engine::{Engine, EngineConfig, HazardSpec, ModelUniverse, RecursionMode, StepOutput};
use bocpdms::evalgen::{brute_force_evidence, brute_force_map};
use bocpdms::hyperopt::HyperoptConfig;
use bocpdms::spatial::{SparsityMask, SsbvarStructure};
use common::quadrature::quadrature_log_marginal;
use common::{random_tiny_scenario, unroll};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Tracking;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grow(size: usize) {
    let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for Tracking {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            grow(new_size);
        }
        p
    }
}

#[global_allocator]
static GLOBAL: Tracking = Tracking;

enum Outcome {
    Pass(String),
    Fail(String),
    /// Cannot run here; reported as a failure without failing the target.
    Unavailable(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn config(lambda: f64, mode: RecursionMode) -> EngineConfig {
    let mut c = EngineConfig::new(HazardSpec::constant(lambda).unwrap());
    c.mode = mode;
    c
}

fn run_engine(
    universe: ModelUniverse,
    config: EngineConfig,
    series: &[Vec<f64>],
) -> Vec<StepOutput> {
    let mut engine = Engine::new(universe, config).unwrap();
    series
        .iter()
        .filter_map(|y| engine.step(y).unwrap())
        .collect()
}

fn ar_model(name: &str, lag: usize, a: f64, b: f64, g: f64) -> BvarModel {
    BvarModel::new(
        name,
        SsbvarStructure::autoregressive(1, lag),
        BvarPrior::isotropic(a, b, g, 1).unwrap(),
    )
    .unwrap()
}

fn noisy_series(seed: u64, t: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t)
        .map(|i| {
            let level = if i < t / 2 { 0.0 } else { 3.0 };
            vec![level + rng.random_range(-1.0..1.0)]
        })
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 1000..1050 {
        let sc = random_tiny_scenario(seed);
        let outs = run_engine(
            sc.universe.clone(),
            config(sc.hazard.lambda(), RecursionMode::StrictPpm),
            &sc.series,
        );
        let oracle = brute_force_evidence(&sc.series, &sc.universe, sc.hazard).unwrap();
        worst = worst.max((outs.last().unwrap().log_evidence - oracle).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-9 && secs < 10.0,
        format!(
            "50 scenarios, max |Δ log evidence| = {worst:.2e} (tol 1e-9), {secs:.2} s (limit 10 s)"
        ),
    )
}

fn unroll_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 2000..2050 {
        let sc = random_tiny_scenario(seed);
        let mode = RecursionMode::PaperFaithful;
        let outs = run_engine(
            sc.universe.clone(),
            config(sc.hazard.lambda(), mode),
            &sc.series,
        );
        let u = unroll(&sc.series, &sc.universe, sc.hazard, mode);
        if outs.len() != u.lj.len() {
            return Outcome::Fail(format!(
                "seed {seed}: {} steps vs {}",
                outs.len(),
                u.lj.len()
            ));
        }
        for (k, out) in outs.iter().enumerate() {
            worst = worst.max((out.log_evidence - u.log_evidence[k]).abs());
            for e in &out.joint {
                let expected = u.lj[k][e.model][e.run_length];
                worst = worst.max((e.log_joint - expected).abs());
                worst = worst.max((e.probability - (expected - u.log_evidence[k]).exp()).abs());
                let cq = u.log_cq[k][e.model][e.run_length];
                worst = worst.max((e.log_cond_model_posterior.exp() - cq.exp()).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-12 && secs < 5.0,
        format!("50 scenarios, max deviation {worst:.2e} (tol 1e-12), {secs:.2} s (limit 5 s)"),
    )
}

fn conjugacy() -> Outcome {
    let past = [0.3, -0.5, 1.2];
    let y_new = 0.7;
    let rows = vec![vec![1.0]];
    let mut quad_worst: f64 = 0.0;
    for a in [0.5, 1.5, 4.0] {
        for b in [0.5, 1.0, 3.0] {
            for g in [0.2, 1.0, 5.0] {
                let model = BvarModel::new(
                    "c",
                    SsbvarStructure::autoregressive(1, 0),
                    BvarPrior::isotropic(a, b, g, 1).unwrap(),
                )
                .unwrap();
                let mut stats = model.prior_stats(a, b).unwrap();
                for &y in &past {
                    let q = model.predictive(&stats, &rows).unwrap().evaluate(&[y]).quad;
                    model.update(&mut stats, &rows, &[y], q).unwrap();
                }
                let lp = model.predictive(&stats, &rows).unwrap().log_pdf(&[y_new]);
                let mut all = past.to_vec();
                all.push(y_new);
                let oracle = quadrature_log_marginal(&all, a, b, g)
                    - quadrature_log_marginal(&past, a, b, g);
                quad_worst = quad_worst.max((lp - oracle).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let series: Vec<Vec<f64>> = (0..21)
        .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let prior = BvarPrior::new(1.7, 0.9, 2.5, vec![1.0, 0.6]).unwrap();
    let model = BvarModel::new(
        "v",
        SsbvarStructure::new(SparsityMask::full(2, 1), 0),
        prior.clone(),
    )
    .unwrap();
    let rows: Vec<_> = (1..21)
        .map(|t| model.design_rows(&[series[t - 1].as_slice()], &[]))
        .collect();
    let ys = series[1..].to_vec();
    let mut stats = model.prior_stats(prior.a, prior.b).unwrap();
    let mut seq = 0.0;
    for (r, y) in rows.iter().zip(&ys) {
        seq += stats.observe(&prior, model.layout(), r, y).unwrap();
    }
    let batch = batch_log_marginal(&prior, model.layout(), prior.a, prior.b, &rows, &ys).unwrap();
    let preq = (seq - batch).abs();
    verdict(
        quad_worst < 1e-6 && preq < 1e-9,
        format!("quadrature max |Δ| = {quad_worst:.2e} over 27 priors (tol 1e-6), prequential |Δ| = {preq:.2e} at T = 20 (tol 1e-9)"),
    )
}

fn rank_update_fidelity() -> Outcome {
    let k = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut factor = CholeskyFactor::scaled_identity(k, 1.0);
    let mut direct = DMatrix::<f64>::identity(k, k);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        factor.rank_one_update(&x, 1.0).unwrap();
        let v = DVector::from_column_slice(&x);
        direct += &v * v.transpose();
    }
    let inv = DMatrix::from_row_slice(k, k, &factor.inverse());
    let reference = direct.try_inverse().unwrap();
    let rel = (&inv - &reference).norm() / reference.norm();
    verdict(
        rel < 1e-8,
        format!("k = 50, 1000 updates, Frobenius relative error {rel:.2e} (tol 1e-8)"),
    )
}

struct GradState {
    series: Vec<Vec<f64>>,
    lags: [usize; 2],
    priors: [(f64, f64); 2],
    g: [f64; 2],
    lambda: f64,
    mode: RecursionMode,
    r_max: Option<usize>,
}

impl GradState {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(15..40);
        let phi = rng.random_range(-0.8..0.8);
        let mut y: f64 = 0.0;
        let series = (0..t)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                y = phi * y + e;
                vec![y]
            })
            .collect();
        let mut prior = || (rng.random_range(0.5..3.0), rng.random_range(0.3..3.0));
        let priors = [prior(), prior()];
        Self {
            series,
            lags: [rng.random_range(0..=2), rng.random_range(0..=2)],
            priors,
            g: [rng.random_range(0.5..5.0), rng.random_range(0.5..5.0)],
            lambda: rng.random_range(3.0..50.0),
            mode: if rng.random_bool(0.5) {
                RecursionMode::PaperFaithful
            } else {
                RecursionMode::StrictPpm
            },
            r_max: if rng.random_bool(0.5) {
                Some(rng.random_range(5..15))
            } else {
                None
            },
        }
    }

    fn outputs(&self, priors: &[(f64, f64); 2]) -> Vec<StepOutput> {
        let members = (0..2)
            .map(|i| {
                ar_model(
                    &format!("m{i}"),
                    self.lags[i],
                    priors[i].0,
                    priors[i].1,
                    self.g[i],
                )
            })
            .collect();
        let mut cfg = config(self.lambda, self.mode);
        cfg.r_max = self.r_max;
        cfg.parallel = false;
        cfg.hyperopt = Some(HyperoptConfig::new(0.0).unwrap());
        run_engine(
            ModelUniverse::new(members, None).unwrap(),
            cfg,
            &self.series,
        )
    }
}

fn gradient_correctness() -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let st = GradState::random(3000 + seed);
        let grad = st
            .outputs(&st.priors)
            .last()
            .unwrap()
            .log_evidence_gradient
            .clone()
            .unwrap();
        for j in 0..2 {
            for k in 0..2 {
                let bump = |s: f64| {
                    let mut p = st.priors;
                    if k == 0 {
                        p[j].0 *= (s * h).exp();
                    } else {
                        p[j].1 *= (s * h).exp();
                    }
                    st.outputs(&p).last().unwrap().log_evidence
                };
                let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                let rel = (grad[j][k] - fd).abs() / fd.abs().max(grad[j][k].abs());
                worst = worst.max(rel);
            }
        }
    }
    verdict(
        worst < 1e-4,
        format!(
            "20 random states, max relative error {worst:.2e} vs central differences (tol 1e-4)"
        ),
    )
}

fn nile_reproduction() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let data = root.join("data/nile.csv");
    if !data.exists() {
        return Outcome::Unavailable(format!(
            "{} is not present; the series is not bundled",
            data.display()
        ));
    }
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let report =
        match RunConfig::from_file(root.join("data/nile.toml")).and_then(|c| run(&c, out.path())) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("run failed: {e}")),
        };
    let secs = start.elapsed().as_secs_f64();
    let years: Vec<f64> = report
        .changepoints
        .iter()
        .filter_map(|c| c.parse().ok())
        .collect();
    let one_cp = years.len() == 1 && (705.0..=725.0).contains(&years[0]);
    let mse = report.metrics.as_ref().map_or(f64::NAN, |m| m.mse.mean);
    verdict(
        one_cp && (0.4..=0.8).contains(&mse) && secs < 60.0,
        format!(
            "MAP changepoints {:?} (want one in [705, 725]), MSE {mse:.3} (want [0.4, 0.8]), {secs:.2} s (limit 60 s)",
            report.changepoints
        ),
    )
}

fn planted_recovery() -> Outcome {
    let start = Instant::now();
    let (mut near, mut rate) = (0, 0.0);
    for seed in 0..20 {
        let run = planted_grid::run_seed(seed).unwrap();
        let hit = run
            .changepoints
            .iter()
            .any(|&c| c.abs_diff(run.planted) <= 5);
        near += usize::from(hit);
        rate += run.structure_hit_rate / 20.0;
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        near >= 18 && rate >= 0.8 && secs < 300.0,
        format!(
            "changepoint within ±5 in {near}/20 seeds (want ≥ 18), post-change structure match {:.1}% (want ≥ 80%), {secs:.1} s (limit 300 s)",
            100.0 * rate
        ),
    )
}

fn complexity_engine() -> Engine {
    let universe = ModelUniverse::new(
        vec![
            ar_model("ar1", 1, 1.0, 1.0, 1.0),
            ar_model("ar2", 2, 1.0, 1.0, 1.0),
        ],
        None,
    )
    .unwrap();
    let mut cfg = config(100.0, RecursionMode::PaperFaithful);
    cfg.r_max = Some(100);
    cfg.parallel = false;
    Engine::new(universe, cfg).unwrap()
}

fn ar_stream(seed: u64) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = 0.0;
    std::iter::repeat_with(move || {
        let e: f64 = StandardNormal.sample(&mut rng);
        y = 0.5 * y + e;
        y
    })
}

/// Extra heap in use at the peak of a `t`-step run.
fn peak_bytes(t: usize) -> usize {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let mut engine = complexity_engine();
    for y in ar_stream(9).take(t) {
        engine.step(&[y]).unwrap();
    }
    drop(engine);
    PEAK.load(Ordering::Relaxed) - base
}

fn complexity() -> Outcome {
    let n = 10_000;
    // Skip the steps where the run-length grids are still filling up.
    let skip = 500;
    let stride = 25;
    let repeats = 4;
    // Snapshot the engine along the run, then time step t on each snapshot
    // in shuffled order so drift in host load is not confounded with t.
    let mut engine = complexity_engine();
    let mut snapshots = Vec::new();
    for (i, y) in ar_stream(4).take(n).enumerate() {
        let t = i + 1;
        if t > skip && t % stride == 0 {
            snapshots.push((t, engine.clone(), y));
        }
        engine.step(&[y]).unwrap();
    }
    drop(engine);
    let mut order: Vec<usize> = (0..snapshots.len())
        .flat_map(|s| std::iter::repeat_n(s, repeats))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let mut times = Vec::with_capacity(order.len());
    for s in order {
        let (t, snapshot, y) = &snapshots[s];
        let mut e = snapshot.clone();
        let start = Instant::now();
        let out = e.step(&[*y]).unwrap();
        let dt = start.elapsed().as_secs_f64();
        drop(out);
        times.push((*t as f64, dt));
    }
    drop(snapshots);
    let m = times.len() as f64;
    let tx = times.iter().map(|p| p.0).sum::<f64>() / m;
    let ty = times.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = times.iter().map(|p| (p.0 - tx).powi(2)).sum();
    let slope = times.iter().map(|p| (p.0 - tx) * (p.1 - ty)).sum::<f64>() / sxx;
    let rss: f64 = times
        .iter()
        .map(|p| (p.1 - ty - slope * (p.0 - tx)).powi(2))
        .sum();
    let se = (rss / (m - 2.0) / sxx).sqrt();
    let (lo, hi) = (slope - 1.96 * se, slope + 1.96 * se);
    let flat = lo <= 0.0 && 0.0 <= hi;

    let small = peak_bytes(1_000);
    let large = peak_bytes(100_000);
    let ratio = large as f64 / small as f64;
    verdict(
        flat && ratio <= 2.0,
        format!(
            "per-step time slope 95% CI [{:.3e}, {:.3e}] ns/step (mean {:.1} µs), heap peak {} B at T = 1k vs {} B at T = 100k (ratio {ratio:.2}, limit 2)",
            lo * 1e9,
            hi * 1e9,
            ty * 1e6,
            small,
            large
        ),
    )
}

fn invariants() -> Outcome {
    let mut failures: Vec<String> = Vec::new();

    let universe = ModelUniverse::new(
        vec![
            ar_model("a", 1, 1.0, 1.0, 1.0),
            ar_model("b", 2, 2.0, 0.5, 3.0),
        ],
        None,
    )
    .unwrap();
    let mut cfg = config(20.0, RecursionMode::PaperFaithful);
    cfg.r_max = Some(15);
    let mut worst: f64 = 0.0;
    for out in run_engine(universe, cfg, &noisy_series(3, 120)) {
        worst = worst.max((out.joint.iter().map(|e| e.probability).sum::<f64>() - 1.0).abs());
        worst = worst.max((out.model_posterior.iter().sum::<f64>() - 1.0).abs());
        for (m, &pm) in out.model_posterior.iter().enumerate() {
            let row: f64 = out
                .joint
                .iter()
                .filter(|e| e.model == m)
                .map(|e| e.probability)
                .sum();
            worst = worst.max((row - pm).abs());
        }
        for &(r, p) in &out.global_rld {
            let col: f64 = out
                .joint
                .iter()
                .filter(|e| e.run_length == r)
                .map(|e| e.probability)
                .sum();
            worst = worst.max((col - p).abs());
        }
    }
    if worst > 1e-9 {
        failures.push(format!("normalisation/marginals off by {worst:.2e}"));
    }

    let series = noisy_series(5, 60);
    let single = || ModelUniverse::new(vec![ar_model("ar1", 1, 1.0, 1.0, 1.0)], None).unwrap();
    let a = run_engine(
        single(),
        config(10.0, RecursionMode::PaperFaithful),
        &series,
    );
    let b = run_engine(single(), config(10.0, RecursionMode::StrictPpm), &series);
    if a.iter()
        .zip(&b)
        .any(|(x, y)| x.log_evidence.to_bits() != y.log_evidence.to_bits())
    {
        failures.push("single-model modes disagree".into());
    }

    let pair = || {
        ModelUniverse::new(
            vec![
                ar_model("a", 1, 1.0, 1.0, 1.0),
                ar_model("b", 1, 3.0, 2.0, 0.5),
            ],
            None,
        )
        .unwrap()
    };
    let series = noisy_series(9, 20);
    let mut pruned = config(10.0, RecursionMode::PaperFaithful);
    pruned.r_max = Some(20);
    let a = run_engine(pair(), config(10.0, RecursionMode::PaperFaithful), &series);
    let b = run_engine(pair(), pruned, &series);
    if a.iter()
        .zip(&b)
        .any(|(x, y)| x.log_evidence != y.log_evidence)
    {
        failures.push("pruning above T changed the output".into());
    }
    let mut bounded = config(50.0, RecursionMode::PaperFaithful);
    bounded.r_max = Some(5);
    let mut engine = Engine::new(pair(), bounded).unwrap();
    for y in noisy_series(1, 200) {
        engine.step(&y).unwrap();
        for m in 0..2 {
            if let Some(g) = engine.grid(m) {
                if g.len() > 6 || g.run_lengths()[0] != 0 {
                    failures.push(format!("pruning bound violated at t = {}", engine.t()));
                }
            }
        }
    }

    for seed in 4000..4030 {
        let sc = random_tiny_scenario(seed);
        let outs = run_engine(
            sc.universe.clone(),
            config(sc.hazard.lambda(), RecursionMode::StrictPpm),
            &sc.series,
        );
        let oracle = brute_force_map(&sc.series, &sc.universe, sc.hazard).unwrap();
        let map = &outs.last().unwrap().map;
        if (map.log_map_density - oracle.log_map_density).abs() > 1e-9
            || map.entries != oracle.entries
        {
            failures.push(format!("MAP not optimal for seed {seed}"));
        }
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "normalisation, marginals, single-model reduction, pruning no-op and bound, MAP optimality on 30 streams".into()
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let criteria: [(&str, Check); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("recursion unroll equivalence", unroll_equivalence),
        ("conjugacy correctness", conjugacy),
        ("rank-update fidelity", rank_update_fidelity),
        ("gradient correctness", gradient_correctness),
        ("Nile reproduction", nile_reproduction),
        ("planted changepoint recovery", planted_recovery),
        ("complexity contract", complexity),
        ("invariant suite", invariants),
    ];
    // Numeric arguments select criteria; anything else (test filters) is ignored.
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        match outcome {
            Outcome::Pass(d) => println!("[PASS] {} {name}: {d}", i + 1),
            Outcome::Fail(d) => {
                failed += 1;
                println!("[FAIL] {} {name}: {d}", i + 1);
            }
            Outcome::Unavailable(d) => println!("[FAIL] {} {name}: not run, {d}", i + 1),
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
