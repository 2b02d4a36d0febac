// SPDX-License-Identifier: Apache-2.0

//! Shared fixtures: random tiny universes and a non-incremental evaluation
//! of the run-length recursion built from batch marginal likelihoods.

#![allow(dead_code)]

pub mod quadrature;

use bocpdms::bvar::batch::batch_log_marginal;
use bocpdms::bvar::{BvarModel, BvarPrior};
use bocpdms::engine::{HazardSpec, ModelUniverse, RecursionMode};
use bocpdms::math::log_sum_exp;
use bocpdms::spatial::{SparsityMask, SsbvarStructure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct TinyScenario {
    pub series: Vec<Vec<f64>>,
    pub universe: ModelUniverse,
    pub hazard: HazardSpec,
}

/// Universe of `n_models` models on `s` series sharing lag `lag`, with
/// randomly drawn priors and structures.
pub fn random_universe(
    rng: &mut ChaCha8Rng,
    s: usize,
    lag: usize,
    n_models: usize,
) -> ModelUniverse {
    let mut members = Vec::new();
    for m in 0..n_models {
        let structure = if s > 1 && rng.random_bool(0.5) {
            SsbvarStructure::new(SparsityMask::full(s, lag), 0)
        } else {
            SsbvarStructure::new(SparsityMask::diagonal(s, lag), 0)
        };
        let omega = (0..s).map(|_| rng.random_range(0.5..2.0)).collect();
        let prior = BvarPrior::new(
            rng.random_range(0.5..3.0),
            rng.random_range(0.3..3.0),
            rng.random_range(0.3..5.0),
            omega,
        )
        .unwrap();
        members.push(BvarModel::new(format!("m{m}"), structure, prior).unwrap());
    }
    let q = if n_models > 1 {
        let w: Vec<f64> = (0..n_models).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        Some(w.into_iter().map(|v| v / total).collect())
    } else {
        None
    };
    ModelUniverse::new(members, q).unwrap()
}

pub fn random_tiny_scenario(seed: u64) -> TinyScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.random_range(1..=2);
    let lag = rng.random_range(0..=1);
    let n_models = rng.random_range(1..=2);
    let t = rng.random_range(lag + 1..=8);
    let shift = rng.random_range(-3.0..3.0);
    let cp = rng.random_range(1..=t);
    let series = (1..=t)
        .map(|i| {
            (0..s)
                .map(|_| {
                    let base: f64 = rng.random_range(-1.0..1.0);
                    if i >= cp {
                        base + shift
                    } else {
                        base
                    }
                })
                .collect()
        })
        .collect();
    TinyScenario {
        series,
        universe: random_universe(&mut rng, s, lag, n_models),
        hazard: HazardSpec::constant(rng.random_range(1.5..10.0)).unwrap(),
    }
}

/// Direct evaluation of all joint log masses for a common-lag universe.
/// `lj[t][m][r]` is `ln p(y_{1:t}, r_t = r, m_t = m)` for
/// `t = L+1..=T` (index `t - L - 1`).
pub struct Unrolled {
    pub lag: usize,
    pub lj: Vec<Vec<Vec<f64>>>,
    pub log_evidence: Vec<f64>,
    pub log_cq: Vec<Vec<Vec<f64>>>,
}

pub fn unroll(
    series: &[Vec<f64>],
    universe: &ModelUniverse,
    hazard: HazardSpec,
    mode: RecursionMode,
) -> Unrolled {
    let lag = universe.members()[0].lag_length();
    assert!(universe.members().iter().all(|m| m.lag_length() == lag));
    let n = series.len() - lag;
    let n_models = universe.len();
    let rows: Vec<Vec<Vec<Vec<f64>>>> = universe
        .members()
        .iter()
        .map(|model| {
            (lag..series.len())
                .map(|t| {
                    let hist: Vec<&[f64]> = (1..=lag).map(|l| series[t - l].as_slice()).collect();
                    model.design_rows(&hist, &[])
                })
                .collect()
        })
        .collect();
    let seg_ml = |m: usize, i: usize, j: usize| -> f64 {
        let model = &universe.members()[m];
        let p = model.prior();
        batch_log_marginal(
            p,
            model.layout(),
            p.a,
            p.b,
            &rows[m][i..=j],
            &series[lag + i..=lag + j],
        )
        .unwrap()
    };
    let mut lj: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut log_evidence = Vec::new();
    let mut log_cq: Vec<Vec<Vec<f64>>> = Vec::new();
    for k in 0..n {
        let mut at_k = vec![vec![0.0; k + 1]; n_models];
        for (m, slot) in at_k.iter_mut().enumerate() {
            let log_q = universe.prior_q()[m].ln();
            for r in 0..=k {
                let start = k - r;
                let mut v = log_q + seg_ml(m, start, k) + r as f64 * hazard.log_1m_h();
                if start > 0 {
                    v += hazard.log_h() + log_evidence[start - 1];
                }
                if mode == RecursionMode::PaperFaithful {
                    for j in 1..=r {
                        v += log_cq[k - j][m][r - j];
                    }
                }
                slot[r] = v;
            }
        }
        let all: Vec<f64> = at_k.iter().flatten().copied().collect();
        log_evidence.push(log_sum_exp(&all));
        let cq = (0..n_models)
            .map(|m| {
                (0..=k)
                    .map(|r| {
                        let col: Vec<f64> = (0..n_models).map(|mm| at_k[mm][r]).collect();
                        at_k[m][r] - log_sum_exp(&col)
                    })
                    .collect()
            })
            .collect();
        log_cq.push(cq);
        lj.push(at_k);
    }
    Unrolled {
        lag,
        lj,
        log_evidence,
        log_cq,
    }
}
