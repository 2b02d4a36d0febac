// SPDX-License-Identifier: Apache-2.0

//! Online type-II maximum likelihood recovering from a badly chosen noise
//! prior, compared with a run that keeps the prior fixed.

use bocpdms::bvar::{BvarModel, BvarPrior};
use bocpdms::engine::{Engine, EngineConfig, HazardSpec, ModelUniverse};
use bocpdms::evalgen::{simulate, ScenarioSpec};
use bocpdms::hyperopt::HyperoptConfig;
use bocpdms::spatial::SsbvarStructure;

const SCENARIO: &str = r#"
t = 600
seed = 5
coords = [[0.0]]

[[segments]]
start = 1
noise_sd = 0.1
coefficients = [[[0.7]]]
"#;

/// Mean one-step negative log predictive density of a run.
pub fn mean_nll(series: &[Vec<f64>], b: f64, alpha0: Option<f64>) -> bocpdms::Result<(f64, f64)> {
    let model = BvarModel::new(
        "ar1",
        SsbvarStructure::autoregressive(1, 1),
        BvarPrior::isotropic(1.0, b, 1.0, 1)?,
    )?;
    let mut config = EngineConfig::new(HazardSpec::constant(1000.0)?);
    config.r_max = Some(50);
    config.hyperopt = alpha0.map(HyperoptConfig::new).transpose()?;
    let mut engine = Engine::new(ModelUniverse::new(vec![model], None)?, config)?;
    let (mut total, mut n) = (0.0, 0);
    for y in series {
        if let Some(lp) = engine.step(y)?.and_then(|o| o.log_predictive) {
            total -= lp;
            n += 1;
        }
    }
    Ok((total / n as f64, engine.hyperparameters(0).1))
}

pub fn run_example() -> bocpdms::Result<()> {
    let sim = simulate(&ScenarioSpec::from_toml_str(SCENARIO)?)?;
    let b0 = 50.0;
    let (fixed, _) = mean_nll(&sim.series, b0, None)?;
    let (learned, b_end) = mean_nll(&sim.series, b0, Some(0.5))?;
    println!("prior scale b = {b0}: mean NLL {fixed:.4} with fixed hyperparameters");
    println!("with online updates: mean NLL {learned:.4}, final b = {b_end:.4}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> bocpdms::Result<()> {
    run_example()
}
