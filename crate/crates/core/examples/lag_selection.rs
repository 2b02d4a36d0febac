// SPDX-License-Identifier: Apache-2.0

//! Choosing the lag lengths of the model universe from the sample size and
//! letting the model posterior pick among them.

use bocpdms::bvar::{BvarModel, BvarPrior};
use bocpdms::engine::{Engine, EngineConfig, HazardSpec, ModelUniverse};
use bocpdms::evalgen::{simulate, ScenarioSpec};
use bocpdms::spatial::{lag_for_sample_size, lag_grid, SsbvarStructure};

const SCENARIO: &str = r#"
t = 800
seed = 3
coords = [[0.0]]

[[segments]]
start = 1
coefficients = [[[0.5]], [[-0.3]], [[0.25]]]
"#;

pub fn run_example() -> bocpdms::Result<()> {
    for t in [10, 100, 1_000, 100_000] {
        println!("L({t}) = {}", lag_for_sample_size(t, 2.0));
    }
    let lags = lag_grid(10, 800, 2.0)?;
    println!("lag grid for T between 10 and 800: {lags:?}");
    let members = lags
        .iter()
        .map(|&l| {
            BvarModel::new(
                format!("ar{l}"),
                SsbvarStructure::autoregressive(1, l),
                BvarPrior::isotropic(1.0, 1.0, 1.0, 1)?,
            )
        })
        .collect::<bocpdms::Result<Vec<_>>>()?;
    let universe = ModelUniverse::new(members, None)?;
    let sim = simulate(&ScenarioSpec::from_toml_str(SCENARIO)?)?;
    let mut config = EngineConfig::new(HazardSpec::constant(1000.0)?);
    config.r_max = Some(50);
    let mut engine = Engine::new(universe, config)?;
    let mut last = None;
    for y in &sim.series {
        last = engine.step(y)?.or(last);
    }
    let out = last.expect("the stream is long enough");
    for (l, p) in lags.iter().zip(&out.model_posterior) {
        println!("p(AR({l}) | y) = {p:.4}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bocpdms::Result<()> {
    run_example()
}
