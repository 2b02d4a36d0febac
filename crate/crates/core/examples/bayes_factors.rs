// SPDX-License-Identifier: Apache-2.0

//! Monitoring the evidence for a spatial model against independent
//! autoregressions with running Bayes factors.

use bocpdms::bvar::{BvarModel, BvarPrior};
use bocpdms::engine::{bayes_factor, Engine, EngineConfig, HazardSpec, ModelUniverse};
use bocpdms::evalgen::{simulate, ScenarioSpec};
use bocpdms::spatial::{SparsityMask, SsbvarStructure};

const SCENARIO: &str = r#"
t = 400
seed = 11
burn_in = 50
coords = [[0.0, 0.0], [1.0, 0.0]]

[[segments]]
start = 1
label = "independent"
coefficients = [[[0.6, 0.0], [0.0, 0.6]]]

[[segments]]
start = 201
label = "coupled"
coefficients = [[[0.2, 0.6], [0.6, 0.2]]]
"#;

pub fn run_example() -> bocpdms::Result<()> {
    let sim = simulate(&ScenarioSpec::from_toml_str(SCENARIO)?)?;
    let prior = BvarPrior::isotropic(1.0, 1.0, 1.0, 2)?;
    let universe = ModelUniverse::new(
        vec![
            BvarModel::new(
                "ar",
                SsbvarStructure::new(SparsityMask::diagonal(2, 1), 0),
                prior.clone(),
            )?,
            BvarModel::new(
                "var",
                SsbvarStructure::new(SparsityMask::full(2, 1), 0),
                prior,
            )?,
        ],
        None,
    )?;
    let q = universe.prior_q().to_vec();
    let mut engine = Engine::new(universe, EngineConfig::new(HazardSpec::constant(200.0)?))?;
    for (i, y) in sim.series.iter().enumerate() {
        let Some(out) = engine.step(y)? else { continue };
        if (i + 1) % 50 == 0 {
            let bf = bayes_factor(&out.model_posterior, &q, 1, 0)?;
            let shown = if bf.saturated {
                "inf".to_string()
            } else {
                format!("{:.3e}", bf.value)
            };
            println!("t = {:3}: BF(var : ar) = {shown}", out.t);
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bocpdms::Result<()> {
    run_example()
}
