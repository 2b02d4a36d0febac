// SPDX-License-Identifier: Apache-2.0

//! Feeding observations one at a time and reading multi-step forecasts,
//! the run-length distribution and the current MAP segmentation.

use bocpdms::bvar::{BvarModel, BvarPrior};
use bocpdms::engine::{Engine, EngineConfig, HazardSpec, ModelUniverse};
use bocpdms::spatial::SsbvarStructure;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn run_example() -> bocpdms::Result<()> {
    let universe = ModelUniverse::new(
        vec![
            BvarModel::new(
                "level",
                SsbvarStructure::autoregressive(1, 0),
                BvarPrior::isotropic(1.0, 1.0, 10.0, 1)?,
            )?,
            BvarModel::new(
                "ar1",
                SsbvarStructure::autoregressive(1, 1),
                BvarPrior::isotropic(1.0, 1.0, 1.0, 1)?,
            )?,
        ],
        None,
    )?;
    let mut config = EngineConfig::new(HazardSpec::constant(50.0)?);
    config.r_max = Some(30);
    config.horizon = 5;
    let mut engine = Engine::new(universe, config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 0.5).expect("valid scale");
    let mut y: f64 = 0.0;
    for t in 1..=150 {
        y = if t <= 80 {
            2.0 + noise.sample(&mut rng)
        } else {
            0.8 * y + noise.sample(&mut rng)
        };
        let Some(out) = engine.step(&[y])? else {
            continue;
        };
        if t % 30 == 0 {
            let means: Vec<String> = out
                .forecasts
                .iter()
                .map(|f| format!("{:.2}", f.mean[0]))
                .collect();
            println!(
                "t = {t:3}: y = {y:6.2}, most likely run length {}, forecasts h=1..5 [{}]",
                out.rld_argmax(),
                means.join(", ")
            );
        }
    }
    let map = engine.map_segmentation().expect("at least one step");
    let names: Vec<&str> = engine
        .universe()
        .members()
        .iter()
        .map(|m| m.name())
        .collect();
    for &(start, m) in &map.entries {
        println!("segment from t = {start} modelled by {}", names[m]);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bocpdms::Result<()> {
    run_example()
}
