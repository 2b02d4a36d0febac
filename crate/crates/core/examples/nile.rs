// SPDX-License-Identifier: Apache-2.0

//! Single-changepoint analysis of the annual Nile minima, 622-1284 AD.
//!
//! Expects `data/nile.csv` with columns `year,height`; the run uses
//! `data/nile.toml` and writes its files to `out/nile`.

use std::path::Path;

use bocpdms::cli::{run, RunConfig};

pub fn run_example() -> bocpdms::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let data = root.join("data/nile.csv");
    if !data.exists() {
        println!(
            "{} not found; place the Nile series there to run this example",
            data.display()
        );
        return Ok(());
    }
    let config = RunConfig::from_file(root.join("data/nile.toml"))?;
    let report = run(&config, &root.join("out/nile"))?;
    println!("MAP changepoints (years): {:?}", report.changepoints);
    if let Some(m) = report.metrics {
        println!(
            "one-step MSE {:.3} ± {:.3}, NLL {:.3} ± {:.3}",
            m.mse.mean, m.mse.half_width, m.nll.mean, m.nll.half_width
        );
    }
    for (name, p) in report.model_names.iter().zip(&report.model_posterior) {
        println!("p({name} | data) = {p:.3}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bocpdms::Result<()> {
    run_example()
}
