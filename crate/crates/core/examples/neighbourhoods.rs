// SPDX-License-Identifier: Apache-2.0

//! Neighbourhood rings on a 5 x 5 grid and the sparsity masks they induce
//! under different decay maps and pooling choices.

use bocpdms::spatial::{grid_points, sparsity_pattern, DecaySpec, NeighbourhoodSystem, Pooling};

fn print_ring_map(nbh: &NeighbourhoodSystem, centre: usize, side: usize) {
    for row in 0..side {
        let line: String = (0..side)
            .map(|col| {
                let s = row * side + col;
                (0..=nbh.num_rings())
                    .find(|&i| nbh.members(centre, i).contains(&s))
                    .map_or('.', |i| char::from_digit(i as u32, 10).unwrap_or('+'))
            })
            .collect();
        println!("  {line}");
    }
}

pub fn run_example() -> bocpdms::Result<()> {
    let side = 5;
    let points = grid_points(side, side);
    let nbh = NeighbourhoodSystem::from_points(&points, &[1.0, 1.5, 2.0])?;
    assert!(nbh.satisfies_definition());
    println!("rings around the centre (0 is the location itself):");
    print_ring_map(&nbh, 12, side);

    for (label, decay) in [
        ("constant", DecaySpec::constant(3, 3)),
        ("linear", DecaySpec::linear(3, 3)),
    ] {
        for pooling in [Pooling::None, Pooling::PerLocationRing, Pooling::GlobalRing] {
            let mask = sparsity_pattern(3, &nbh, &decay, pooling)?;
            let per_lag: Vec<usize> = (1..=3).map(|l| mask.entry_count(l)).collect();
            println!(
                "decay {label:8} Π = {:?} pooling {pooling:?}: nonzero entries per lag {per_lag:?}, free lag parameters {}",
                decay.as_slice(),
                mask.free_lag_parameters()
            );
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bocpdms::Result<()> {
    run_example()
}
