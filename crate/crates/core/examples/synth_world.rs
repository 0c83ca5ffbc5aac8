//! Generates the standard synthetic world and prints its long-tail shape.
//!
//!     cargo run --example synth_world -- 1.3

use presence_sdm::model::LocationEncoder;
use presence_sdm::synth::{SynthConfig, SyntheticWorld};

fn main() -> presence_sdm::Result<()> {
    let exponent = std::env::args().nth(1).map_or(Ok(1.3), |a| a.parse()).expect("exponent must be a number");
    let cfg = SynthConfig { tail_exponent: exponent, ..SynthConfig::default() };
    let world = SyntheticWorld::generate(&cfg, Some(LocationEncoder::Sinusoidal))?;

    let counts = &world.counts;
    let mean = cfg.total_observations as f64 / cfg.species as f64;
    let below = counts.iter().filter(|&&c| (c as f64) < mean / 2.0).count();
    println!("grid {}x{} with {} channels", world.grid.width(), world.grid.height(), world.grid.n_features());
    println!("{} presence records over {} species", world.records.len(), cfg.species);
    println!("largest count {}, smallest {}", counts[0], counts[counts.len() - 1]);
    println!("{below} species below half the mean count of {mean}");
    println!("rare (<= 50): {}", counts.iter().filter(|&&c| c <= 50).count());

    let positives: usize = world.eval_set.labels().iter().filter(|&&l| l).count();
    println!(
        "eval set: {} sites, {:.1}% positive labels, {} constant species",
        world.eval_set.site_count(),
        100.0 * positives as f64 / world.eval_set.labels().len() as f64,
        world.eval_set.constant_species().len()
    );
    println!("geo-prior cases: {}", world.geo_prior_cases.len());
    Ok(())
}
