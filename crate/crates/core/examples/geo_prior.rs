//! Trains a small model with the full weighted loss and measures how much it
//! helps a simulated image classifier's top-1 accuracy.

use presence_sdm::data::{assemble_dataset, feature_dim};
use presence_sdm::losses::LossConfig;
use presence_sdm::metrics::geo_prior_gain;
use presence_sdm::model::{LocationEncoder, MlpConfig};
use presence_sdm::synth::{SynthConfig, SyntheticWorld};
use presence_sdm::train::{train, TrainConfig, TrainOptions};

fn main() -> presence_sdm::Result<()> {
    let enc = Some(LocationEncoder::Sinusoidal);
    let cfg = SynthConfig { species: 50, total_observations: 5000, geo_prior_cases: 1000, ..SynthConfig::default() };
    let world = SyntheticWorld::generate(&cfg, enc)?;
    let (data, catalog) = assemble_dataset(&world.records, &world.grid, enc, cfg.species)?;
    let model = MlpConfig::desk(feature_dim(&world.grid, enc), cfg.species);
    let train_cfg = TrainConfig { epochs: 20, lr: 0.1, loss: LossConfig::full_weighted(1.0, 0.5), ..TrainConfig::default() };
    let (params, _) = train(&data, &catalog, &world.grid, &model, &train_cfg, enc, TrainOptions::default())?;

    let out = geo_prior_gain(&params, &world.geo_prior_cases, &world.grid, enc)?;
    println!("vision only      {:.1}%", out.baseline_top1);
    println!("vision x SDM     {:.1}%", out.combined_top1);
    println!("delta top-1      {:+.1} points over {} cases", out.delta_top1, out.evaluated);
    Ok(())
}
