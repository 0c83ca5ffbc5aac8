//! Trains the three losses on one synthetic world and compares rare-species
//! and all-species AUC.
//!
//!     cargo run --release --example train_compare -- --seed 3 --epochs 50

use std::time::Instant;

use clap::Parser;
use presence_sdm::data::{assemble_dataset, feature_dim};
use presence_sdm::losses::LossConfig;
use presence_sdm::metrics::{evaluate, RarePreset};
use presence_sdm::model::{LocationEncoder, MlpConfig};
use presence_sdm::synth::{SynthConfig, SyntheticWorld};
use presence_sdm::train::{train, TrainConfig, TrainOptions};
use presence_sdm::seed::derive_seed;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.3)]
    tail_exponent: f64,
    #[arg(long, default_value_t = 2048.0)]
    lambda: f64,
}

fn main() -> presence_sdm::Result<()> {
    let args = Args::parse();
    let encoder = Some(LocationEncoder::Sinusoidal);
    let synth = SynthConfig { seed: args.seed, tail_exponent: args.tail_exponent, ..SynthConfig::default() };
    let world = SyntheticWorld::generate(&synth, encoder)?;
    let (dataset, catalog) = assemble_dataset(&world.records, &world.grid, encoder, synth.species)?;
    let model = MlpConfig::desk(feature_dim(&world.grid, encoder), synth.species);
    let rare = RarePreset::GeoLifeClef.threshold();
    println!("seed {} | {} samples | rare species: {}", args.seed, dataset.len(),
        catalog.counts().iter().filter(|&&c| c <= rare).count());

    for loss in [LossConfig::bce(), LossConfig::full(args.lambda), LossConfig::full_weighted(1.0, 0.5)] {
        let cfg = TrainConfig {
            epochs: args.epochs,
            lr: args.lr,
            batch_size: args.batch_size,
            loss,
            init_seed: derive_seed(args.seed, "train.init"),
            shuffle_seed: derive_seed(args.seed, "train.shuffle"),
            pa_seed: derive_seed(args.seed, "train.pa"),
            checkpoint_interval: 0,
        };
        let started = Instant::now();
        let (params, history) = train(&dataset, &catalog, &world.grid, &model, &cfg, encoder, TrainOptions::default())?;
        let report = evaluate(&params, &world.eval_set, &catalog, rare, &[])?;
        println!(
            "{:<28} loss {:>10.4} -> {:>10.4} | AUC all {:.4} rare {:.4} | mAP {:.4} | {:.1}s",
            loss.tag(),
            history.epochs[0].mean_loss,
            history.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            report.auc.all_mean.unwrap_or(f64::NAN),
            report.auc.rare_mean.unwrap_or(f64::NAN),
            report.average_precision.all_mean.unwrap_or(f64::NAN),
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
