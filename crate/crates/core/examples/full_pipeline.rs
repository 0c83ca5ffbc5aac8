//! The `sdm` pipeline driven from code: generate, train each loss, evaluate,
//! then write the comparison table.
//!
//!     cargo run --release --example full_pipeline -- /tmp/sdm_demo

use std::path::PathBuf;

use presence_sdm::cli;
use presence_sdm::config::RunConfig;
use presence_sdm::losses::LossConfig;

fn main() -> presence_sdm::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("sdm_pipeline"), PathBuf::from);
    let mut cfg = RunConfig::from_toml_str(
        r#"
        seed = 7
        [synth]
        species = 60
        total_observations = 6000
        [train]
        epochs = 10
        lr = 0.1
        "#,
    )?;
    cfg.paths.output_dir = out.clone();

    cli::cmd_synth_generate(&cfg)?;
    for loss in [LossConfig::bce(), LossConfig::full(2048.0), LossConfig::full_weighted(1.0, 0.5)] {
        cfg.loss = loss;
        let run = loss.tag();
        let summary = cli::cmd_train(&cfg, &run)?;
        let eval = cli::cmd_evaluate(&cfg, &summary.run_dir.join(cli::CHECKPOINT_FILE))?;
        println!("{run:<28} final loss {:.4}  AUC all {:.4} rare {:.4}", summary.final_loss,
            eval.all_mean.auc.unwrap_or(f64::NAN), eval.rare_mean.auc.unwrap_or(f64::NAN));
    }
    let table = cli::cmd_report(&cfg, &[])?;
    println!("{}", std::fs::read_to_string(&table).map_err(|e| presence_sdm::Error::io(&table, e))?);
    Ok(())
}
