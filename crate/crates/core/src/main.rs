use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use presence_sdm::cli;
use presence_sdm::config::{RunConfig, OUTPUT_DIR_ENV};
use presence_sdm::losses::LossKind;
use presence_sdm::model::MlpConfig;
use presence_sdm::Result;

#[derive(Parser)]
#[command(name = "sdm", version, about = "Presence-only species distribution models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world.
    SynthGenerate {
        #[arg(long, allow_negative_numbers = true)]
        tail_exponent: Option<f64>,
        #[arg(long)]
        species: Option<usize>,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        loss: Option<LossKind>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Five hidden layers of width 1000 instead of the configured size.
        #[arg(long)]
        full_size: bool,
        /// Run directory name under `runs/`; defaults to the loss tag.
        #[arg(long)]
        run: Option<String>,
    },
    /// Evaluate a trained run on the evaluation set.
    Evaluate {
        #[command(flatten)]
        target: Target,
    },
    /// Geo-prior top-1 gain of a trained run.
    GeoPrior {
        #[command(flatten)]
        target: Target,
    },
    /// Merge evaluated runs into comparison.csv.
    Report {
        /// Runs to include; all evaluated runs when empty.
        runs: Vec<String>,
    },
}

#[derive(Args)]
struct Target {
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Target {
    fn checkpoint(&self, cfg: &RunConfig) -> PathBuf {
        match (&self.checkpoint, &self.run) {
            (Some(p), _) => p.clone(),
            (None, Some(run)) => cli::run_dir(cfg, run).join(cli::CHECKPOINT_FILE),
            (None, None) => cli::run_dir(cfg, &cfg.loss.tag()).join(cli::CHECKPOINT_FILE),
        }
    }
}

fn run(args: Cli) -> Result<()> {
    let mut cfg = match &args.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = args.common.output_dir {
        cfg.paths.output_dir = dir;
    }
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    match args.command {
        Command::SynthGenerate { tail_exponent, species } => {
            if let Some(x) = tail_exponent {
                cfg.synth.tail_exponent = x;
            }
            if let Some(s) = species {
                cfg.synth.species = s;
            }
            for f in cli::cmd_synth_generate(&cfg)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Train { loss, lambda, lambda1, lambda2, epochs, lr, batch_size, full_size, run } => {
            if let Some(kind) = loss {
                cfg.loss.kind = kind;
            }
            cfg.loss.lambda = lambda.unwrap_or(cfg.loss.lambda);
            cfg.loss.lambda1 = lambda1.unwrap_or(cfg.loss.lambda1);
            cfg.loss.lambda2 = lambda2.unwrap_or(cfg.loss.lambda2);
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
            if full_size {
                let full = MlpConfig::full_size(1, 1);
                cfg.model.hidden_layers = full.hidden_layers;
                cfg.model.hidden_width = full.hidden_width;
            }
            let name = run.unwrap_or_else(|| cfg.loss.tag());
            let summary = cli::cmd_train(&cfg, &name)?;
            println!("{}: {} epochs, final loss {:.6}", summary.run_dir.display(), summary.epochs, summary.final_loss);
        }
        Command::Evaluate { target } => {
            let s = cli::cmd_evaluate(&cfg, &target.checkpoint(&cfg))?;
            let show = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
            println!("AUC all {} rare {}", show(s.all_mean.auc), show(s.rare_mean.auc));
            println!("AP  all {} rare {}", show(s.all_mean.ap), show(s.rare_mean.ap));
        }
        Command::GeoPrior { target } => {
            let o = cli::cmd_geo_prior(&cfg, &target.checkpoint(&cfg))?;
            println!(
                "top-1 {:.2}% -> {:.2}% (delta {:+.2} points, {} cases, {} skipped)",
                o.baseline_top1, o.combined_top1, o.delta_top1, o.evaluated, o.skipped
            );
        }
        Command::Report { runs } => {
            println!("wrote {}", cli::cmd_report(&cfg, &runs)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
