//! Subcommands behind the `sdm` binary. Each takes a resolved [`RunConfig`]
//! and writes into `paths.output_dir`, guarded by a lockfile.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, EnvGrid, EvalSet, SpeciesCatalog, TrainSample};
use crate::error::{Error, Result};
use crate::metrics::{self, BucketMean, EvaluationReport, GeoPriorOutcome};
use crate::model::LocationEncoder;
use crate::seed;
use crate::synth::SyntheticWorld;
use crate::train::{self, TrainOptions};

pub const LOCK_FILE: &str = ".sdm.lock";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUNS_DIR: &str = "runs";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const REPORT_CSV: &str = "report.csv";
pub const GEO_PRIOR_JSON: &str = "geo_prior.json";
pub const COMPARISON_CSV: &str = "comparison.csv";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub synth: crate::synth::SynthConfig,
    pub location_encoding: crate::config::LocationEncoding,
    pub files: Vec<String>,
    /// Counts per species as generated, most common first.
    pub counts: Vec<usize>,
    pub generator_notes: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// Writes the synthetic world's occurrences, grid, evaluation set, geo-prior
/// cases and a manifest. Returns the files written.
pub fn cmd_synth_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let out = &cfg.paths.output_dir;
    let _lock = OutputLock::acquire(out)?;
    let world = SyntheticWorld::generate(&cfg.synth_config(), cfg.model.encoder())?;
    let p = &cfg.paths;
    let files = [
        p.resolve(&p.occurrences),
        p.resolve(&p.grid),
        p.resolve(&p.eval_sites),
        p.resolve(&p.eval_labels),
        p.resolve(&p.geo_prior_cases),
        out.join(MANIFEST_FILE),
    ];
    for f in &files {
        if let Some(parent) = f.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    data::write_occurrences_csv(&files[0], &world.records)?;
    world.grid.write_csv(&files[1])?;
    world.eval_set.write_csv(&files[2], &files[3])?;
    metrics::write_geo_prior_csv(&files[4], &world.geo_prior_cases)?;
    let manifest = Manifest {
        seed: cfg.seed,
        synth: world.config.clone(),
        location_encoding: cfg.model.location_encoding,
        files: files.iter().map(|f| f.display().to_string()).collect(),
        counts: world.counts.clone(),
        generator_notes: vec![
            "environment channels: sums of random cosine waves, standardized".into(),
            "species: isotropic Gaussian niches in feature space".into(),
            "counts: rank^-tail_exponent with largest-remainder rounding".into(),
            "eval labels: Bernoulli(suitability) per site and species".into(),
            "geo-prior vision scores: simulated, true class demoted in a fixed fraction of cases".into(),
        ],
    };
    write_json(&files[5], &manifest)?;
    Ok(files.to_vec())
}

/// Training inputs loaded from the configured paths.
pub struct LoadedData {
    pub grid: EnvGrid,
    pub dataset: Vec<TrainSample>,
    pub catalog: SpeciesCatalog,
}

pub fn load_training_data(cfg: &RunConfig) -> Result<LoadedData> {
    let p = &cfg.paths;
    let grid = EnvGrid::read_csv(&p.resolve(&p.grid))?;
    let mut records = data::load_occurrences_csv(&p.resolve(&p.occurrences))?;
    if let Some(cap) = cfg.data.cap_per_species {
        records = data::cap_per_species(&records, cap, &mut seed::stream(cfg.seed, "data.cap"))?;
    }
    let (dataset, catalog) = data::assemble_dataset(&records, &grid, cfg.model.encoder(), cfg.species())?;
    Ok(LoadedData { grid, dataset, catalog })
}

pub fn run_dir(cfg: &RunConfig, run: &str) -> PathBuf {
    cfg.paths.output_dir.join(RUNS_DIR).join(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_loss: f64,
    pub epochs: usize,
}

/// Trains under `cfg.loss` and writes checkpoint, history and timings into
/// `runs/<run>/`.
pub fn cmd_train(cfg: &RunConfig, run: &str) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.paths.output_dir;
    let _lock = OutputLock::acquire(out)?;
    let loaded = load_training_data(cfg)?;
    let encoder = cfg.model.encoder();
    let model = cfg.model.mlp(data::feature_dim(&loaded.grid, encoder), cfg.species());
    let train_cfg = cfg.train_config();
    let dir = run_dir(cfg, run);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (_, history) = train::train(
        &loaded.dataset,
        &loaded.catalog,
        &loaded.grid,
        &model,
        &train_cfg,
        encoder,
        TrainOptions { checkpoint_dir: Some(&dir), validation: None },
    )?;
    history.write_csv(&dir.join(HISTORY_FILE))?;
    history.write_timings_csv(&dir.join(TIMINGS_FILE))?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()).map_err(|e| Error::io(&dir, e))?;
    Ok(TrainSummary {
        run_dir: dir,
        final_loss: history.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        epochs: history.epochs.len(),
    })
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<(Checkpoint, Option<LocationEncoder>)> {
    let ckpt = Checkpoint::load(path)?;
    let encoder = ckpt.location_encoder;
    if ckpt.params.config.output_dim != cfg.species() {
        return Err(Error::Shape(format!(
            "checkpoint predicts {} species, configuration has {}",
            ckpt.params.config.output_dim,
            cfg.species()
        )));
    }
    Ok((ckpt, encoder))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub label: String,
    pub species: usize,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
}

/// `evaluation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub loss: Option<String>,
    pub all_mean: MeanPair,
    pub rare_mean: MeanPair,
    pub rare_threshold: usize,
    pub buckets: Vec<BucketSummary>,
    pub excluded: Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPair {
    pub auc: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub auc: Vec<usize>,
    pub ap: Vec<usize>,
}

impl EvaluationSummary {
    pub fn new(report: &EvaluationReport, loss: Option<String>) -> Self {
        let (auc, ap) = (&report.auc, &report.average_precision);
        let buckets = auc
            .buckets
            .iter()
            .zip(&ap.buckets)
            .map(|(a, p): (&BucketMean, &BucketMean)| BucketSummary {
                label: a.label.clone(),
                species: a.species,
                auc: a.mean,
                ap: p.mean,
            })
            .collect();
        Self {
            loss,
            all_mean: MeanPair { auc: auc.all_mean, ap: ap.all_mean },
            rare_mean: MeanPair { auc: auc.rare_mean, ap: ap.rare_mean },
            rare_threshold: auc.rare_threshold,
            buckets,
            excluded: Excluded { auc: auc.excluded.clone(), ap: ap.excluded.clone() },
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Evaluates a checkpoint on the configured evaluation set. Writes
/// `evaluation.json` and a per-species `report.csv` next to the checkpoint.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<EvaluationSummary> {
    cfg.validate()?;
    let out = &cfg.paths.output_dir;
    let _lock = OutputLock::acquire(out)?;
    let (ckpt, encoder) = load_model(checkpoint, cfg)?;
    let loaded = load_training_data(cfg)?;
    let p = &cfg.paths;
    let eval_set = EvalSet::read_csv(
        &p.resolve(&p.eval_sites),
        &p.resolve(&p.eval_labels),
        cfg.species(),
        &loaded.grid,
        encoder,
    )?;
    let report = metrics::evaluate(
        &ckpt.params,
        &eval_set,
        &loaded.catalog,
        cfg.metrics.rare_threshold,
        &cfg.metrics.bucket_edges,
    )?;
    let summary = EvaluationSummary::new(&report, ckpt.loss.map(|l| l.tag()));
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    write_json(&dir.join(EVALUATION_JSON), &summary)?;

    let buckets = data::group_by_frequency(&loaded.catalog, &cfg.metrics.bucket_edges)?;
    let mut bucket_of = vec![String::new(); cfg.species()];
    for b in &buckets {
        for &s in &b.species {
            bucket_of[s] = b.label();
        }
    }
    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
    w.write_record(["species_id", "metric", "value", "bucket", "count"])?;
    for m in [&report.auc, &report.average_precision] {
        for (s, v) in m.per_species.iter().enumerate() {
            w.write_record([
                s.to_string(),
                m.metric.clone(),
                opt(*v),
                bucket_of[s].clone(),
                loaded.catalog.counts()[s].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(summary)
}

/// Geo-prior top-1 gain of a checkpoint on the configured cases; writes
/// `geo_prior.json` next to the checkpoint.
pub fn cmd_geo_prior(cfg: &RunConfig, checkpoint: &Path) -> Result<GeoPriorOutcome> {
    cfg.validate()?;
    let out = &cfg.paths.output_dir;
    let _lock = OutputLock::acquire(out)?;
    let (ckpt, encoder) = load_model(checkpoint, cfg)?;
    let p = &cfg.paths;
    let grid = EnvGrid::read_csv(&p.resolve(&p.grid))?;
    let cases = metrics::read_geo_prior_csv(&p.resolve(&p.geo_prior_cases))?;
    let outcome = metrics::geo_prior_gain(&ckpt.params, &cases, &grid, encoder)?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    write_json(&dir.join(GEO_PRIOR_JSON), &outcome)?;
    Ok(outcome)
}

/// Merges `runs/*/evaluation.json` (or the named runs) into
/// `comparison.csv`, one row per run.
pub fn cmd_report(cfg: &RunConfig, runs: &[String]) -> Result<PathBuf> {
    let out = &cfg.paths.output_dir;
    let _lock = OutputLock::acquire(out)?;
    let mut found: BTreeMap<String, EvaluationSummary> = BTreeMap::new();
    let names: Vec<String> = if runs.is_empty() {
        let root = out.join(RUNS_DIR);
        let mut v = Vec::new();
        if root.is_dir() {
            for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
                let entry = entry.map_err(|e| Error::io(&root, e))?;
                if entry.path().join(EVALUATION_JSON).is_file() {
                    v.push(entry.file_name().to_string_lossy().into_owned());
                }
            }
        }
        v
    } else {
        runs.to_vec()
    };
    for name in names {
        let path = run_dir(cfg, &name).join(EVALUATION_JSON);
        found.insert(name, read_json(&path)?);
    }
    if found.is_empty() {
        return Err(Error::config("runs", "no evaluated runs found"));
    }
    let labels: Vec<String> = found
        .values()
        .next()
        .map(|s| s.buckets.iter().map(|b| b.label.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["run".to_string(), "loss".into(), "auc_all".into(), "auc_rare".into(), "ap_all".into(), "ap_rare".into()];
    for l in &labels {
        header.push(format!("auc_{l}"));
    }
    let path = out.join(COMPARISON_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(&header)?;
    for (name, s) in &found {
        let mut row = vec![
            name.clone(),
            s.loss.clone().unwrap_or_default(),
            opt(s.all_mean.auc),
            opt(s.rare_mean.auc),
            opt(s.all_mean.ap),
            opt(s.rare_mean.ap),
        ];
        for l in &labels {
            row.push(opt(s.buckets.iter().find(|b| &b.label == l).and_then(|b| b.auc)));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
