//! TOML run configuration shared by every `sdm` subcommand.
//!
//! ```toml
//! seed = 0
//!
//! [paths]
//! output_dir = "out"
//!
//! [synth]
//! species = 200
//! tail_exponent = 1.3
//!
//! [model]
//! hidden_layers = 2
//! hidden_width = 64
//!
//! [train]
//! epochs = 50
//! lr = 0.1
//!
//! [loss]
//! kind = "full_weighted"
//! lambda2 = 0.5
//!
//! [metrics]
//! rare_threshold = 50
//! bucket_edges = [50, 100]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{LocationEncoder, MlpConfig};
use crate::seed::derive_seed;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Overrides `paths.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "SDM_OUTPUT_DIR";

pub const OCCURRENCES_FILE: &str = "occurrences.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const EVAL_SITES_FILE: &str = "eval_sites.csv";
pub const EVAL_LABELS_FILE: &str = "eval_labels.csv";
pub const GEO_PRIOR_FILE: &str = "geo_prior_cases.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub output_dir: PathBuf,
    /// Inputs; relative paths resolve against `output_dir`, which is where
    /// `synth-generate` writes them.
    pub occurrences: PathBuf,
    pub grid: PathBuf,
    pub eval_sites: PathBuf,
    pub eval_labels: PathBuf,
    pub geo_prior_cases: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("sdm_out"),
            occurrences: OCCURRENCES_FILE.into(),
            grid: GRID_FILE.into(),
            eval_sites: EVAL_SITES_FILE.into(),
            eval_labels: EVAL_LABELS_FILE.into(),
            geo_prior_cases: GEO_PRIOR_FILE.into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Number of species; defaults to `synth.species`.
    pub species: Option<usize>,
    /// Subsample species with more presences than this.
    pub cap_per_species: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationEncoding {
    Sinusoidal,
    None,
}

impl From<LocationEncoding> for Option<LocationEncoder> {
    fn from(e: LocationEncoding) -> Self {
        match e {
            LocationEncoding::Sinusoidal => Some(LocationEncoder::Sinusoidal),
            LocationEncoding::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub location_encoding: LocationEncoding,
    pub batchnorm_eps: f64,
    pub batchnorm_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: 64,
            location_encoding: LocationEncoding::Sinusoidal,
            batchnorm_eps: 1e-5,
            batchnorm_momentum: 0.1,
        }
    }
}

impl ModelSection {
    pub fn encoder(&self) -> Option<LocationEncoder> {
        self.location_encoding.into()
    }

    pub fn mlp(&self, input_dim: usize, output_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden_layers: self.hidden_layers,
            hidden_width: self.hidden_width,
            output_dim,
            batchnorm_eps: self.batchnorm_eps,
            batchnorm_momentum: self.batchnorm_momentum,
        }
    }
}

/// Training schedule. Seeds are derived from the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            checkpoint_interval: d.checkpoint_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub rare_threshold: usize,
    pub bucket_edges: Vec<usize>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { rare_threshold: 50, bucket_edges: vec![50, 100] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub metrics: MetricsSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    pub fn species(&self) -> usize {
        self.data.species.unwrap_or(self.synth.species)
    }

    /// Synthetic world settings with the global seed applied.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    /// Training settings with seeds split off the global seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            loss: self.loss,
            init_seed: derive_seed(self.seed, "train.init"),
            shuffle_seed: derive_seed(self.seed, "train.shuffle"),
            pa_seed: derive_seed(self.seed, "train.pa"),
            checkpoint_interval: self.train.checkpoint_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train_config().validate()?;
        self.model.mlp(1, self.species().max(1)).validate()?;
        if self.metrics.rare_threshold == 0 {
            return Err(Error::config("rare_threshold", "must be at least 1"));
        }
        if self.data.cap_per_species == Some(0) {
            return Err(Error::config("cap_per_species", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;

    #[test]
    fn module_example_parses() {
        let doc = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let cfg = RunConfig::from_toml_str(&doc).unwrap();
        assert_eq!(cfg.loss.kind, LossKind::FullWeighted);
        assert_eq!(cfg.loss.lambda1, 1.0);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("out"));
        assert_eq!(cfg.paths.resolve(Path::new("grid.csv")), PathBuf::from("out/grid.csv"));
        cfg.validate().unwrap();
    }

    #[test]
    fn roundtrip_and_unknown_keys() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
        assert!(RunConfig::from_toml_str("[train]\nepoch = 3").is_err());
    }

    #[test]
    fn seeds_follow_the_global_seed() {
        let a = RunConfig { seed: 1, ..RunConfig::default() };
        let b = RunConfig { seed: 2, ..RunConfig::default() };
        assert_ne!(a.train_config().init_seed, b.train_config().init_seed);
        assert_eq!(a.synth_config().seed, 1);
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.synth.tail_exponent = -1.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("tail_exponent"), "{msg}");
    }
}
