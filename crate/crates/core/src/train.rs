//! Epoch-based SGD with one random-location pseudo-absence batch per step.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{feature_dim, site_features, EnvGrid, EvalSet, SpeciesCatalog, TrainSample};
use crate::error::{Error, Result};
use crate::losses::{LossBatchInput, LossConfig, LossKind};
use crate::metrics;
use crate::model::{ForwardCache, Gradients, LocationEncoder, MlpConfig, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub pa_seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 0.001,
            batch_size: 256,
            loss: LossConfig::default(),
            init_seed: 0,
            shuffle_seed: 1,
            pa_seed: 2,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "batch normalization needs at least 2 rows"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the step losses.
    pub mean_loss: f64,
    pub seconds: f64,
    pub validation_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,loss` rows, plus `validation_auc` when recorded. Wall times are
    /// kept out of this file so reruns are byte-identical.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let with_val = self.epochs.iter().any(|e| e.validation_auc.is_some());
        let mut w = csv::Writer::from_path(path)?;
        if with_val {
            w.write_record(["epoch", "loss", "validation_auc"])?;
        } else {
            w.write_record(["epoch", "loss"])?;
        }
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.mean_loss.to_string()];
            if with_val {
                row.push(e.validation_auc.map_or(String::new(), |v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `epoch,seconds` rows.
    pub fn write_timings_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "seconds"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.6}", e.seconds)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Features for `batch_size` points drawn uniformly over grid cells, each
/// jittered uniformly inside its cell.
pub fn sample_random_locations<R: Rng + ?Sized>(
    batch_size: usize,
    grid: &EnvGrid,
    encoder: Option<LocationEncoder>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let dim = feature_dim(grid, encoder);
    let mut out = Array2::zeros((batch_size, dim));
    for mut row in out.rows_mut() {
        let cell = rng.random_range(0..grid.cell_count());
        let (lon, lat) = grid.jitter_in_cell(cell, rng);
        let f = site_features(grid, encoder, lon, lat)?;
        row.assign(&ndarray::ArrayView1::from(&f));
    }
    Ok(out)
}

/// Loss, gradients and forward caches for one step.
pub struct StepOutcome {
    pub loss: f64,
    pub gradients: Gradients,
    pub observed_cache: ForwardCache,
    pub random_cache: Option<ForwardCache>,
}

/// Train-mode forward on the observed batch and, for losses that use them,
/// a separate train-mode forward on the random-location batch; then the
/// exact gradient of the batch loss through both passes. Running statistics
/// are not touched.
pub fn loss_and_gradients(
    params: &Parameters,
    features: ArrayView2<f64>,
    positives: &[usize],
    random_features: Option<ArrayView2<f64>>,
    loss: &LossConfig,
    weights: Option<&[f64]>,
) -> Result<StepOutcome> {
    let (yhat, observed_cache) = params.forward_batch_stats(features)?;
    let random = match (loss.kind.uses_random_locations(), random_features) {
        (true, Some(r)) => {
            if r.nrows() != features.nrows() {
                return Err(Error::Shape(format!(
                    "{} random locations for {} samples",
                    r.nrows(),
                    features.nrows()
                )));
            }
            Some(params.forward_batch_stats(r)?)
        }
        (true, None) => return Err(Error::config("pa_batch", "random-location batch required by this loss")),
        (false, _) => None,
    };
    let out = loss.evaluate(&LossBatchInput {
        yhat: yhat.view(),
        yhat_prime: random.as_ref().map(|(p, _)| p.view()),
        positives,
        weights,
    })?;
    let mut gradients = params.backward(&observed_cache, out.grad_yhat.view())?;
    let random_cache = match (random, out.grad_yhat_prime) {
        (Some((_, cache)), Some(g)) => {
            gradients.accumulate(&params.backward(&cache, g.view())?);
            Some(cache)
        }
        (r, _) => r.map(|(_, c)| c),
    };
    Ok(StepOutcome {
        loss: out.loss,
        gradients,
        observed_cache,
        random_cache,
    })
}

/// One SGD step. Returns the loss before the update.
pub fn train_step(
    params: &mut Parameters,
    features: ArrayView2<f64>,
    positives: &[usize],
    random_features: Option<ArrayView2<f64>>,
    loss: &LossConfig,
    catalog: &SpeciesCatalog,
    lr: f64,
) -> Result<f64> {
    let weights = (loss.kind == LossKind::FullWeighted).then(|| catalog.weights());
    let step = loss_and_gradients(params, features, positives, random_features, loss, weights)?;
    if !step.loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    params.update_running_stats(&step.observed_cache);
    if let Some(cache) = &step.random_cache {
        params.update_running_stats(cache);
    }
    params.sgd_update(&step.gradients, lr)?;
    Ok(step.loss)
}

/// Optional side outputs of [`train`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Where intermediate and final checkpoints go.
    pub checkpoint_dir: Option<&'a Path>,
    /// Records the mean AUC on this set after every epoch.
    pub validation: Option<&'a EvalSet>,
}

/// Splits a shuffled epoch into batches of `batch_size`; a trailing batch of
/// one row is folded into the previous batch.
fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n.div_ceil(batch_size));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").1 = e;
    }
    out
}

/// Trains a freshly initialized network on `dataset`.
pub fn train(
    dataset: &[TrainSample],
    catalog: &SpeciesCatalog,
    grid: &EnvGrid,
    model_config: &MlpConfig,
    train_config: &TrainConfig,
    encoder: Option<LocationEncoder>,
    options: TrainOptions<'_>,
) -> Result<(Parameters, TrainHistory)> {
    train_config.validate()?;
    model_config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::config("dataset", "need at least 2 training samples"));
    }
    if catalog.species_count() != model_config.output_dim {
        return Err(Error::Shape(format!(
            "catalog has {} species, model predicts {}",
            catalog.species_count(),
            model_config.output_dim
        )));
    }
    let dim = feature_dim(grid, encoder);
    if dim != model_config.input_dim {
        return Err(Error::Shape(format!("features have {dim} entries, model expects {}", model_config.input_dim)));
    }
    if train_config.loss.kind == LossKind::FullWeighted {
        catalog.check_full_weighted()?;
    }

    let mut features = Array2::zeros((dataset.len(), dim));
    let mut positives = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        if s.features.len() != dim || s.positive >= catalog.species_count() {
            return Err(Error::Shape(format!("training sample {i} does not match the model")));
        }
        features.row_mut(i).assign(&ndarray::ArrayView1::from(&s.features));
        positives.push(s.positive);
    }

    let mut params = Parameters::init(model_config, &mut ChaCha8Rng::seed_from_u64(train_config.init_seed))?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_config.shuffle_seed);
    let mut pa_rng = ChaCha8Rng::seed_from_u64(train_config.pa_seed);
    let loss = train_config.loss;
    let uses_pa = loss.kind.uses_random_locations();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let bounds = batch_bounds(dataset.len(), train_config.batch_size);
    let mut history = TrainHistory::default();

    let save = |params: &Parameters, name: &str| -> Result<()> {
        if let Some(dir) = options.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Checkpoint {
                params: params.clone(),
                location_encoder: encoder,
                loss: Some(loss),
            }
            .save(&dir.join(name))?;
        }
        Ok(())
    };

    for epoch in 1..=train_config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (step, &(start, end)) in bounds.iter().enumerate() {
            let idx = &order[start..end];
            let batch = features.select(Axis(0), idx);
            let batch_pos: Vec<usize> = idx.iter().map(|&i| positives[i]).collect();
            let random = if uses_pa {
                Some(sample_random_locations(idx.len(), grid, encoder, &mut pa_rng)?)
            } else {
                None
            };
            let value = train_step(
                &mut params,
                batch.view(),
                &batch_pos,
                random.as_ref().map(|r| r.view()),
                &loss,
                catalog,
                train_config.lr,
            )
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { epoch, step },
                other => other,
            })?;
            total += value * idx.len() as f64;
        }
        let validation_auc = match options.validation {
            Some(set) => metrics::evaluate(&params, set, catalog, 1, &[])?.auc.all_mean,
            None => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: total / dataset.len() as f64,
            seconds: started.elapsed().as_secs_f64(),
            validation_auc,
        };
        log::info!("epoch {epoch}: loss {:.6} ({:.2}s)", record.mean_loss, record.seconds);
        history.epochs.push(record);
        if train_config.checkpoint_interval > 0 && epoch % train_config.checkpoint_interval == 0 {
            save(&params, &format!("checkpoint_epoch_{epoch:04}.bin"))?;
        }
    }
    save(&params, "checkpoint.bin")?;
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeoBounds;

    fn grid_1x1() -> EnvGrid {
        let b = GeoBounds { lon_min: 0.0, lon_max: 1.0, lat_min: 0.0, lat_max: 1.0 };
        EnvGrid::new(1, 1, b, 2, vec![0.3, -0.7]).unwrap()
    }

    #[test]
    fn random_locations_single_cell() {
        let grid = grid_1x1();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_random_locations(16, &grid, Some(LocationEncoder::Sinusoidal), &mut rng).unwrap();
        assert_eq!(batch.dim(), (16, 6));
        assert!(batch.column(4).iter().all(|&v| v == 0.3));
        assert!(batch.column(5).iter().all(|&v| v == -0.7));
        assert_ne!(batch[[0, 0]], batch[[1, 0]]);
        let again = sample_random_locations(16, &grid, Some(LocationEncoder::Sinusoidal), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch, again);
    }

    #[test]
    fn batches_cover_every_sample() {
        assert_eq!(batch_bounds(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(batch_bounds(9, 4), vec![(0, 4), (4, 9)]);
        assert_eq!(batch_bounds(3, 8), vec![(0, 3)]);
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
