//! Synthetic worlds with known ground truth.
//!
//! Environment channels are smooth random fields. Each species has a
//! Gaussian niche in feature space, presence counts follow a power law over
//! species rank, and presences are drawn with probability proportional to
//! the true suitability of each cell. Evaluation labels are Bernoulli draws
//! of the same suitability, so every species has a well-defined true ranking.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EnvGrid, EvalSet, GeoBounds, OccurrenceRecord};
use crate::error::{Error, Result};
use crate::metrics::GeoPriorCase;
use crate::model::LocationEncoder;
use crate::seed;

/// Number of cosine waves summed per environmental channel.
pub const WAVES_PER_CHANNEL: usize = 8;
/// Retries for an evaluation label column that comes out constant.
pub const CONSTANT_COLUMN_RETRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub species: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub features: usize,
    pub total_observations: usize,
    /// Counts are proportional to `rank^(-tail_exponent)`; 0 gives uniform counts.
    pub tail_exponent: f64,
    /// `(σ_min, σ_max)` of the niche widths.
    pub niche_width_range: (f64, f64),
    pub eval_sites: usize,
    pub geo_prior_cases: usize,
    /// Fraction of geo-prior cases whose vision scores rank the true class second.
    pub geo_prior_corruption: f64,
    pub bounds: GeoBounds,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            species: 200,
            grid_width: 60,
            grid_height: 60,
            features: 6,
            total_observations: 20_000,
            tail_exponent: 1.3,
            niche_width_range: (0.7, 1.4),
            eval_sites: 500,
            geo_prior_cases: 2000,
            geo_prior_corruption: 0.3,
            bounds: GeoBounds {
                lon_min: 5.0,
                lon_max: 15.0,
                lat_min: 40.0,
                lat_max: 50.0,
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.species < 2 {
            return Err(Error::config("species", "need at least 2 species"));
        }
        if self.grid_width == 0 || self.grid_height == 0 {
            return Err(Error::config("grid_width", "grid dimensions must be at least 1"));
        }
        if self.features == 0 {
            return Err(Error::config("features", "need at least 1 feature"));
        }
        if self.total_observations < self.species {
            return Err(Error::config(
                "total_observations",
                format!("{} is fewer than the {} species", self.total_observations, self.species),
            ));
        }
        if !(self.tail_exponent >= 0.0) || !self.tail_exponent.is_finite() {
            return Err(Error::config(
                "tail_exponent",
                format!("must be a finite non-negative number, got {}", self.tail_exponent),
            ));
        }
        let (lo, hi) = self.niche_width_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("niche_width_range", "need 0 < min <= max"));
        }
        if self.eval_sites == 0 {
            return Err(Error::config("eval_sites", "need ≥ 1 site"));
        }
        if !(0.0..=1.0).contains(&self.geo_prior_corruption) {
            return Err(Error::config("geo_prior_corruption", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Gaussian niche in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NicheModel {
    pub center: Vec<f64>,
    pub width: f64,
}

impl NicheModel {
    /// `exp(-‖x - μ‖² / (2σ²))`, in `(0, 1]` for finite inputs (may underflow to 0 far from μ).
    pub fn suitability(&self, features: &[f64]) -> f64 {
        let d2: f64 = self.center.iter().zip(features).map(|(m, x)| (x - m) * (x - m)).sum();
        (-d2 / (2.0 * self.width * self.width)).exp()
    }
}

/// Standardized smooth random fields, one per channel.
pub fn generate_env_grid<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<EnvGrid> {
    let (w, h, f) = (config.grid_width, config.grid_height, config.features);
    let cells = w * h;
    let mut values = vec![0.0; cells * f];
    for channel in 0..f {
        let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES_PER_CHANNEL)
            .map(|_| {
                (
                    rng.random_range(0.5..1.5),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        let mut field: Vec<f64> = (0..cells)
            .map(|cell| {
                let u = ((cell % w) as f64 + 0.5) / w as f64;
                let v = ((cell / w) as f64 + 0.5) / h as f64;
                waves
                    .iter()
                    .map(|&(a, fx, fy, phase)| a * (TAU * (fx * u + fy * v) + phase).cos())
                    .sum()
            })
            .collect();
        let mean = field.iter().sum::<f64>() / cells as f64;
        let var = field.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cells as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for x in field.iter_mut() {
            *x = (*x - mean) * scale;
        }
        for (cell, x) in field.into_iter().enumerate() {
            values[cell * f + channel] = x;
        }
    }
    EnvGrid::new(w, h, config.bounds, f, values)
}

/// Niche centers are the features of uniformly drawn cells, so every niche
/// is realized somewhere on the grid; widths are uniform in the configured range.
pub fn generate_niches<R: Rng + ?Sized>(config: &SynthConfig, grid: &EnvGrid, rng: &mut R) -> Vec<NicheModel> {
    let (lo, hi) = config.niche_width_range;
    (0..config.species)
        .map(|_| {
            let cell = rng.random_range(0..grid.cell_count());
            let width = if lo < hi { rng.random_range(lo..=hi) } else { lo };
            NicheModel {
                center: grid.cell_features(cell).to_vec(),
                width,
            }
        })
        .collect()
}

/// Counts proportional to `rank^(-exponent)`, rounded by largest remainder
/// so they sum to `total`, with every species getting at least one record.
/// The result is sorted in descending order.
pub fn draw_longtail_counts(species: usize, total: usize, exponent: f64) -> Result<Vec<usize>> {
    if species == 0 || total < species {
        return Err(Error::config("total_observations", "need at least one record per species"));
    }
    let raw: Vec<f64> = (1..=species).map(|r| (r as f64).powf(-exponent)).collect();
    let norm: f64 = raw.iter().sum();
    let quotas: Vec<f64> = raw.iter().map(|p| total as f64 * p / norm).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..species).collect();
    // largest fractional part first; ties go to the better-ranked species
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &s in order.iter().take(total - assigned) {
        counts[s] += 1;
    }
    // lift empty species to one record, taken from the current largest count
    for s in 0..species {
        if counts[s] == 0 {
            let donor = (0..species).max_by_key(|&d| (counts[d], std::cmp::Reverse(d))).expect("non-empty");
            counts[donor] -= 1;
            counts[s] = 1;
        }
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    Ok(counts)
}

fn suitability_map(niche: &NicheModel, grid: &EnvGrid) -> Vec<f64> {
    (0..grid.cell_count()).map(|c| niche.suitability(grid.cell_features(c))).collect()
}

/// Draws `counts[s]` presences for species `s`, choosing cells with
/// probability proportional to suitability and a uniform point inside each.
pub fn sample_presences<R: Rng + ?Sized>(
    niches: &[NicheModel],
    grid: &EnvGrid,
    counts: &[usize],
    rng: &mut R,
) -> Result<Vec<OccurrenceRecord>> {
    if niches.len() != counts.len() {
        return Err(Error::Shape(format!("{} niches for {} counts", niches.len(), counts.len())));
    }
    let mut records = Vec::with_capacity(counts.iter().sum());
    for (species, (niche, &count)) in niches.iter().zip(counts).enumerate() {
        let suit = suitability_map(niche, grid);
        if suit.iter().copied().fold(0.0, f64::max) < 1e-12 {
            return Err(Error::UnreachableNiche(species));
        }
        let dist = WeightedIndex::new(&suit).map_err(|_| Error::UnreachableNiche(species))?;
        for _ in 0..count {
            let cell = dist.sample(rng);
            let (lon, lat) = grid.jitter_in_cell(cell, rng);
            records.push(OccurrenceRecord {
                lon,
                lat,
                species_id: species,
            });
        }
    }
    Ok(records)
}

/// Uniform evaluation sites with Bernoulli(suitability) labels. Label
/// columns that come out constant are redrawn up to
/// [`CONSTANT_COLUMN_RETRIES`] times; any still constant are left in place
/// and reported by [`EvalSet::constant_species`].
pub fn generate_eval_set<R: Rng + ?Sized>(
    niches: &[NicheModel],
    grid: &EnvGrid,
    n_sites: usize,
    encoder: Option<LocationEncoder>,
    rng: &mut R,
) -> Result<EvalSet> {
    if n_sites == 0 {
        return Err(Error::config("eval_sites", "need ≥ 1 site"));
    }
    let cells: Vec<usize> = (0..n_sites).map(|_| rng.random_range(0..grid.cell_count())).collect();
    let locations: Vec<(f64, f64)> = cells.iter().map(|&c| grid.jitter_in_cell(c, rng)).collect();
    let mut labels = Array2::from_elem((n_sites, niches.len()), false);
    let mut excluded = Vec::new();
    for (s, niche) in niches.iter().enumerate() {
        let suit: Vec<f64> = cells.iter().map(|&c| niche.suitability(grid.cell_features(c))).collect();
        let mut attempt = 0;
        loop {
            let column: Vec<bool> = suit.iter().map(|&p| rng.random_bool(p.clamp(0.0, 1.0))).collect();
            let constant = column.iter().all(|&l| l) || column.iter().all(|&l| !l);
            for (i, l) in column.into_iter().enumerate() {
                labels[[i, s]] = l;
            }
            if !constant {
                break;
            }
            attempt += 1;
            if attempt > CONSTANT_COLUMN_RETRIES {
                excluded.push(s);
                break;
            }
        }
    }
    if !excluded.is_empty() {
        log::warn!("evaluation labels constant after retries; excluding species {excluded:?}");
    }
    EvalSet::new(locations, labels, grid, encoder)
}

/// Image-classification cases for the geo-prior task. True classes are
/// uniform over species and located by drawing from the species' niche.
/// Vision scores give distractors `U(0, 0.5)`; the true class scores 1.0,
/// except in exactly `round(corruption · n)` cases where a random rival
/// scores 1.0 and the true class 0.9.
pub fn generate_geo_prior_cases<R: Rng + ?Sized>(
    niches: &[NicheModel],
    grid: &EnvGrid,
    n_cases: usize,
    corruption: f64,
    rng: &mut R,
) -> Result<Vec<GeoPriorCase>> {
    let species = niches.len();
    if species < 2 {
        return Err(Error::config("species", "geo-prior cases need at least 2 species"));
    }
    let samplers = niches
        .iter()
        .enumerate()
        .map(|(s, n)| WeightedIndex::new(suitability_map(n, grid)).map_err(|_| Error::UnreachableNiche(s)))
        .collect::<Result<Vec<_>>>()?;
    let n_corrupt = ((corruption * n_cases as f64).round() as usize).min(n_cases);
    let mut corrupted = vec![false; n_cases];
    corrupted[..n_corrupt].iter_mut().for_each(|c| *c = true);
    corrupted.shuffle(rng);

    let mut cases = Vec::with_capacity(n_cases);
    for &corrupt in &corrupted {
        let true_class = rng.random_range(0..species);
        let cell = samplers[true_class].sample(rng);
        let (lon, lat) = grid.jitter_in_cell(cell, rng);
        let mut scores: Vec<f64> = (0..species).map(|_| rng.random_range(0.0..0.5)).collect();
        if corrupt {
            let mut rival = rng.random_range(0..species - 1);
            if rival >= true_class {
                rival += 1;
            }
            scores[rival] = 1.0;
            scores[true_class] = 0.9;
        } else {
            scores[true_class] = 1.0;
        }
        cases.push(GeoPriorCase {
            vision_scores: scores,
            true_class,
            lon,
            lat,
        });
    }
    Ok(cases)
}

/// Everything generated from one [`SynthConfig`].
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub grid: EnvGrid,
    pub niches: Vec<NicheModel>,
    /// Presence counts per species; species 0 is the most common.
    pub counts: Vec<usize>,
    pub records: Vec<OccurrenceRecord>,
    pub eval_set: EvalSet,
    pub geo_prior_cases: Vec<GeoPriorCase>,
}

impl SyntheticWorld {
    /// Each component draws from its own stream derived from `config.seed`.
    pub fn generate(config: &SynthConfig, encoder: Option<LocationEncoder>) -> Result<Self> {
        config.validate()?;
        let grid = generate_env_grid(config, &mut seed::stream(config.seed, "synth.grid"))?;
        let niches = generate_niches(config, &grid, &mut seed::stream(config.seed, "synth.niches"));
        let counts = draw_longtail_counts(config.species, config.total_observations, config.tail_exponent)?;
        let records = sample_presences(&niches, &grid, &counts, &mut seed::stream(config.seed, "synth.presences"))?;
        let eval_set = generate_eval_set(
            &niches,
            &grid,
            config.eval_sites,
            encoder,
            &mut seed::stream(config.seed, "synth.eval"),
        )?;
        let geo_prior_cases = generate_geo_prior_cases(
            &niches,
            &grid,
            config.geo_prior_cases,
            config.geo_prior_corruption,
            &mut seed::stream(config.seed, "synth.geo_prior"),
        )?;
        Ok(Self {
            config: config.clone(),
            grid,
            niches,
            counts,
            records,
            eval_set,
            geo_prior_cases,
        })
    }
}
