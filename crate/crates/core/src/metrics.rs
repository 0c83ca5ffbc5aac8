//! Per-species ranking metrics and the geo-prior task.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{group_by_frequency, site_features, EnvGrid, EvalSet, SpeciesCatalog};
use crate::error::{Error, Result};
use crate::model::{LocationEncoder, Parameters};

/// Rows per eval-mode forward call.
const PREDICT_CHUNK: usize = 2048;

/// Rare-species definitions by training presence count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RarePreset {
    /// 50 observations or fewer.
    GeoLifeClef,
    /// Fewer than 1000 observations.
    StatusAndTrends,
    /// 100 observations or fewer.
    Iucn,
}

impl RarePreset {
    /// Inclusive upper count for a species to be rare.
    pub fn threshold(self) -> usize {
        match self {
            RarePreset::GeoLifeClef => 50,
            RarePreset::StatusAndTrends => 999,
            RarePreset::Iucn => 100,
        }
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// ROC-AUC as the Mann–Whitney statistic: the fraction of (positive,
/// negative) pairs ranked correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined("AUC undefined: labels are constant"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the rank sum of the positives, with tied groups sharing their mean rank
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        twice_rank_sum += pos_in_group * (start as u64 + 1 + end as u64);
        start = end;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// Sites sorted by descending score; ties keep ascending site index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean of precision@k over the ranks `k` holding a positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Undefined("average precision undefined: no positive labels"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMean {
    pub label: String,
    pub lower: Option<usize>,
    pub upper: Option<usize>,
    /// Species in the bucket.
    pub species: usize,
    /// Species in the bucket with a defined metric.
    pub evaluated: usize,
    pub mean: Option<f64>,
}

/// One metric across species, with all/rare/bucketed means over the species
/// for which it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub per_species: Vec<Option<f64>>,
    pub all_mean: Option<f64>,
    pub rare_mean: Option<f64>,
    pub rare_threshold: usize,
    pub buckets: Vec<BucketMean>,
    /// Species with an undefined metric, left out of every mean.
    pub excluded: Vec<usize>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricReport {
    pub fn from_values(
        metric: &str,
        per_species: Vec<Option<f64>>,
        catalog: &SpeciesCatalog,
        rare_threshold: usize,
        bucket_edges: &[usize],
    ) -> Result<Self> {
        if per_species.len() != catalog.species_count() {
            return Err(Error::Shape(format!(
                "{} metric values for {} species",
                per_species.len(),
                catalog.species_count()
            )));
        }
        if rare_threshold == 0 {
            return Err(Error::config("rare_threshold", "must be at least 1"));
        }
        let excluded = per_species
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(s, _)| s)
            .collect();
        let all_mean = mean_of(per_species.iter().flatten().copied());
        let rare_mean = mean_of(
            per_species
                .iter()
                .zip(catalog.counts())
                .filter(|(_, &c)| c <= rare_threshold)
                .filter_map(|(v, _)| *v),
        );
        let buckets = group_by_frequency(catalog, bucket_edges)?
            .into_iter()
            .map(|b| {
                let values: Vec<f64> = b.species.iter().filter_map(|&s| per_species[s]).collect();
                BucketMean {
                    label: b.label(),
                    lower: b.lower,
                    upper: b.upper,
                    species: b.species.len(),
                    evaluated: values.len(),
                    mean: mean_of(values.into_iter()),
                }
            })
            .collect();
        Ok(Self {
            metric: metric.to_string(),
            per_species,
            all_mean,
            rare_mean,
            rare_threshold,
            buckets,
            excluded,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub auc: MetricReport,
    pub average_precision: MetricReport,
}

/// Eval-mode predictions for every row of `features`.
pub fn predict_all(params: &Parameters, features: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((features.nrows(), params.config.output_dim));
    let mut start = 0;
    while start < features.nrows() {
        let end = (start + PREDICT_CHUNK).min(features.nrows());
        let pred = params.predict(features.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&pred);
        start = end;
    }
    Ok(out)
}

/// Per-species AUC and AP of the model's eval-mode predictions on `eval_set`.
pub fn evaluate(
    params: &Parameters,
    eval_set: &EvalSet,
    catalog: &SpeciesCatalog,
    rare_threshold: usize,
    bucket_edges: &[usize],
) -> Result<EvaluationReport> {
    let species = params.config.output_dim;
    if eval_set.species_count() != species || catalog.species_count() != species {
        return Err(Error::Shape(format!(
            "model predicts {species} species, eval set has {}, catalog has {}",
            eval_set.species_count(),
            catalog.species_count()
        )));
    }
    let pred = predict_all(params, eval_set.features())?;
    let mut auc = Vec::with_capacity(species);
    let mut ap = Vec::with_capacity(species);
    for s in 0..species {
        let scores = pred.index_axis(Axis(1), s).to_vec();
        let labels = eval_set.species_labels(s);
        auc.push(roc_auc(&scores, &labels).ok());
        ap.push(average_precision(&scores, &labels).ok());
    }
    let auc = MetricReport::from_values("auc", auc, catalog, rare_threshold, bucket_edges)?;
    let average_precision = MetricReport::from_values("ap", ap, catalog, rare_threshold, bucket_edges)?;
    if !auc.excluded.is_empty() {
        log::warn!("AUC undefined for species {:?}; excluded from means", auc.excluded);
    }
    Ok(EvaluationReport { auc, average_precision })
}

/// One image to classify: external classifier scores plus where it was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoPriorCase {
    pub vision_scores: Vec<f64>,
    pub true_class: usize,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoPriorOutcome {
    /// Top-1 accuracy of the vision scores alone, in percent.
    pub baseline_top1: f64,
    /// Top-1 accuracy of vision × suitability, in percent.
    pub combined_top1: f64,
    /// `combined_top1 - baseline_top1`, in percentage points.
    pub delta_top1: f64,
    pub evaluated: usize,
    /// Cases whose location lies outside the grid.
    pub skipped: usize,
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Top-1 gain from multiplying each case's vision scores by the model's
/// suitabilities at the case location.
pub fn geo_prior_gain(
    params: &Parameters,
    cases: &[GeoPriorCase],
    grid: &EnvGrid,
    encoder: Option<LocationEncoder>,
) -> Result<GeoPriorOutcome> {
    if cases.is_empty() {
        return Err(Error::config("cases", "need at least one geo-prior case"));
    }
    let species = params.config.output_dim;
    let mut kept = Vec::with_capacity(cases.len());
    let mut rows = Vec::with_capacity(cases.len() * params.config.input_dim);
    for (i, case) in cases.iter().enumerate() {
        if case.vision_scores.len() != species {
            return Err(Error::Shape(format!(
                "case {i} has {} vision scores, model predicts {species} species",
                case.vision_scores.len()
            )));
        }
        if case.true_class >= species || case.vision_scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("cases", format!("case {i} has an invalid class or score")));
        }
        match site_features(grid, encoder, case.lon, case.lat) {
            Ok(f) => {
                rows.extend(f);
                kept.push(case);
            }
            Err(Error::OutOfBounds { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let skipped = cases.len() - kept.len();
    if skipped > 0 {
        log::warn!("{skipped} geo-prior cases lie outside the grid and were skipped");
    }
    if kept.is_empty() {
        return Err(Error::Undefined("no geo-prior case lies inside the grid"));
    }
    let features = Array2::from_shape_vec((kept.len(), params.config.input_dim), rows)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let suit = predict_all(params, &features)?;

    let (mut base_hits, mut combined_hits) = (0usize, 0usize);
    for (case, prior) in kept.iter().zip(suit.rows()) {
        if argmax(case.vision_scores.iter().copied()) == Some(case.true_class) {
            base_hits += 1;
        }
        let combined = case.vision_scores.iter().zip(prior.iter()).map(|(v, p)| v * p);
        if argmax(combined) == Some(case.true_class) {
            combined_hits += 1;
        }
    }
    let n = kept.len() as f64;
    let baseline_top1 = 100.0 * base_hits as f64 / n;
    let combined_top1 = 100.0 * combined_hits as f64 / n;
    Ok(GeoPriorOutcome {
        baseline_top1,
        combined_top1,
        delta_top1: combined_top1 - baseline_top1,
        evaluated: kept.len(),
        skipped,
    })
}

/// Reads geo-prior cases from `case_id,lon,lat,true_class,score_0,...,score_{S-1}`.
pub fn read_geo_prior_csv(path: &std::path::Path) -> Result<Vec<GeoPriorCase>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < 5 || &header[0] != "case_id" || &header[1] != "lon" || &header[2] != "lat" || &header[3] != "true_class" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header case_id,lon,lat,true_class,score_0,...".into(),
        });
    }
    let mut cases = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let row = row.map_err(|e| err(e.to_string()))?;
        let num = |k: usize| row[k].trim().parse::<f64>().map_err(|e| err(format!("column {k}: {e}")));
        let true_class = row[3].trim().parse::<usize>().map_err(|e| err(format!("true_class: {e}")))?;
        let vision_scores = (4..row.len()).map(num).collect::<Result<Vec<_>>>()?;
        cases.push(GeoPriorCase {
            vision_scores,
            true_class,
            lon: num(1)?,
            lat: num(2)?,
        });
    }
    Ok(cases)
}

pub fn write_geo_prior_csv(path: &std::path::Path, cases: &[GeoPriorCase]) -> Result<()> {
    let species = cases.first().map_or(0, |c| c.vision_scores.len());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["case_id".to_string(), "lon".into(), "lat".into(), "true_class".into()];
    header.extend((0..species).map(|s| format!("score_{s}")));
    writer.write_record(&header)?;
    for (i, c) in cases.iter().enumerate() {
        let mut row = vec![i.to_string(), c.lon.to_string(), c.lat.to_string(), c.true_class.to_string()];
        row.extend(c.vision_scores.iter().map(|v| v.to_string()));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..8).prop_map(|v| v as f64 / 7.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_negation_antisymmetry((scores, labels) in instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_monotone_invariance((scores, labels) in instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&t, &labels).unwrap());
        }
    }
}
