//! ROC-AUC, average precision and bucketed means on hand-made scores.

use presence_sdm::data::SpeciesCatalog;
use presence_sdm::metrics::{average_precision, roc_auc, MetricReport};

fn main() -> presence_sdm::Result<()> {
    let scores = [0.9, 0.8, 0.3, 0.2];
    let labels = [true, false, true, false];
    println!("AUC {:.4}", roc_auc(&scores, &labels)?);
    println!("AP  {:.4}", average_precision(&scores, &labels)?);
    println!("tied scores: AUC {:.4}", roc_auc(&[0.5; 4], &labels)?);
    match roc_auc(&scores, &[true; 4]) {
        Ok(v) => println!("unexpected {v}"),
        Err(e) => println!("constant labels: {e}"),
    }

    let catalog = SpeciesCatalog::from_counts(vec![400, 120, 60, 30, 8])?;
    let per_species = vec![Some(0.91), Some(0.85), Some(0.80), None, Some(0.62)];
    let report = MetricReport::from_values("auc", per_species, &catalog, 50, &[50, 100])?;
    println!("all-species mean {:.4}, rare mean {:.4}", report.all_mean.unwrap(), report.rare_mean.unwrap());
    for b in &report.buckets {
        println!("  {:<10} {} species, mean {:?}", b.label, b.species, b.mean);
    }
    println!("excluded: {:?}", report.excluded);
    Ok(())
}
