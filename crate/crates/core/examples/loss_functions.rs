//! Evaluates the three losses on one small batch and shows how the random
//! location term and the species weights enter.

use ndarray::array;
use presence_sdm::data::SpeciesCatalog;
use presence_sdm::losses::{LossBatchInput, LossConfig};

fn main() -> presence_sdm::Result<()> {
    // two observed samples over three species, plus predictions at two random locations
    let yhat = array![[0.6, 0.3, 0.2], [0.1, 0.2, 0.7]];
    let yhat_prime = array![[0.4, 0.1, 0.3], [0.2, 0.2, 0.5]];
    let positives = [0, 2];
    let catalog = SpeciesCatalog::from_counts(vec![900, 90, 10])?;
    println!("species weights n/n_p: {:?}", catalog.weights());

    let input = LossBatchInput {
        yhat: yhat.view(),
        yhat_prime: Some(yhat_prime.view()),
        positives: &positives,
        weights: Some(catalog.weights()),
    };
    for cfg in [LossConfig::bce(), LossConfig::full(2048.0), LossConfig::full_weighted(1.0, 0.5)] {
        let out = cfg.evaluate(&input)?;
        println!("{:<26} loss {:>10.4}", cfg.tag(), out.loss);
        println!("    dL/dyhat  {:.4}", out.grad_yhat);
        if let Some(g) = out.grad_yhat_prime {
            println!("    dL/dyhat' {:.4}", g);
        }
    }
    Ok(())
}
