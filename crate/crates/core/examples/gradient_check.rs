//! Compares backpropagated gradients with central finite differences for
//! every trainable parameter of a tiny network.

use ndarray::Array2;
use presence_sdm::losses::LossConfig;
use presence_sdm::model::{MlpConfig, Parameters};
use presence_sdm::train::loss_and_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> presence_sdm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = MlpConfig { hidden_layers: 2, hidden_width: 8, ..MlpConfig::desk(6, 3) };
    let params = Parameters::init(&cfg, &mut rng)?;
    let x = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
    let xr = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
    let positives = [0, 1, 2, 1];
    let weights = [3.0, 2.0, 6.0];
    let h = 1e-6;

    for loss in [LossConfig::bce(), LossConfig::full(2048.0), LossConfig::full_weighted(1.0, 0.5)] {
        let loss_at = |p: &Parameters| -> presence_sdm::Result<f64> {
            Ok(loss_and_gradients(p, x.view(), &positives, Some(xr.view()), &loss, Some(&weights))?.loss)
        };
        let step = loss_and_gradients(&params, x.view(), &positives, Some(xr.view()), &loss, Some(&weights))?;
        println!("{} (loss {:.6})", loss.tag(), step.loss);
        for (bi, (name, grad)) in step.gradients.blocks().into_iter().enumerate() {
            let mut worst = 0.0f64;
            for (k, &a) in grad.iter().enumerate() {
                let mut p = params.clone();
                let base = params.trainable_blocks()[bi].1[k];
                p.trainable_blocks_mut()[bi].1[k] = base + h;
                let up = loss_at(&p)?;
                p.trainable_blocks_mut()[bi].1[k] = base - h;
                let down = loss_at(&p)?;
                worst = worst.max((a - (up - down) / (2.0 * h)).abs());
            }
            println!("    {name:<16} max |analytic - numeric| = {worst:.2e}");
        }
    }
    Ok(())
}
