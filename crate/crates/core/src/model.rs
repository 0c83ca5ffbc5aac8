//! Residual MLP with batch normalization and per-species sigmoid outputs.
//!
//! ```text
//! h_0 = W_in x + b_in
//! h_l = h_{l-1} + ReLU(BN_l(W_l h_{l-1} + b_l))     l = 1..L
//! y   = clamp(sigmoid(W_out h_L + b_out), eps, 1 - eps)
//! ```
//!
//! Weight matrices are stored `fan_in × fan_out`, so a batch (rows are
//! samples) is propagated with `h.dot(&w)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

/// Fixed sinusoidal encoding of coordinates, prepended to the environmental features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationEncoder {
    Sinusoidal,
}

/// `[sin(2π lon/360), cos(2π lon/360), sin(2π lat/360), cos(2π lat/360)]`
pub fn encode_location(lon: f64, lat: f64) -> [f64; 4] {
    let a = lon.to_radians();
    let b = lat.to_radians();
    [a.sin(), a.cos(), b.sin(), b.cos()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub batchnorm_eps: f64,
    pub batchnorm_momentum: f64,
}

impl MlpConfig {
    /// Small network used for tests and laptop-scale runs: 2 hidden layers of 64.
    pub fn desk(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_layers: 2,
            hidden_width: 64,
            output_dim,
            batchnorm_eps: 1e-5,
            batchnorm_momentum: 0.1,
        }
    }

    /// Full-size network: 5 hidden layers of 1000 units.
    pub fn full_size(input_dim: usize, output_dim: usize) -> Self {
        Self {
            hidden_layers: 5,
            hidden_width: 1000,
            ..Self::desk(input_dim, output_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be at least 1"));
        }
        if self.hidden_layers == 0 {
            return Err(Error::config("hidden_layers", "must be at least 1"));
        }
        if self.hidden_width == 0 {
            return Err(Error::config("hidden_width", "must be at least 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::config("output_dim", "must be at least 1"));
        }
        if !(self.batchnorm_eps > 0.0) {
            return Err(Error::config("batchnorm_eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.batchnorm_momentum) {
            return Err(Error::config("batchnorm_momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Every weight, bias, batch-norm affine parameter and running statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: MlpConfig,
    pub input_weight: Array2<f64>,
    pub input_bias: Array1<f64>,
    pub hidden: Vec<HiddenLayer>,
    pub output_weight: Array2<f64>,
    pub output_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGradients {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Gradients for the trainable blocks of [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub input_weight: Array2<f64>,
    pub input_bias: Array1<f64>,
    pub hidden: Vec<HiddenGradients>,
    pub output_weight: Array2<f64>,
    pub output_bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; each row is independent of its batchmates.
    Eval,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    bn_out: Array2<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

/// Intermediate values of a train-mode forward pass, consumed by [`Parameters::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    layers: Vec<LayerCache>,
    last_hidden: Array2<f64>,
    predictions: Array2<f64>,
}

impl ForwardCache {
    pub fn predictions(&self) -> &Array2<f64> {
        &self.predictions
    }

    /// Batch-normalized pre-activations (before scale and shift) of hidden layer `layer`.
    pub fn normalized(&self, layer: usize) -> &Array2<f64> {
        &self.layers[layer].normalized
    }
}

fn sigmoid_clamped(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn he_matrix<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng))
}

impl Parameters {
    /// He-normal weights, zero biases, `γ = 1`, `β = 0`, running mean 0 and variance 1.
    pub fn init<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, h, s) = (config.input_dim, config.hidden_width, config.output_dim);
        let input_weight = he_matrix(d, h, rng);
        let hidden = (0..config.hidden_layers)
            .map(|_| HiddenLayer {
                weight: he_matrix(h, h, rng),
                bias: Array1::zeros(h),
                gamma: Array1::ones(h),
                beta: Array1::zeros(h),
                running_mean: Array1::zeros(h),
                running_var: Array1::ones(h),
            })
            .collect();
        let output_weight = he_matrix(h, s, rng);
        Ok(Self {
            config: config.clone(),
            input_weight,
            input_bias: Array1::zeros(h),
            hidden,
            output_weight,
            output_bias: Array1::zeros(s),
        })
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                batch.ncols(),
                self.config.input_dim
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(())
    }

    /// Train-mode forward pass using batch statistics, without touching the
    /// running statistics.
    pub fn forward_batch_stats(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&batch)?;
        let rows = batch.nrows();
        if rows < 2 {
            return Err(Error::Shape(format!("train-mode batch needs at least 2 rows, got {rows}")));
        }
        let eps = self.config.batchnorm_eps;
        let mut h = batch.dot(&self.input_weight) + &self.input_bias;
        let mut layers = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let z = h.dot(&layer.weight) + &layer.bias;
            let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = &z - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
            let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
            let normalized = centered * &inv_std;
            let bn_out = &normalized * &layer.gamma + &layer.beta;
            let next = &h + &bn_out.mapv(|v| v.max(0.0));
            layers.push(LayerCache {
                input: h,
                normalized,
                inv_std,
                bn_out,
                batch_mean: mean,
                batch_var: var,
            });
            h = next;
        }
        let logits = h.dot(&self.output_weight) + &self.output_bias;
        let predictions = logits.mapv(sigmoid_clamped);
        let cache = ForwardCache {
            input: batch.to_owned(),
            layers,
            last_hidden: h,
            predictions: predictions.clone(),
        };
        Ok((predictions, cache))
    }

    /// Train-mode forward pass that also folds the batch statistics into the
    /// running statistics with the configured momentum.
    pub fn forward_train(&mut self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        let (pred, cache) = self.forward_batch_stats(batch)?;
        self.update_running_stats(&cache);
        Ok((pred, cache))
    }

    /// `running ← (1 − m)·running + m·batch`, with the unbiased batch variance.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let m = self.config.batchnorm_momentum;
        let rows = cache.input.nrows() as f64;
        let unbias = rows / (rows - 1.0);
        for (layer, lc) in self.hidden.iter_mut().zip(&cache.layers) {
            layer.running_mean.zip_mut_with(&lc.batch_mean, |r, &b| *r = (1.0 - m) * *r + m * b);
            layer
                .running_var
                .zip_mut_with(&lc.batch_var, |r, &b| *r = (1.0 - m) * *r + m * b * unbias);
        }
    }

    /// Eval-mode forward pass using running statistics.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let eps = self.config.batchnorm_eps;
        let mut h = batch.dot(&self.input_weight) + &self.input_bias;
        for layer in &self.hidden {
            let z = h.dot(&layer.weight) + &layer.bias;
            let scale = &layer.gamma / &layer.running_var.mapv(|v| (v + eps).sqrt());
            let bn_out = (z - &layer.running_mean) * &scale + &layer.beta;
            h += &bn_out.mapv(|v| v.max(0.0));
        }
        let logits = h.dot(&self.output_weight) + &self.output_bias;
        Ok(logits.mapv(sigmoid_clamped))
    }

    /// Dispatches on `mode`; eval mode leaves the parameters untouched.
    pub fn forward(&mut self, batch: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        match mode {
            Mode::Train => self.forward_train(batch).map(|(p, _)| p),
            Mode::Eval => self.predict(batch),
        }
    }

    /// Reverse pass from the gradient of a scalar loss with respect to the
    /// clamped predictions.
    ///
    /// The sigmoid derivative is evaluated at the clamped prediction, so the
    /// clamp is passed straight through: `∂L/∂z = ∂L/∂ŷ · ŷ(1 − ŷ)`.
    pub fn backward(&self, cache: &ForwardCache, grad_predictions: ArrayView2<f64>) -> Result<Gradients> {
        if grad_predictions.dim() != cache.predictions.dim() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match cached predictions {:?}",
                grad_predictions.dim(),
                cache.predictions.dim()
            )));
        }
        if cache.layers.len() != self.hidden.len() || cache.input.ncols() != self.config.input_dim {
            return Err(Error::Shape("cache was produced by a different network".into()));
        }
        let rows = cache.input.nrows() as f64;
        let mut dlogits = grad_predictions.to_owned();
        dlogits.zip_mut_with(&cache.predictions, |g, &p| *g *= p * (1.0 - p));

        let output_weight = standard(cache.last_hidden.t().dot(&dlogits));
        let output_bias = dlogits.sum_axis(Axis(0));
        let mut dh = dlogits.dot(&self.output_weight.t());

        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (layer, lc) in self.hidden.iter().zip(&cache.layers).rev() {
            let mut dbn = dh.clone();
            dbn.zip_mut_with(&lc.bn_out, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            });
            let gamma = (&dbn * &lc.normalized).sum_axis(Axis(0));
            let beta = dbn.sum_axis(Axis(0));
            let dnorm = dbn * &layer.gamma;
            let sum_dnorm = dnorm.sum_axis(Axis(0));
            let sum_dnorm_x = (&dnorm * &lc.normalized).sum_axis(Axis(0));
            let dz = (dnorm * rows - &sum_dnorm - &lc.normalized * &sum_dnorm_x) * &(&lc.inv_std / rows);
            let weight = standard(lc.input.t().dot(&dz));
            let bias = dz.sum_axis(Axis(0));
            dh += &dz.dot(&layer.weight.t());
            hidden.push(HiddenGradients {
                weight,
                bias,
                gamma,
                beta,
            });
        }
        hidden.reverse();

        let input_weight = standard(cache.input.t().dot(&dh));
        let input_bias = dh.sum_axis(Axis(0));
        Ok(Gradients {
            input_weight,
            input_bias,
            hidden,
            output_weight,
            output_bias,
        })
    }

    /// Plain SGD: `θ ← θ − lr·g` for every trainable block. Running
    /// statistics are not touched. Nothing is modified if any gradient is non-finite.
    pub fn sgd_update(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::config("lr", format!("must be a finite non-negative number, got {lr}")));
        }
        if grads.hidden.len() != self.hidden.len() {
            return Err(Error::Shape("gradient layer count differs from parameters".into()));
        }
        for ((name, g), (_, p)) in grads.blocks().into_iter().zip(self.trainable_blocks()) {
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient block {name} has the wrong size")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient block {name}")));
            }
        }
        self.input_weight.scaled_add(-lr, &grads.input_weight);
        self.input_bias.scaled_add(-lr, &grads.input_bias);
        for (layer, g) in self.hidden.iter_mut().zip(&grads.hidden) {
            layer.weight.scaled_add(-lr, &g.weight);
            layer.bias.scaled_add(-lr, &g.bias);
            layer.gamma.scaled_add(-lr, &g.gamma);
            layer.beta.scaled_add(-lr, &g.beta);
        }
        self.output_weight.scaled_add(-lr, &grads.output_weight);
        self.output_bias.scaled_add(-lr, &grads.output_bias);
        Ok(())
    }

    /// Trainable blocks in declaration order, as flat slices.
    pub fn trainable_blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("input.weight".into(), slice(self.input_weight.as_slice())),
            ("input.bias".into(), slice(self.input_bias.as_slice())),
        ];
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{i}.weight"), slice(l.weight.as_slice())));
            out.push((format!("hidden.{i}.bias"), slice(l.bias.as_slice())));
            out.push((format!("hidden.{i}.gamma"), slice(l.gamma.as_slice())));
            out.push((format!("hidden.{i}.beta"), slice(l.beta.as_slice())));
        }
        out.push(("output.weight".into(), slice(self.output_weight.as_slice())));
        out.push(("output.bias".into(), slice(self.output_bias.as_slice())));
        out
    }

    /// Mutable counterpart of [`Parameters::trainable_blocks`], same order.
    pub fn trainable_blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("input.weight".into(), slice_mut(self.input_weight.as_slice_mut())),
            ("input.bias".into(), slice_mut(self.input_bias.as_slice_mut())),
        ];
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.push((format!("hidden.{i}.weight"), slice_mut(l.weight.as_slice_mut())));
            out.push((format!("hidden.{i}.bias"), slice_mut(l.bias.as_slice_mut())));
            out.push((format!("hidden.{i}.gamma"), slice_mut(l.gamma.as_slice_mut())));
            out.push((format!("hidden.{i}.beta"), slice_mut(l.beta.as_slice_mut())));
        }
        out.push(("output.weight".into(), slice_mut(self.output_weight.as_slice_mut())));
        out.push(("output.bias".into(), slice_mut(self.output_bias.as_slice_mut())));
        out
    }
}

/// Row-major copy when a product came back in another layout.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("parameter arrays are contiguous")
}

fn slice_mut(s: Option<&mut [f64]>) -> &mut [f64] {
    s.expect("parameter arrays are contiguous")
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            input_weight: Array2::zeros(params.input_weight.raw_dim()),
            input_bias: Array1::zeros(params.input_bias.len()),
            hidden: params
                .hidden
                .iter()
                .map(|l| HiddenGradients {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    gamma: Array1::zeros(l.gamma.len()),
                    beta: Array1::zeros(l.beta.len()),
                })
                .collect(),
            output_weight: Array2::zeros(params.output_weight.raw_dim()),
            output_bias: Array1::zeros(params.output_bias.len()),
        }
    }

    /// `self += other`, block by block.
    pub fn accumulate(&mut self, other: &Gradients) {
        self.input_weight += &other.input_weight;
        self.input_bias += &other.input_bias;
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            a.weight += &b.weight;
            a.bias += &b.bias;
            a.gamma += &b.gamma;
            a.beta += &b.beta;
        }
        self.output_weight += &other.output_weight;
        self.output_bias += &other.output_bias;
    }

    /// Same names and order as [`Parameters::trainable_blocks`].
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("input.weight".into(), slice(self.input_weight.as_slice())),
            ("input.bias".into(), slice(self.input_bias.as_slice())),
        ];
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{i}.weight"), slice(l.weight.as_slice())));
            out.push((format!("hidden.{i}.bias"), slice(l.bias.as_slice())));
            out.push((format!("hidden.{i}.gamma"), slice(l.gamma.as_slice())));
            out.push((format!("hidden.{i}.beta"), slice(l.beta.as_slice())));
        }
        out.push(("output.weight".into(), slice(self.output_weight.as_slice())));
        out.push(("output.bias".into(), slice(self.output_bias.as_slice())));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Parameters, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = MlpConfig {
            hidden_layers: 2,
            hidden_width: 8,
            ..MlpConfig::desk(6, 3)
        };
        (Parameters::init(&cfg, &mut rng).unwrap(), rng)
    }

    fn random_batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
    }

    #[test]
    fn location_encoding() {
        assert_eq!(encode_location(0.0, 0.0), [0.0, 1.0, 0.0, 1.0]);
        let e = encode_location(180.0, 0.0);
        assert!(e[0].abs() <= 1e-15);
        assert_eq!(e[1], -1.0);
        for lat in [-90.0, -12.5, 0.0, 33.3, 90.0] {
            let (a, b) = (encode_location(-180.0, lat), encode_location(180.0, lat));
            for k in 0..4 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_standard() {
        let cfg = MlpConfig::desk(5, 4);
        let a = Parameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Parameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        for l in &a.hidden {
            assert!(l.gamma.iter().all(|&g| g == 1.0));
            assert!(l.beta.iter().all(|&b| b == 0.0));
            assert!(l.running_var.iter().all(|&v| v == 1.0));
        }
        let bad = MlpConfig { hidden_layers: 0, ..cfg };
        assert!(Parameters::init(&bad, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn he_std_at_full_width() {
        let cfg = MlpConfig {
            hidden_layers: 1,
            ..MlpConfig::full_size(3, 2)
        };
        let p = Parameters::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let w = &p.hidden[0].weight;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
        let expected = (2.0f64 / 1000.0).sqrt();
        assert!((std - expected).abs() / expected < 0.05, "std {std}");
    }

    #[test]
    fn zero_head_gives_one_half() {
        let (mut p, mut rng) = small();
        p.output_weight.fill(0.0);
        let x = random_batch(4, 6, &mut rng);
        let (y, _) = p.forward_train(x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
        assert!(p.predict(x.view()).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_rows_are_independent() {
        let (mut p, mut rng) = small();
        let warm = random_batch(16, 6, &mut rng);
        p.forward_train(warm.view()).unwrap();
        let x = random_batch(1, 6, &mut rng);
        let single = p.predict(x.view()).unwrap();
        let pair = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let both = p.predict(pair.view()).unwrap();
        assert_eq!(both.slice(s![0..1, ..]), single);
        assert_eq!(both.slice(s![1..2, ..]), single);
        let other = ndarray::concatenate(Axis(0), &[x.view(), warm.view()]).unwrap();
        assert_eq!(p.predict(other.view()).unwrap().slice(s![0..1, ..]), single);
    }

    #[test]
    fn batch_statistics_are_normalized() {
        let (p, mut rng) = small();
        let x = random_batch(32, 6, &mut rng) * 3.0 + 1.5;
        let (_, cache) = p.forward_batch_stats(x.view()).unwrap();
        for layer in 0..2 {
            let n = cache.normalized(layer);
            for col in n.columns() {
                let m = col.mean().unwrap();
                let v = col.mapv(|a| (a - m).powi(2)).mean().unwrap();
                assert!(m.abs() < 1e-6);
                assert!((v - 1.0).abs() < 1e-4, "variance {v}");
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let (mut p, mut rng) = small();
        let x = random_batch(1, 6, &mut rng);
        assert!(p.forward_train(x.view()).is_err());
        assert!(p.predict(x.view()).is_ok());
        let mut bad = random_batch(3, 6, &mut rng);
        bad[[1, 2]] = f64::NAN;
        assert!(matches!(p.predict(bad.view()), Err(Error::NonFinite(_))));
        assert!(p.predict(random_batch(2, 5, &mut rng).view()).is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (mut p, mut rng) = small();
        let x = random_batch(4, 6, &mut rng);
        let (_, cache) = p.forward_train(x.view()).unwrap();
        let lc = &cache.layers[0];
        for k in 0..8 {
            let expected = 0.9 + 0.1 * lc.batch_var[k] * 4.0 / 3.0;
            assert!((p.hidden[0].running_var[k] - expected).abs() < 1e-15);
            assert!((p.hidden[0].running_mean[k] - 0.1 * lc.batch_mean[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_identity_when_gamma_is_zero() {
        let (mut p, mut rng) = small();
        for l in p.hidden.iter_mut() {
            l.gamma.fill(0.0);
        }
        let x = random_batch(5, 6, &mut rng);
        let h0 = x.dot(&p.input_weight) + &p.input_bias;
        let expected = (h0.dot(&p.output_weight) + &p.output_bias).mapv(sigmoid_clamped);
        let (y, _) = p.forward_batch_stats(x.view()).unwrap();
        assert_eq!(y, expected);
        assert_eq!(p.predict(x.view()).unwrap(), expected);
    }

    #[test]
    fn clamping_keeps_predictions_open() {
        assert_eq!(sigmoid_clamped(1e3), 1.0 - PROB_EPS);
        assert_eq!(sigmoid_clamped(-1e3), PROB_EPS);
        let (mut p, mut rng) = small();
        p.output_weight.mapv_inplace(|v| v * 1e4);
        let y = p.predict(random_batch(8, 6, &mut rng).view()).unwrap();
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let (p, mut rng) = small();
        let x = random_batch(4, 6, &mut rng);
        let (_, cache) = p.forward_batch_stats(x.view()).unwrap();
        let zero = p.backward(&cache, Array2::zeros((4, 3)).view()).unwrap();
        assert_eq!(zero, Gradients::zeros_like(&p));

        let g = random_batch(4, 3, &mut rng);
        let once = p.backward(&cache, g.view()).unwrap();
        let twice = p.backward(&cache, (&g * 2.0).view()).unwrap();
        for ((_, a), (_, b)) in once.blocks().into_iter().zip(twice.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(2.0 * x, *y);
            }
        }
        assert!(p.backward(&cache, Array2::zeros((3, 3)).view()).is_err());
    }

    #[test]
    fn single_feature_single_species_network_trains() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MlpConfig::desk(1, 1);
        let mut p = Parameters::init(&cfg, &mut rng).unwrap();
        let x = random_batch(4, 1, &mut rng);
        let (pred, cache) = p.forward_batch_stats(x.view()).unwrap();
        let g = p.backward(&cache, pred.view()).unwrap();
        p.sgd_update(&g, 0.1).unwrap();
    }

    #[test]
    fn sgd_update_rules() {
        let (mut p, mut rng) = small();
        let x = random_batch(4, 6, &mut rng);
        let (_, cache) = p.forward_batch_stats(x.view()).unwrap();
        let g = p.backward(&cache, random_batch(4, 3, &mut rng).view()).unwrap();

        let before = p.clone();
        p.sgd_update(&g, 0.0).unwrap();
        assert_eq!(p, before);

        let mut twice = before.clone();
        twice.sgd_update(&g, 0.01).unwrap();
        twice.sgd_update(&g, 0.01).unwrap();
        let mut doubled = before.clone();
        doubled.sgd_update(&g, 0.02).unwrap();
        for ((_, a), (_, b)) in twice.trainable_blocks().into_iter().zip(doubled.trainable_blocks()) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() <= 1e-15 * (1.0 + u.abs()));
            }
        }
        assert_eq!(twice.hidden[0].running_var, before.hidden[0].running_var);

        let mut scalar = before.clone();
        scalar.output_bias[0] = 1.0;
        let mut g1 = Gradients::zeros_like(&scalar);
        g1.output_bias[0] = 0.5;
        scalar.sgd_update(&g1, 0.001).unwrap();
        assert_eq!(scalar.output_bias[0], 0.9995);

        let mut bad = g.clone();
        bad.hidden[1].gamma[0] = f64::INFINITY;
        let err = p.sgd_update(&bad, 0.1).unwrap_err();
        assert!(err.to_string().contains("hidden.1.gamma"));
    }
}
