//! Presence-only losses for the single-positive multi-label setting.
//!
//! Every row of a batch carries exactly one observed species `p`. With `S`
//! species, `ŷ` the predictions at the observed location and `ŷ'` the
//! predictions at a random location, the per-row losses are
//!
//! ```text
//! bce:            -(1/S) [ log ŷ_p + Σ_{s≠p} log(1-ŷ_s) ]
//! full:           -(1/S) [ λ log ŷ_p + Σ_{s≠p} log(1-ŷ_s) + Σ_s log(1-ŷ'_s) ]
//! full_weighted:  -(1/S) [ λ₁ w_p log ŷ_p
//!                          + Σ_{s≠p} λ₂ / (1 - 1/w_s) log(1-ŷ_s)
//!                          + Σ_s (1-λ₂) log(1-ŷ'_s) ]
//! ```
//!
//! The random-location sum includes the positive species. Batch losses are
//! row means, and gradients are returned with respect to the probabilities.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Full,
    FullWeighted,
}

impl LossKind {
    /// Whether the loss needs predictions at random locations.
    pub fn uses_random_locations(self) -> bool {
        !matches!(self, LossKind::Bce)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Full => "full",
            LossKind::FullWeighted => "full_weighted",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "full" => Ok(LossKind::Full),
            "full_weighted" | "full-weighted" => Ok(LossKind::FullWeighted),
            other => Err(Error::config("kind", format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Positive weight of the full assume-negative loss.
    pub lambda: f64,
    /// Positive scale of the full weighted loss.
    pub lambda1: f64,
    /// Split between target-group and random-location pseudo-absences.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::FullWeighted,
            lambda: 2048.0,
            lambda1: 1.0,
            lambda2: 0.5,
        }
    }
}

impl LossConfig {
    pub fn bce() -> Self {
        Self {
            kind: LossKind::Bce,
            ..Self::default()
        }
    }

    pub fn full(lambda: f64) -> Self {
        Self {
            kind: LossKind::Full,
            lambda,
            ..Self::default()
        }
    }

    pub fn full_weighted(lambda1: f64, lambda2: f64) -> Self {
        Self {
            kind: LossKind::FullWeighted,
            lambda1,
            lambda2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda", "must be positive"));
        }
        if !(self.lambda1 > 0.0) || !self.lambda1.is_finite() {
            return Err(Error::config("lambda1", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda2) {
            return Err(Error::config("lambda2", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Short run name such as `full_weighted_l2_0.5`.
    pub fn tag(&self) -> String {
        match self.kind {
            LossKind::Bce => "bce".to_string(),
            LossKind::Full => format!("full_l{}", self.lambda),
            LossKind::FullWeighted => format!("full_weighted_l1_{}_l2_{}", self.lambda1, self.lambda2),
        }
    }

    /// Evaluates the configured loss.
    pub fn evaluate(&self, input: &LossBatchInput<'_>) -> Result<LossOutput> {
        self.validate()?;
        match self.kind {
            LossKind::Bce => bce_loss(input),
            LossKind::Full => full_loss(input, self.lambda),
            LossKind::FullWeighted => full_weighted_loss(input, self.lambda1, self.lambda2),
        }
    }
}

/// Predictions and labels for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossBatchInput<'a> {
    /// `B × S` predictions at the observed locations.
    pub yhat: ArrayView2<'a, f64>,
    /// `B × S` predictions at the paired random locations.
    pub yhat_prime: Option<ArrayView2<'a, f64>>,
    /// Observed species of each row.
    pub positives: &'a [usize],
    /// Species weights `w_s`.
    pub weights: Option<&'a [f64]>,
}

impl<'a> LossBatchInput<'a> {
    fn validate(&self) -> Result<()> {
        let (rows, species) = self.yhat.dim();
        if self.positives.len() != rows {
            return Err(Error::Shape(format!("{} positives for {rows} rows", self.positives.len())));
        }
        if let Some(&p) = self.positives.iter().find(|&&p| p >= species) {
            return Err(Error::Shape(format!("positive species {p} but S = {species}")));
        }
        if let Some(prime) = self.yhat_prime {
            if prime.dim() != self.yhat.dim() {
                return Err(Error::Shape("yhat_prime shape differs from yhat".into()));
            }
        }
        if let Some(w) = self.weights {
            if w.len() != species {
                return Err(Error::Shape(format!("{} weights for {species} species", w.len())));
            }
        }
        Ok(())
    }

    fn require_prime(&self) -> Result<ArrayView2<'a, f64>> {
        self.yhat_prime
            .ok_or_else(|| Error::config("yhat_prime", "random-location predictions are required"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_yhat: Array2<f64>,
    /// `None` for the binary cross-entropy, which ignores random locations.
    pub grad_yhat_prime: Option<Array2<f64>>,
}

/// Unweighted batch-mean components shared by all three losses:
/// `positive = -(1/S) log ŷ_p`, `background = -(1/S) Σ_{s≠p} log(1-ŷ_s)`,
/// `random = -(1/S) Σ_s log(1-ŷ'_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub positive: f64,
    pub background: f64,
    pub random: f64,
}

pub fn loss_terms(input: &LossBatchInput<'_>) -> Result<LossTerms> {
    input.validate()?;
    let (rows, species) = input.yhat.dim();
    let norm = (rows * species) as f64;
    let mut terms = LossTerms {
        positive: 0.0,
        background: 0.0,
        random: 0.0,
    };
    for (row, &p) in input.yhat.rows().into_iter().zip(input.positives) {
        for (s, &y) in row.iter().enumerate() {
            if s == p {
                terms.positive -= y.ln();
            } else {
                terms.background -= (-y).ln_1p();
            }
        }
    }
    if let Some(prime) = input.yhat_prime {
        terms.random = -prime.iter().map(|&y| (-y).ln_1p()).sum::<f64>();
    }
    terms.positive /= norm;
    terms.background /= norm;
    terms.random /= norm;
    Ok(terms)
}

/// Shared evaluation: `positive_coef(p)` multiplies `log ŷ_p`,
/// `background_coef(s)` multiplies `log(1-ŷ_s)` for `s ≠ p`, and
/// `random_coef` multiplies every `log(1-ŷ'_s)`.
fn weighted_loss(
    input: &LossBatchInput<'_>,
    positive_coef: impl Fn(usize) -> f64,
    background_coef: impl Fn(usize) -> f64,
    random_coef: Option<f64>,
) -> Result<LossOutput> {
    let (rows, species) = input.yhat.dim();
    let norm = 1.0 / (rows * species) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, species));
    for ((row, mut g), &p) in input.yhat.rows().into_iter().zip(grad.rows_mut()).zip(input.positives) {
        for (s, (&y, g)) in row.iter().zip(g.iter_mut()).enumerate() {
            if s == p {
                let c = positive_coef(s);
                loss -= c * y.ln();
                *g = -c * norm / y;
            } else {
                let c = background_coef(s);
                loss -= c * (-y).ln_1p();
                *g = c * norm / (1.0 - y);
            }
        }
    }
    let grad_prime = match random_coef {
        Some(c) => {
            let prime = input.require_prime()?;
            loss -= c * prime.iter().map(|&y| (-y).ln_1p()).sum::<f64>();
            Some(prime.mapv(|y| c * norm / (1.0 - y)))
        }
        None => None,
    };
    Ok(LossOutput {
        loss: loss * norm,
        grad_yhat: grad,
        grad_yhat_prime: grad_prime,
    })
}

/// Binary cross-entropy with target-group background: every unobserved species is a negative.
pub fn bce_loss(input: &LossBatchInput<'_>) -> Result<LossOutput> {
    input.validate()?;
    weighted_loss(input, |_| 1.0, |_| 1.0, None)
}

/// Full assume-negative loss: up-weighted positive plus one random-location
/// pseudo-absence per row.
pub fn full_loss(input: &LossBatchInput<'_>, lambda: f64) -> Result<LossOutput> {
    input.validate()?;
    input.require_prime()?;
    weighted_loss(input, |_| lambda, |_| 1.0, Some(1.0))
}

/// Full weighted loss with species weights `w_s = n / n_p(s)`.
pub fn full_weighted_loss(input: &LossBatchInput<'_>, lambda1: f64, lambda2: f64) -> Result<LossOutput> {
    input.validate()?;
    input.require_prime()?;
    let weights = input
        .weights
        .ok_or_else(|| Error::config("weights", "species weights are required for the full weighted loss"))?;
    if let Some((species, &weight)) = weights.iter().enumerate().find(|(_, &w)| !(w > 1.0)) {
        return Err(Error::SingularWeight { species, weight });
    }
    weighted_loss(
        input,
        |s| lambda1 * weights[s],
        |s| lambda2 / (1.0 - 1.0 / weights[s]),
        Some(1.0 - lambda2),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn input<'a>(
        yhat: &'a Array2<f64>,
        prime: Option<&'a Array2<f64>>,
        positives: &'a [usize],
        weights: Option<&'a [f64]>,
    ) -> LossBatchInput<'a> {
        LossBatchInput {
            yhat: yhat.view(),
            yhat_prime: prime.map(|p| p.view()),
            positives,
            weights,
        }
    }

    #[test]
    fn bce_values() {
        let y = array![[0.5, 0.5]];
        let out = bce_loss(&input(&y, None, &[0], None)).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(out.grad_yhat_prime.is_none());

        let y = array![[0.2, 0.7, 0.4]];
        let out = bce_loss(&input(&y, None, &[1], None)).unwrap();
        let expected = -(0.7f64.ln() + 0.8f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 0.363548).abs() < 1e-6);

        let eps = crate::model::PROB_EPS;
        let y = array![[eps, 1.0 - eps, eps]];
        assert!(bce_loss(&input(&y, None, &[1], None)).unwrap().loss < 1e-6);
    }

    #[test]
    fn full_values() {
        let y = array![[0.5]];
        let out = full_loss(&input(&y, Some(&y), &[0], None), 2048.0).unwrap();
        assert!((out.loss - 2049.0 * std::f64::consts::LN_2).abs() < 1e-9);

        // λ = 1 with vanishing random-location predictions reduces to BCE
        let y = array![[0.2, 0.7, 0.4]];
        let tiny = Array2::from_elem((1, 3), crate::model::PROB_EPS);
        let full = full_loss(&input(&y, Some(&tiny), &[1], None), 1.0).unwrap();
        let bce = bce_loss(&input(&y, None, &[1], None)).unwrap();
        assert!((full.loss - bce.loss).abs() < 2e-7);

        let prime = array![[0.3, 0.9, 0.1]];
        let out = full_loss(&input(&y, Some(&prime), &[2], None), 5.0).unwrap();
        let g = out.grad_yhat_prime.unwrap();
        for s in 0..3 {
            assert!((g[[0, s]] - 1.0 / (3.0 * (1.0 - prime[[0, s]]))).abs() < 1e-15);
        }
        assert!(full_loss(&input(&y, None, &[2], None), 5.0).is_err());
    }

    #[test]
    fn full_weighted_values() {
        let y = array![[0.5]];
        let w = [5.0];
        let out = full_weighted_loss(&input(&y, Some(&y), &[0], Some(&w)), 1.0, 0.5).unwrap();
        assert!((out.loss - 5.5 * std::f64::consts::LN_2).abs() < 1e-12);

        let y = array![[0.3, 0.6], [0.2, 0.9]];
        let prime = array![[0.4, 0.1], [0.7, 0.5]];
        let w = [3.0, 1.5];
        let out = full_weighted_loss(&input(&y, Some(&prime), &[0, 1], Some(&w)), 0.1, 1.0).unwrap();
        assert!(out.grad_yhat_prime.unwrap().iter().all(|&g| g == 0.0));

        let err = full_weighted_loss(&input(&y, Some(&prime), &[0, 1], Some(&[3.0, 1.0])), 1.0, 0.5).unwrap_err();
        assert_eq!(err.to_string(), "full-weighted loss singular for species 1 (n_p(s) = n, weight 1)");
        assert!(full_weighted_loss(&input(&y, Some(&prime), &[0, 1], None), 1.0, 0.5).is_err());
    }

    #[test]
    fn rejects_shape_errors() {
        let y = array![[0.5, 0.5]];
        assert!(bce_loss(&input(&y, None, &[2], None)).is_err());
        assert!(bce_loss(&input(&y, None, &[0, 1], None)).is_err());
        let prime = array![[0.5]];
        assert!(full_loss(&input(&y, Some(&prime), &[0], None), 1.0).is_err());
        assert!(LossConfig { lambda2: 1.5, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { lambda: 0.0, ..LossConfig::default() }.validate().is_err());
        assert_eq!("full-weighted".parse::<LossKind>().unwrap(), LossKind::FullWeighted);
        assert!("focal".parse::<LossKind>().is_err());
    }

    #[test]
    fn terms_compose_full_loss() {
        let y = array![[0.3, 0.6, 0.2], [0.25, 0.5, 0.8]];
        let prime = array![[0.4, 0.1, 0.3], [0.7, 0.5, 0.05]];
        let inp = input(&y, Some(&prime), &[2, 0], None);
        let t = loss_terms(&inp).unwrap();
        let full = full_loss(&inp, 7.0).unwrap();
        assert!((full.loss - (7.0 * t.positive + t.background + t.random)).abs() < 1e-13);
    }
}
