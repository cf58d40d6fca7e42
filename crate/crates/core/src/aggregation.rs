//! Server-side client weighting and the federated parameter update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// Tolerance on `sum(w) == 1` accepted by [`apply_update`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    FedAvg,
    Adaptive,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Aggregation::FedAvg),
            "adaptive" => Ok(Aggregation::Adaptive),
            other => Err(Error::Config(format!(
                "aggregation must be `fedavg` or `adaptive`, got `{other}`"
            ))),
        }
    }
}

/// Data-share weights `count_i / sum(count)`.
pub fn fedavg_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Usage("no clients to weight".into()));
    }
    if counts.contains(&0) {
        return Err(Error::Validation("client sample counts must be positive".into()));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Count share blended with normalized loss powers:
///
/// ```text
/// c_i = n_i / sum(n)
/// d_i = L_i^beta / sum_j L_j^beta        (clients without a loss: d_i = 0)
/// w_i = (c_i + lambda d_i) / sum_j (c_j + lambda d_j)
/// ```
///
/// If every loss is absent, falls back to [`fedavg_weights`]. If the present
/// losses are all zero, their shares are split evenly.
pub fn adaptive_weights(counts: &[usize], losses: &[Option<f64>], beta: f64, lambda: f64) -> Result<Vec<f64>> {
    let c = fedavg_weights(counts)?;
    if losses.len() != counts.len() {
        return Err(Error::dim(format!(
            "{} counts but {} losses",
            counts.len(),
            losses.len()
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Validation(format!("beta must be positive, got {beta}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Validation(format!("lambda must be non-negative, got {lambda}")));
    }
    if let Some(bad) = losses.iter().flatten().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Validation(format!("client loss must be finite and >= 0, got {bad}")));
    }
    if losses.iter().all(Option::is_none) {
        log::warn!("no client reported a loss; falling back to FedAvg weights");
        return Ok(c);
    }

    let powered: Vec<Option<f64>> = losses.iter().map(|l| l.map(|v| v.powf(beta))).collect();
    let mass: f64 = powered.iter().flatten().sum();
    let present = powered.iter().flatten().count() as f64;
    let d: Vec<f64> = powered
        .iter()
        .map(|p| match p {
            None => 0.0,
            Some(_) if mass == 0.0 => 1.0 / present,
            Some(v) => v / mass,
        })
        .collect();

    let raw: Vec<f64> = c.iter().zip(&d).map(|(ci, di)| ci + lambda * di).collect();
    let denom: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / denom).collect())
}

/// `theta + sum_i w_i delta_i`, summed in client-index order.
pub fn apply_update(theta: &ParamVector, deltas: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if deltas.len() != weights.len() {
        return Err(Error::dim(format!(
            "{} deltas but {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    if let Some(d) = deltas.iter().find(|d| d.len() != theta.len()) {
        return Err(Error::dim(format!(
            "delta has {} entries, parameters have {}",
            d.len(),
            theta.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Validation(format!(
            "weights must be non-negative and sum to 1, got sum {sum}"
        )));
    }
    let mut out = theta.clone();
    for (delta, &w) in deltas.iter().zip(weights) {
        out.add_scaled(delta, w)?;
    }
    Ok(out)
}
