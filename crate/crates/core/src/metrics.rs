//! Standardized mean squared error and mean standardized log loss.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub smse: f64,
    pub msll: f64,
    pub n_test: usize,
}

fn check_lengths(a: usize, b: usize, context: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context,
            expected: b,
            actual: a,
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population (1/n) variance.
pub fn population_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Mean squared error divided by the population variance of the targets.
pub fn smse(pred_means: &[f64], y_true: &[f64]) -> Result<f64> {
    check_lengths(pred_means.len(), y_true.len(), "smse predictions")?;
    if y_true.len() < 2 {
        return Err(Error::Contract("smse needs at least two test points".into()));
    }
    let var = population_variance(y_true);
    if !(var > 0.0) {
        return Err(Error::DegenerateTargets);
    }
    let mse = pred_means
        .iter()
        .zip(y_true)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / y_true.len() as f64;
    Ok(mse / var)
}

fn gaussian_nll(y: f64, mu: f64, var: f64) -> f64 {
    0.5 * (2.0 * PI * var).ln() + (y - mu) * (y - mu) / (2.0 * var)
}

/// Mean log loss relative to the trivial Gaussian `N(train_mean, train_var)`.
/// Negative values are better than the trivial model.
pub fn msll(pred_means: &[f64], pred_vars: &[f64], y_true: &[f64], train_mean: f64, train_var: f64) -> Result<f64> {
    check_lengths(pred_means.len(), y_true.len(), "msll means")?;
    check_lengths(pred_vars.len(), y_true.len(), "msll variances")?;
    if y_true.is_empty() {
        return Err(Error::Contract("msll needs at least one test point".into()));
    }
    if !(train_var > 0.0) {
        return Err(Error::Contract(format!("training variance must be positive, got {train_var}")));
    }
    if let Some(bad) = pred_vars.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Contract(format!("predictive variance must be positive, got {bad}")));
    }
    let total: f64 = y_true
        .iter()
        .zip(pred_means.iter().zip(pred_vars))
        .map(|(&y, (&mu, &var))| gaussian_nll(y, mu, var) - gaussian_nll(y, train_mean, train_var))
        .sum();
    Ok(total / y_true.len() as f64)
}

pub fn evaluate(
    pred_means: &[f64],
    pred_vars: &[f64],
    y_true: &[f64],
    train_mean: f64,
    train_var: f64,
) -> Result<EvalResult> {
    Ok(EvalResult {
        smse: smse(pred_means, y_true)?,
        msll: msll(pred_means, pred_vars, y_true, train_mean, train_var)?,
        n_test: y_true.len(),
    })
}
