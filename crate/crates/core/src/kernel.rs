//! Squared-exponential covariance with per-dimension lengthscales.
//!
//! All hyperparameters live in log space so that the optimizer works on an
//! unconstrained vector. The canonical coordinate order used everywhere
//! (gradients, optimizer vectors) is: output scale, lengthscales by
//! dimension, noise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-parameterized SE kernel hyperparameters plus observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// `σ_f² = exp(2 · log_output_scale)`
    pub log_output_scale: f64,
    pub log_lengthscales: Vec<f64>,
    /// `σ_ε² = exp(2 · log_noise)`
    pub log_noise: f64,
}

impl Hyperparams {
    pub fn new(log_output_scale: f64, log_lengthscales: Vec<f64>, log_noise: f64) -> Self {
        Self {
            log_output_scale,
            log_lengthscales,
            log_noise,
        }
    }

    /// Same lengthscale in every one of `dim` dimensions.
    pub fn isotropic(dim: usize, log_output_scale: f64, log_lengthscale: f64, log_noise: f64) -> Self {
        Self::new(log_output_scale, vec![log_lengthscale; dim], log_noise)
    }

    /// Starting point for normalized data: unit scales, noise std `e⁻¹`.
    pub fn default_for_dim(dim: usize) -> Self {
        Self::isotropic(dim, 0.0, 0.0, -1.0)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    /// Number of optimizable coordinates, `d + 2`.
    pub fn n_params(&self) -> usize {
        self.dim() + 2
    }

    pub fn signal_variance(&self) -> f64 {
        (2.0 * self.log_output_scale).exp()
    }

    pub fn noise_variance(&self) -> f64 {
        (2.0 * self.log_noise).exp()
    }

    pub fn lengthscale(&self, i: usize) -> f64 {
        self.log_lengthscales[i].exp()
    }

    /// `k(x*, x*) + σ_ε²`, the predictive variance with no data.
    pub fn prior_variance(&self) -> f64 {
        self.signal_variance() + self.noise_variance()
    }

    pub fn is_finite(&self) -> bool {
        self.log_output_scale.is_finite()
            && self.log_noise.is_finite()
            && self.log_lengthscales.iter().all(|v| v.is_finite())
    }

    /// Flattens to the canonical coordinate order.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_params());
        v[0] = self.log_output_scale;
        for (i, l) in self.log_lengthscales.iter().enumerate() {
            v[i + 1] = *l;
        }
        v[self.dim() + 1] = self.log_noise;
        v
    }

    /// Inverse of [`Hyperparams::to_vector`]; `values.len()` must be at least 2.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::DimensionMismatch {
                context: "hyperparameter vector",
                expected: 2,
                actual: values.len(),
            });
        }
        let d = values.len() - 2;
        Ok(Self::new(values[0], values[1..=d].to_vec(), values[d + 1]))
    }

    pub(crate) fn check_dim(&self, context: &'static str, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.dim(),
                actual: d,
            });
        }
        Ok(())
    }
}

/// `σ_f² exp(-½ Σ (xᵢ - x'ᵢ)² / lᵢ²)`
pub fn se_kernel(x: &[f64], x_prime: &[f64], hp: &Hyperparams) -> Result<f64> {
    hp.check_dim("se_kernel x", x.len())?;
    hp.check_dim("se_kernel x'", x_prime.len())?;
    let r2: f64 = x
        .iter()
        .zip(x_prime)
        .zip(&hp.log_lengthscales)
        .map(|((a, b), log_l)| {
            let diff = (a - b) / log_l.exp();
            diff * diff
        })
        .sum();
    Ok(hp.signal_variance() * (-0.5 * r2).exp())
}

/// Sum over dimensions of scaled squared differences between the rows of `a` and `b`.
fn scaled_sq_dist(a: &DMatrix<f64>, b: &DMatrix<f64>, hp: &Hyperparams) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    let mut dist = DMatrix::zeros(n, m);
    for c in 0..a.ncols() {
        let inv_l = (-hp.log_lengthscales[c]).exp();
        let ac: Vec<f64> = a.column(c).iter().map(|v| v * inv_l).collect();
        let bc: Vec<f64> = b.column(c).iter().map(|v| v * inv_l).collect();
        for (j, bj) in bc.iter().enumerate() {
            let col = dist.column_mut(j);
            for (out, ai) in col.into_iter().zip(&ac) {
                let diff = ai - bj;
                *out += diff * diff;
            }
        }
    }
    dist
}

/// Covariance between every row of `x` and every row of `x_prime`.
pub fn kernel_matrix(x: &DMatrix<f64>, x_prime: &DMatrix<f64>, hp: &Hyperparams) -> Result<DMatrix<f64>> {
    hp.check_dim("kernel_matrix X", x.ncols())?;
    hp.check_dim("kernel_matrix X'", x_prime.ncols())?;
    let sf2 = hp.signal_variance();
    let mut k = scaled_sq_dist(x, x_prime, hp);
    k.apply(|v| *v = sf2 * (-0.5 * *v).exp());
    Ok(k)
}

/// Symmetric covariance of `x` with itself; exactly symmetric with diagonal `σ_f²`.
pub fn kernel_matrix_sym(x: &DMatrix<f64>, hp: &Hyperparams) -> Result<DMatrix<f64>> {
    hp.check_dim("kernel_matrix X", x.ncols())?;
    let n = x.nrows();
    let sf2 = hp.signal_variance();
    let mut k = scaled_sq_dist(x, x, hp);
    for j in 0..n {
        k[(j, j)] = sf2;
        for i in (j + 1)..n {
            let v = sf2 * (-0.5 * k[(i, j)]).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Derivatives of `k(X, X)` with respect to each kernel coordinate.
///
/// Returns `d + 1` matrices: `∂K/∂log σ_f = 2K` followed by
/// `∂K/∂log lᵢ = K ⊙ Dᵢ / lᵢ²`. The noise derivative is not a kernel
/// quantity and is handled by the likelihood.
pub fn kernel_matrix_grads(x: &DMatrix<f64>, hp: &Hyperparams) -> Result<Vec<DMatrix<f64>>> {
    if x.nrows() == 0 {
        return Err(Error::Contract("kernel_matrix_grads needs at least one point".into()));
    }
    let k = kernel_matrix_sym(x, hp)?;
    let n = x.nrows();
    let mut grads = Vec::with_capacity(hp.dim() + 1);
    grads.push(&k * 2.0);
    for c in 0..hp.dim() {
        let inv_l2 = (-2.0 * hp.log_lengthscales[c]).exp();
        let col = x.column(c);
        let mut g = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let diff = col[i] - col[j];
                g[(i, j)] = k[(i, j)] * diff * diff * inv_l2;
            }
        }
        grads.push(g);
    }
    Ok(grads)
}
