//! Rules for combining expert predictions into one predictive distribution.
//!
//! Every rule works in precision space. With weights `βᵢ`, the generalized
//! product is
//!
//! ```text
//! σ_A⁻² = Σ βᵢ σᵢ⁻² + (1 − Σ βᵢ) σ_**⁻²     (prior term only for BCM/RBCM)
//! μ_A   = σ_A² Σ βᵢ σᵢ⁻² μᵢ
//! ```
//!
//! where `σ_**² = σ_f² + σ_ε²` is the prior variance. PoE, GPoE, BCM and
//! RBCM need only the per-expert means and variances; NPAE and GRBCM need
//! the fitted ensemble.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertEnsemble, ExpertPredictions};
use crate::gp::cholesky_with_jitter;
use crate::kernel::{kernel_matrix, Hyperparams};

/// Relative floor on BCM, RBCM and GRBCM precision, in units of the prior precision.
pub const PRECISION_FLOOR: f64 = 1e-12;

/// Test points per NPAE block; the cross-expert kernel blocks are shared within a block.
const NPAE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMethod {
    Poe,
    GpoeUniform,
    GpoeEntropy,
    Bcm,
    Rbcm,
    Npae,
    Grbcm,
}

impl AggregationMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Poe => "poe",
            Self::GpoeUniform => "gpoe-uniform",
            Self::GpoeEntropy => "gpoe-entropy",
            Self::Bcm => "bcm",
            Self::Rbcm => "rbcm",
            Self::Npae => "npae",
            Self::Grbcm => "grbcm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GpoeWeights {
    /// `β = 1/M`.
    Uniform,
    /// `β = ½(log σ_**² − log σᵢ²)`, clamped at 0.
    Entropy,
}

/// `σ_**² = σ_f² + σ_ε²`, the predictive variance with no data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorVariance(f64);

impl PriorVariance {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::Contract(format!("prior variance must be positive and finite, got {value}")));
        }
        Ok(Self(value))
    }

    pub fn from_hyperparams(hp: &Hyperparams) -> Result<Self> {
        Self::new(hp.prior_variance())
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn precision(self) -> f64 {
        1.0 / self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPrediction {
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
    pub method: AggregationMethod,
    /// Weights used, one row per expert. For GRBCM the communication row holds
    /// `1 − Σβᵢ`, the signed exponent applied to the communication expert.
    pub betas: Option<DMatrix<f64>>,
    /// Number of test points whose precision hit a floor.
    pub degeneracy_count: usize,
}

/// Entropy difference between the prior and an expert, clamped below at 0.
pub fn beta_entropy(prior_var: PriorVariance, expert_var: f64) -> f64 {
    (0.5 * (prior_var.value().ln() - expert_var.ln())).max(0.0)
}

/// Ratio `a = σ_η⁻² / (σ_η⁻² − σ_**⁻²)` by which BCM inflates the mean
/// in the large-data limit under a random partition.
pub fn bcm_inflation_limit(noise_var: f64, prior_var: PriorVariance) -> f64 {
    let noise_prec = 1.0 / noise_var;
    noise_prec / (noise_prec - prior_var.precision())
}

/// Per-point ratio `a_* = σ_PoE⁻² / σ_BCM⁻²`, so that the BCM mean is `a_*` times the PoE mean.
pub fn bcm_poe_ratio(vars: &DMatrix<f64>, prior_var: PriorVariance) -> DVector<f64> {
    let m = vars.nrows() as f64;
    DVector::from_iterator(
        vars.ncols(),
        vars.column_iter().map(|col| {
            let poe: f64 = col.iter().map(|v| 1.0 / v).sum();
            poe / (poe - (m - 1.0) * prior_var.precision())
        }),
    )
}

fn check_inputs(means: &DMatrix<f64>, vars: &DMatrix<f64>) -> Result<()> {
    if means.shape() != vars.shape() {
        return Err(Error::Contract(format!(
            "expert means are {:?} but variances are {:?}",
            means.shape(),
            vars.shape()
        )));
    }
    if means.nrows() == 0 {
        return Err(Error::Contract("at least one expert is required".into()));
    }
    if let Some(v) = vars.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Contract(format!("expert variances must be positive and finite, got {v}")));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum PriorTerm {
    None,
    /// Adds `(1 − Σβ)σ_**⁻²`.
    Corrected,
}

#[derive(Clone, Copy)]
enum Floor {
    None,
    /// `max(precision, σ_**⁻²)`
    Prior,
    /// `max(precision, 1e-12·σ_**⁻²)`
    Relative,
}

fn apply_floor(precision: f64, floor: Floor, prior: PriorVariance, count: &mut usize) -> f64 {
    let min = match floor {
        Floor::None => return precision,
        Floor::Prior => prior.precision(),
        Floor::Relative => PRECISION_FLOOR * prior.precision(),
    };
    if precision < min || !precision.is_finite() {
        *count += 1;
        min
    } else {
        precision
    }
}

fn weighted_product(
    means: &DMatrix<f64>,
    vars: &DMatrix<f64>,
    betas: &DMatrix<f64>,
    prior: PriorVariance,
    term: PriorTerm,
    floor: Floor,
) -> (DVector<f64>, DVector<f64>, usize) {
    let n = means.ncols();
    let mut out_mean = DVector::zeros(n);
    let mut out_var = DVector::zeros(n);
    let mut degenerate = 0;
    for j in 0..n {
        let mut precision = 0.0;
        let mut weighted = 0.0;
        let mut beta_sum = 0.0;
        for i in 0..means.nrows() {
            let b = betas[(i, j)];
            precision += b / vars[(i, j)];
            weighted += b * means[(i, j)] / vars[(i, j)];
            beta_sum += b;
        }
        if let PriorTerm::Corrected = term {
            precision += (1.0 - beta_sum) * prior.precision();
        }
        let precision = apply_floor(precision, floor, prior, &mut degenerate);
        out_var[j] = 1.0 / precision;
        out_mean[j] = weighted / precision;
    }
    (out_mean, out_var, degenerate)
}

fn entropy_betas(vars: &DMatrix<f64>, prior: PriorVariance) -> DMatrix<f64> {
    vars.map(|v| beta_entropy(prior, v))
}

/// Product of experts: `σ_A⁻² = Σ σᵢ⁻²`.
pub fn poe(means: &DMatrix<f64>, vars: &DMatrix<f64>) -> Result<AggregatedPrediction> {
    check_inputs(means, vars)?;
    let ones = DMatrix::from_element(means.nrows(), means.ncols(), 1.0);
    // the prior only enters through the (absent) correction term
    let unused = PriorVariance(1.0);
    let (m, v, _) = weighted_product(means, vars, &ones, unused, PriorTerm::None, Floor::None);
    Ok(AggregatedPrediction {
        means: m,
        variances: v,
        method: AggregationMethod::Poe,
        betas: None,
        degeneracy_count: 0,
    })
}

/// Generalized product of experts. Uniform weights keep the PoE mean and
/// inflate its variance `M` times; entropy weights drop to 0 for experts at
/// the prior, so the precision is floored at the prior precision.
pub fn gpoe(
    means: &DMatrix<f64>,
    vars: &DMatrix<f64>,
    prior_var: PriorVariance,
    mode: GpoeWeights,
) -> Result<AggregatedPrediction> {
    check_inputs(means, vars)?;
    let (betas, floor, method) = match mode {
        GpoeWeights::Uniform => (
            DMatrix::from_element(means.nrows(), means.ncols(), 1.0 / means.nrows() as f64),
            Floor::None,
            AggregationMethod::GpoeUniform,
        ),
        GpoeWeights::Entropy => (entropy_betas(vars, prior_var), Floor::Prior, AggregationMethod::GpoeEntropy),
    };
    let (m, v, degenerate) = weighted_product(means, vars, &betas, prior_var, PriorTerm::None, floor);
    Ok(AggregatedPrediction {
        means: m,
        variances: v,
        method,
        betas: Some(betas),
        degeneracy_count: degenerate,
    })
}

/// Bayesian committee machine: `σ_A⁻² = Σ σᵢ⁻² − (M − 1)σ_**⁻²`.
pub fn bcm(means: &DMatrix<f64>, vars: &DMatrix<f64>, prior_var: PriorVariance) -> Result<AggregatedPrediction> {
    check_inputs(means, vars)?;
    let ones = DMatrix::from_element(means.nrows(), means.ncols(), 1.0);
    let (m, v, degenerate) = weighted_product(means, vars, &ones, prior_var, PriorTerm::Corrected, Floor::Relative);
    Ok(AggregatedPrediction {
        means: m,
        variances: v,
        method: AggregationMethod::Bcm,
        betas: None,
        degeneracy_count: degenerate,
    })
}

/// Robust BCM: entropy weights with the prior correction `(1 − Σβᵢ)σ_**⁻²`.
pub fn rbcm(means: &DMatrix<f64>, vars: &DMatrix<f64>, prior_var: PriorVariance) -> Result<AggregatedPrediction> {
    check_inputs(means, vars)?;
    let betas = entropy_betas(vars, prior_var);
    let (m, v, degenerate) = weighted_product(means, vars, &betas, prior_var, PriorTerm::Corrected, Floor::Relative);
    Ok(AggregatedPrediction {
        means: m,
        variances: v,
        method: AggregationMethod::Rbcm,
        betas: Some(betas),
        degeneracy_count: degenerate,
    })
}

/// Nested pointwise aggregation of experts: treats the expert means as
/// random variables and takes the exact conditional of `y*` given all of them.
///
/// Costs `O(n'n²)`: for every test point the `M×M` covariance of the expert
/// means needs `k_{i*}ᵀK_i⁻¹K_{ij}K_j⁻¹k_{j*}` for every pair of experts.
pub fn npae(ensemble: &ExpertEnsemble, xstar: &DMatrix<f64>) -> Result<AggregatedPrediction> {
    let hp = &ensemble.hp;
    hp.check_dim("test inputs", xstar.ncols())?;
    let n_test = xstar.nrows();
    let mut means = DVector::zeros(n_test);
    let mut variances = DVector::zeros(n_test);
    let mut start = 0;
    while start < n_test {
        let len = NPAE_CHUNK.min(n_test - start);
        let chunk = xstar.rows(start, len).into_owned();
        let points = npae_chunk(ensemble, &chunk, start)?;
        for (b, (m, v)) in points.into_iter().enumerate() {
            means[start + b] = m;
            variances[start + b] = v;
        }
        start += len;
    }
    Ok(AggregatedPrediction {
        means,
        variances,
        method: AggregationMethod::Npae,
        betas: None,
        degeneracy_count: 0,
    })
}

struct ExpertBlock {
    /// `K_i⁻¹ k_{i*}`, one column per test point.
    v: DMatrix<f64>,
    mean: DVector<f64>,
    /// `k_{i*}ᵀ K_i⁻¹ k_{i*}`
    k_a: DVector<f64>,
}

fn npae_chunk(ensemble: &ExpertEnsemble, xstar: &DMatrix<f64>, offset: usize) -> Result<Vec<(f64, f64)>> {
    let hp = &ensemble.hp;
    let experts = &ensemble.experts;
    let m = experts.len();
    let len = xstar.nrows();

    let blocks: Vec<ExpertBlock> = experts
        .par_iter()
        .map(|e| {
            let kstar = e.cross_covariance(xstar)?;
            let v = e.solve(&kstar);
            let mean = kstar.tr_mul(e.weights());
            let k_a = DVector::from_iterator(len, kstar.column_iter().zip(v.column_iter()).map(|(a, b)| a.dot(&b)));
            Ok(ExpertBlock { v, mean, k_a })
        })
        .collect::<Result<_>>()?;

    // cross[i][j - i - 1][b] = k_{i*}ᵀ K_i⁻¹ K_{ij} K_j⁻¹ k_{j*} for j > i
    let cross: Vec<Vec<DVector<f64>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..m)
                .map(|j| {
                    let kij = kernel_matrix(experts[i].inputs(), experts[j].inputs(), hp)?;
                    let c = kij * &blocks[j].v;
                    Ok(DVector::from_iterator(
                        len,
                        blocks[i].v.column_iter().zip(c.column_iter()).map(|(a, b)| a.dot(&b)),
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let sf2 = hp.signal_variance();
    let noise = hp.noise_variance();
    let var_floor = noise * (1.0 - 1e-10);
    (0..len)
        .into_par_iter()
        .map(|b| {
            let mut k_big = DMatrix::zeros(m, m);
            for i in 0..m {
                k_big[(i, i)] = blocks[i].k_a[b];
                for j in (i + 1)..m {
                    let value = cross[i][j - i - 1][b];
                    k_big[(i, j)] = value;
                    k_big[(j, i)] = value;
                }
            }
            let k_a = DVector::from_fn(m, |i, _| blocks[i].k_a[b]);
            let mu = DVector::from_fn(m, |i, _| blocks[i].mean[b]);
            let (chol, _) = cholesky_with_jitter(&k_big, sf2, || format!("NPAE covariance at test point {}", offset + b))?;
            let w = chol.solve(&k_a);
            let mean = w.dot(&mu);
            let var = (sf2 - k_a.dot(&w) + noise).max(var_floor);
            Ok((mean, var))
        })
        .collect()
}

/// Combines communication and augmented-expert predictions with the GRBCM rule.
///
/// `augmented` rows follow `augmented_indices`, the subset index of each
/// augmented expert; the first one gets `β = 1`, the rest entropy weights
/// relative to the communication expert.
pub fn grbcm_combine(
    comm_means: &DVector<f64>,
    comm_vars: &DVector<f64>,
    augmented: &ExpertPredictions,
    comm_index: usize,
    augmented_indices: &[usize],
    prior_var: PriorVariance,
) -> Result<AggregatedPrediction> {
    check_inputs(&augmented.means, &augmented.variances)?;
    let n = comm_means.len();
    let k = augmented.means.nrows();
    if augmented_indices.len() != k {
        return Err(Error::DimensionMismatch {
            context: "augmented expert indices",
            expected: k,
            actual: augmented_indices.len(),
        });
    }
    if comm_vars.len() != n || augmented.means.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "communication expert predictions",
            expected: augmented.means.ncols(),
            actual: n,
        });
    }
    if let Some(v) = comm_vars.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Contract(format!("communication variance must be positive and finite, got {v}")));
    }
    let n_experts = k + 1;
    if comm_index >= n_experts || augmented_indices.iter().any(|i| *i >= n_experts || *i == comm_index) {
        return Err(Error::InvalidPartition("augmented indices must exclude the communication subset".into()));
    }

    let mut betas = DMatrix::zeros(n_experts, n);
    let mut means = DVector::zeros(n);
    let mut variances = DVector::zeros(n);
    let mut degenerate = 0;
    for j in 0..n {
        let comm_prec = 1.0 / comm_vars[j];
        let mut precision = 0.0;
        let mut weighted = 0.0;
        let mut beta_sum = 0.0;
        for (r, &idx) in augmented_indices.iter().enumerate() {
            let var = augmented.variances[(r, j)];
            let beta = if r == 0 {
                1.0
            } else {
                (0.5 * (comm_vars[j].ln() - var.ln())).max(0.0)
            };
            betas[(idx, j)] = beta;
            precision += beta / var;
            weighted += beta * augmented.means[(r, j)] / var;
            beta_sum += beta;
        }
        let correction = beta_sum - 1.0;
        if correction != 0.0 {
            precision -= correction * comm_prec;
            weighted -= correction * comm_prec * comm_means[j];
        }
        betas[(comm_index, j)] = -correction;
        let precision = apply_floor(precision, Floor::Relative, prior_var, &mut degenerate);
        variances[j] = 1.0 / precision;
        means[j] = weighted / precision;
    }
    Ok(AggregatedPrediction {
        means,
        variances,
        method: AggregationMethod::Grbcm,
        betas: Some(betas),
        degeneracy_count: degenerate,
    })
}

/// Generalized robust BCM: a product of the augmented experts `M_{+i}` with
/// the communication expert `M_c` in place of the prior. Requires
/// [`ExpertEnsemble::prepare_grbcm`].
pub fn grbcm(ensemble: &ExpertEnsemble, xstar: &DMatrix<f64>) -> Result<AggregatedPrediction> {
    let c = ensemble.communication_index()?;
    if ensemble.n_experts() < 2 {
        return Err(Error::Contract("GRBCM needs at least two subsets".into()));
    }
    let (comm_means, comm_vars) = ensemble.experts[c].predict(xstar)?;
    let augmented = ensemble.augmented_predict(xstar)?;
    grbcm_combine(
        &comm_means,
        &comm_vars,
        &augmented,
        c,
        &ensemble.augmented_subset_indices()?,
        PriorVariance::from_hyperparams(&ensemble.hp)?,
    )
}

/// Runs one aggregation rule on a fitted ensemble. `predictions` may carry
/// precomputed expert predictions for the rules that only need those.
pub fn aggregate(
    method: AggregationMethod,
    ensemble: &ExpertEnsemble,
    xstar: &DMatrix<f64>,
    predictions: Option<&ExpertPredictions>,
) -> Result<AggregatedPrediction> {
    let prior = PriorVariance::from_hyperparams(&ensemble.hp)?;
    let owned;
    let p = match method {
        AggregationMethod::Npae => return npae(ensemble, xstar),
        AggregationMethod::Grbcm => return grbcm(ensemble, xstar),
        _ => match predictions {
            Some(p) => p,
            None => {
                owned = ensemble.experts_predict(xstar)?;
                &owned
            }
        },
    };
    match method {
        AggregationMethod::Poe => poe(&p.means, &p.variances),
        AggregationMethod::GpoeUniform => gpoe(&p.means, &p.variances, prior, GpoeWeights::Uniform),
        AggregationMethod::GpoeEntropy => gpoe(&p.means, &p.variances, prior, GpoeWeights::Entropy),
        AggregationMethod::Bcm => bcm(&p.means, &p.variances, prior),
        AggregationMethod::Rbcm => rbcm(&p.means, &p.variances, prior),
        AggregationMethod::Npae | AggregationMethod::Grbcm => unreachable!("handled above"),
    }
}
