//! Factorized training of GP experts that share one set of hyperparameters.
//!
//! The marginal likelihood is approximated by the product of per-expert
//! likelihoods, so the objective and its gradient are sums over experts.
//! Per-expert terms are evaluated in parallel and reduced in index order,
//! which keeps every result bit-identical regardless of the thread count.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gp::{nlml, GpModel};
use crate::kernel::Hyperparams;
use crate::optimizer::{minimize, OptimResult, OptimizerConfig};
use crate::partition::Partition;

/// Copies the selected rows of `x` and entries of `y`.
pub fn select_rows(x: &DMatrix<f64>, y: &DVector<f64>, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let xs = DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)]);
    let ys = DVector::from_fn(rows.len(), |r, _| y[rows[r]]);
    (xs, ys)
}

fn check_partition(x: &DMatrix<f64>, y: &DVector<f64>, partition: &Partition) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "training targets",
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    partition.validate(x.nrows())
}

/// Per-expert data blocks, extracted once and reused across objective evaluations.
#[derive(Debug, Clone)]
pub struct FactorizedObjective {
    blocks: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl FactorizedObjective {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, partition: &Partition) -> Result<Self> {
        check_partition(x, y, partition)?;
        let blocks = partition.subsets.iter().map(|s| select_rows(x, y, s)).collect();
        Ok(Self { blocks })
    }

    pub fn n_experts(&self) -> usize {
        self.blocks.len()
    }

    /// Per-expert NLML values and gradients, in expert order.
    pub fn per_expert(&self, hp: &Hyperparams) -> Result<Vec<(f64, DVector<f64>)>> {
        self.blocks
            .par_iter()
            .enumerate()
            .map(|(i, (x, y))| nlml(x, y, hp).map_err(|e| e.in_context(format!("expert {i}"))))
            .collect()
    }

    /// Sum of per-expert NLML values and gradients.
    pub fn evaluate(&self, hp: &Hyperparams) -> Result<(f64, DVector<f64>)> {
        let parts = self.per_expert(hp)?;
        let mut value = 0.0;
        let mut grad = DVector::zeros(hp.n_params());
        for (v, g) in &parts {
            value += v;
            grad += g;
        }
        Ok((value, grad))
    }
}

/// `Σᵢ nlml(Xᵢ, yᵢ, θ)` and its gradient.
pub fn factorized_nlml(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    partition: &Partition,
    hp: &Hyperparams,
) -> Result<(f64, DVector<f64>)> {
    FactorizedObjective::new(x, y, partition)?.evaluate(hp)
}

/// Experts fitted with shared hyperparameters.
#[derive(Debug, Clone)]
pub struct ExpertEnsemble {
    pub hp: Hyperparams,
    pub partition: Partition,
    pub experts: Vec<GpModel>,
    /// Models on `D_c ∪ D_i` for every non-communication subset `i`, in subset order.
    pub augmented_experts: Option<Vec<GpModel>>,
    pub train_time_seconds: f64,
    pub optimization: Option<OptimResult>,
}

/// Expert predictions, one row per expert and one column per test point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPredictions {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

fn fit_all(blocks: Vec<(DMatrix<f64>, DVector<f64>)>, hp: &Hyperparams, label: &str) -> Result<Vec<GpModel>> {
    blocks
        .into_par_iter()
        .enumerate()
        .map(|(i, (x, y))| GpModel::fit(x, y, hp.clone()).map_err(|e| e.in_context(format!("{label} {i}"))))
        .collect()
}

fn predict_all(models: &[GpModel], xstar: &DMatrix<f64>) -> Result<ExpertPredictions> {
    let rows: Vec<(DVector<f64>, DVector<f64>)> = models
        .par_iter()
        .map(|m| m.predict(xstar))
        .collect::<Result<_>>()?;
    let n_test = xstar.nrows();
    let mut means = DMatrix::zeros(models.len(), n_test);
    let mut variances = DMatrix::zeros(models.len(), n_test);
    for (i, (mu, var)) in rows.into_iter().enumerate() {
        means.row_mut(i).copy_from(&mu.transpose());
        variances.row_mut(i).copy_from(&var.transpose());
    }
    Ok(ExpertPredictions { means, variances })
}

impl ExpertEnsemble {
    /// Fits every expert at fixed hyperparameters without optimizing.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, partition: Partition, hp: Hyperparams) -> Result<Self> {
        check_partition(x, y, &partition)?;
        hp.check_dim("training inputs", x.ncols())?;
        let start = Instant::now();
        let blocks = partition.subsets.iter().map(|s| select_rows(x, y, s)).collect();
        let experts = fit_all(blocks, &hp, "expert")?;
        Ok(Self {
            hp,
            partition,
            experts,
            augmented_experts: None,
            train_time_seconds: start.elapsed().as_secs_f64(),
            optimization: None,
        })
    }

    /// Minimizes the factorized NLML, then refits every expert at the optimum.
    pub fn train(x: &DMatrix<f64>, y: &DVector<f64>, partition: Partition, config: &OptimizerConfig) -> Result<Self> {
        let start = Instant::now();
        let objective = FactorizedObjective::new(x, y, &partition)?;
        let result = minimize(|hp| objective.evaluate(hp), x.ncols(), config)?;
        let experts = fit_all(objective.blocks, &result.best_hp, "expert")?;
        log::debug!(
            "trained {} experts in {} evaluations, nlml {:.6}",
            experts.len(),
            result.evals_used,
            result.best_value
        );
        Ok(Self {
            hp: result.best_hp.clone(),
            partition,
            experts,
            augmented_experts: None,
            train_time_seconds: start.elapsed().as_secs_f64(),
            optimization: Some(result),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn communication_index(&self) -> Result<usize> {
        self.partition
            .communication_index
            .ok_or(Error::MissingCommunicationSubset)
    }

    /// Subset indices paired with the augmented experts, in the same order.
    pub fn augmented_subset_indices(&self) -> Result<Vec<usize>> {
        let c = self.communication_index()?;
        Ok((0..self.n_experts()).filter(|i| *i != c).collect())
    }

    /// Fits the GRBCM models on `D_c ∪ D_i` (communication rows first) with the shared hyperparameters.
    pub fn prepare_grbcm(mut self) -> Result<Self> {
        self.ensure_augmented()?;
        Ok(self)
    }

    /// In-place form of [`prepare_grbcm`](Self::prepare_grbcm); does nothing if already prepared.
    pub fn ensure_augmented(&mut self) -> Result<()> {
        if self.augmented_experts.is_some() {
            return Ok(());
        }
        let c = self.communication_index()?;
        if self.n_experts() < 2 {
            return Err(Error::Contract("GRBCM needs at least two subsets".into()));
        }
        let comm = &self.experts[c];
        let blocks: Vec<(DMatrix<f64>, DVector<f64>)> = self
            .augmented_subset_indices()?
            .into_iter()
            .map(|i| {
                let other = &self.experts[i];
                let x = concat_rows(comm.inputs(), other.inputs());
                let mut y = DVector::zeros(comm.n_train() + other.n_train());
                y.rows_mut(0, comm.n_train()).copy_from(comm.targets());
                y.rows_mut(comm.n_train(), other.n_train()).copy_from(other.targets());
                (x, y)
            })
            .collect();
        self.augmented_experts = Some(fit_all(blocks, &self.hp, "augmented expert")?);
        Ok(())
    }

    /// Predictions of every expert at each row of `xstar`.
    pub fn experts_predict(&self, xstar: &DMatrix<f64>) -> Result<ExpertPredictions> {
        predict_all(&self.experts, xstar)
    }

    /// Predictions of the augmented experts, if prepared.
    pub fn augmented_predict(&self, xstar: &DMatrix<f64>) -> Result<ExpertPredictions> {
        let aug = self
            .augmented_experts
            .as_ref()
            .ok_or_else(|| Error::Contract("augmented experts not prepared; call prepare_grbcm".into()))?;
        predict_all(aug, xstar)
    }

    pub fn metadata(&self) -> EnsembleMetadata {
        EnsembleMetadata {
            hp: self.hp.clone(),
            n_experts: self.n_experts(),
            subset_sizes: self.partition.subsets.iter().map(Vec::len).collect(),
            partition_kind: self.partition.kind,
            partition_seed: self.partition.seed,
            communication_index: self.partition.communication_index,
            train_time_seconds: self.train_time_seconds,
            optimizer_evals: self.optimization.as_ref().map(|o| o.evals_used),
            final_nlml: self.optimization.as_ref().map(|o| o.best_value),
            max_jitter: self.experts.iter().map(GpModel::jitter_used).fold(0.0, f64::max),
        }
    }
}

fn concat_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

/// Serializable summary of a trained ensemble. Cholesky factors are not
/// stored; refit from the data and partition to restore the models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleMetadata {
    pub hp: Hyperparams,
    pub n_experts: usize,
    pub subset_sizes: Vec<usize>,
    pub partition_kind: crate::partition::PartitionKind,
    pub partition_seed: u64,
    pub communication_index: Option<usize>,
    pub train_time_seconds: f64,
    pub optimizer_evals: Option<usize>,
    pub final_nlml: Option<f64>,
    pub max_jitter: f64,
}
