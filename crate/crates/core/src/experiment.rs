//! End-to-end experiments: load data, partition, train once, aggregate with
//! each requested method, score and time, and write machine-readable results.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, bcm_inflation_limit, AggregatedPrediction, AggregationMethod, GpoeWeights, PriorVariance};
use crate::data::{denormalize_predictions, load_csv, toy_generate, CsvSplit, Dataset};
use crate::error::{Error, Result};
use crate::experts::ExpertEnsemble;
use crate::gp::GpModel;
use crate::metrics::{msll, population_variance, smse};
use crate::optimizer::OptimizerConfig;
use crate::partition::{disjoint_partition_with, grbcm_partition_with, random_partition, KMeansOptions, Partition};

/// Version of the JSON results layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// The 1-D toy problem; `n_test` defaults to `n / 10`.
    Toy { n: usize, n_test: Option<usize> },
    Csv {
        path: PathBuf,
        /// Zero-based; `None` is the last column.
        target_column: Option<usize>,
        split: CsvSplit,
    },
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Toy { n, n_test } => toy_generate(*n, n_test.unwrap_or((*n / 10).max(2)), seed),
            DatasetSpec::Csv {
                path,
                target_column,
                split,
            } => load_csv(path, *target_column, split, seed),
        }
    }
}

/// Number of experts, given directly or through the subset size `m₀ = n/M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertCount {
    Experts(usize),
    SubsetSize(usize),
}

impl ExpertCount {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            ExpertCount::Experts(m) => m,
            ExpertCount::SubsetSize(m0) => ((n as f64 / m0 as f64).round() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionChoice {
    /// Uniform random assignment; subset 0 doubles as the communication subset.
    Random,
    /// k-means clusters. When GRBCM or the communication expert is requested
    /// this becomes the hybrid scheme for every method, so all methods share
    /// one partition.
    Disjoint,
    /// Random communication subset plus `M − 1` k-means clusters.
    Grbcm,
}

impl FromStr for PartitionChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "disjoint" => Ok(Self::Disjoint),
            "grbcm" => Ok(Self::Grbcm),
            other => Err(Error::InvalidConfig {
                field: "partition",
                message: format!("unknown partition '{other}' (expected random, disjoint or grbcm)"),
            }),
        }
    }
}

/// A method to evaluate: an aggregation rule or a reference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Poe,
    /// Generalized PoE; the weighting comes from [`ExperimentConfig::gpoe_weights`].
    Gpoe,
    Bcm,
    Rbcm,
    Npae,
    Grbcm,
    /// One GP on all training data with the shared hyperparameters.
    FullGp,
    /// The communication expert alone.
    Communication,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Poe,
        Method::Gpoe,
        Method::Bcm,
        Method::Rbcm,
        Method::Npae,
        Method::Grbcm,
        Method::FullGp,
        Method::Communication,
    ];

    fn needs_communication(self) -> bool {
        matches!(self, Method::Grbcm | Method::Communication)
    }

    /// Label written to result files.
    pub fn label(self, gpoe: GpoeWeights) -> &'static str {
        match self.aggregation(gpoe) {
            Some(a) => a.name(),
            None if self == Method::FullGp => "full-gp",
            None => "communication",
        }
    }

    pub fn aggregation(self, gpoe: GpoeWeights) -> Option<AggregationMethod> {
        Some(match self {
            Method::Poe => AggregationMethod::Poe,
            Method::Gpoe => match gpoe {
                GpoeWeights::Uniform => AggregationMethod::GpoeUniform,
                GpoeWeights::Entropy => AggregationMethod::GpoeEntropy,
            },
            Method::Bcm => AggregationMethod::Bcm,
            Method::Rbcm => AggregationMethod::Rbcm,
            Method::Npae => AggregationMethod::Npae,
            Method::Grbcm => AggregationMethod::Grbcm,
            Method::FullGp | Method::Communication => return None,
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "poe" => Method::Poe,
            "gpoe" => Method::Gpoe,
            "bcm" => Method::Bcm,
            "rbcm" => Method::Rbcm,
            "npae" => Method::Npae,
            "grbcm" => Method::Grbcm,
            "full" | "full-gp" => Method::FullGp,
            "comm" | "communication" => Method::Communication,
            other => {
                return Err(Error::InvalidConfig {
                    field: "methods",
                    message: format!("unknown method '{other}'"),
                })
            }
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Poe => "poe",
            Method::Gpoe => "gpoe",
            Method::Bcm => "bcm",
            Method::Rbcm => "rbcm",
            Method::Npae => "npae",
            Method::Grbcm => "grbcm",
            Method::FullGp => "full",
            Method::Communication => "comm",
        };
        f.write_str(s)
    }
}

/// Parses a comma-separated method list such as `poe,gpoe,grbcm`.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::InvalidConfig {
            field: "methods",
            message: "at least one method is required".into(),
        });
    }
    Ok(methods)
}

/// Scale on which SMSE and MSLL are computed. Both metrics are invariant to
/// the affine target normalization, so the two agree up to round-off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricScale {
    #[default]
    Original,
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionChoice,
    pub experts: ExpertCount,
    pub methods: Vec<Method>,
    pub gpoe_weights: GpoeWeights,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub repetitions: usize,
    /// Balance k-means clusters to near-equal sizes.
    pub rebalance: bool,
    pub metric_scale: MetricScale,
    /// Directory for `results.csv`, `results.json` and `partition.json`.
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Toy problem with `n` training points, `m₀ = 250` and every aggregation method except NPAE.
    pub fn toy(n: usize) -> Self {
        Self {
            dataset: DatasetSpec::Toy { n, n_test: None },
            partition: PartitionChoice::Disjoint,
            experts: ExpertCount::SubsetSize(250),
            methods: vec![Method::Poe, Method::Gpoe, Method::Bcm, Method::Rbcm, Method::Grbcm],
            gpoe_weights: GpoeWeights::Uniform,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            repetitions: 1,
            rebalance: true,
            metric_scale: MetricScale::Original,
            output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &'static str, message: &str| {
            Err(Error::InvalidConfig {
                field,
                message: message.into(),
            })
        };
        if self.repetitions < 1 {
            return invalid("repetitions", "must be at least 1");
        }
        if self.methods.is_empty() {
            return invalid("methods", "at least one method is required");
        }
        match self.experts {
            ExpertCount::Experts(0) => return invalid("experts", "must be at least 1"),
            ExpertCount::SubsetSize(0) => return invalid("subset_size", "must be at least 1"),
            _ => {}
        }
        if let DatasetSpec::Toy { n, n_test } = &self.dataset {
            if *n < 2 {
                return invalid("dataset", "toy data needs at least two training points");
            }
            if n_test.is_some_and(|t| t < 2) {
                return invalid("dataset", "toy data needs at least two test points");
            }
        }
        self.optimizer.validate()
    }

    fn needs_communication(&self) -> bool {
        self.partition == PartitionChoice::Grbcm || self.methods.iter().any(|m| m.needs_communication())
    }
}

/// Builds the partition for one repetition.
pub fn make_partition(config: &ExperimentConfig, x: &DMatrix<f64>, n_experts: usize, seed: u64) -> Result<Partition> {
    let opts = KMeansOptions {
        rebalance: config.rebalance,
        ..KMeansOptions::default()
    };
    let hybrid = |opts: &KMeansOptions| {
        if n_experts < 2 {
            return Err(Error::InvalidConfig {
                field: "experts",
                message: "GRBCM and the communication expert need at least two subsets".into(),
            });
        }
        grbcm_partition_with(x, n_experts, seed, opts)
    };
    match config.partition {
        PartitionChoice::Random => {
            let p = random_partition(x.nrows(), n_experts, seed)?;
            if config.needs_communication() {
                p.with_communication(0)
            } else {
                Ok(p)
            }
        }
        PartitionChoice::Disjoint if config.needs_communication() => hybrid(&opts),
        PartitionChoice::Disjoint => disjoint_partition_with(x, n_experts, seed, &opts),
        PartitionChoice::Grbcm => hybrid(&opts),
    }
}

/// One (method, repetition) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub rep: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_experts: usize,
    pub smse: Option<f64>,
    pub msll: Option<f64>,
    /// Shared training time; identical for every method of one repetition.
    pub train_time_seconds: f64,
    pub predict_time_seconds: f64,
    /// Test points whose aggregated precision hit a floor.
    pub degeneracy_count: usize,
    pub beta_mean: Option<f64>,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    /// Median predictive variance in normalized target units.
    pub median_variance: Option<f64>,
    /// Median over test points inside the bounding box of the training inputs.
    pub median_interior_variance: Option<f64>,
    /// Least-squares slope (through the origin, normalized units) of the
    /// predicted mean against the noiseless response at interior points.
    pub mean_inflation: Option<f64>,
    /// Trained `σ_ε²`, normalized units.
    pub noise_variance: f64,
    /// Trained `σ_f² + σ_ε²`, normalized units.
    pub prior_variance: f64,
    /// Generating noise variance in normalized units, when known.
    pub true_noise_variance: Option<f64>,
    pub optimizer_evals: Option<usize>,
    pub final_nlml: Option<f64>,
    pub error: Option<String>,
}

/// Results of [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    /// Partition used in each repetition.
    pub partitions: Vec<Partition>,
}

fn median(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Test points lying inside the coordinate-wise range of the training inputs.
pub fn interior_mask(ds: &Dataset) -> Vec<bool> {
    let lo: Vec<f64> = ds.x_train.column_iter().map(|c| c.min()).collect();
    let hi: Vec<f64> = ds.x_train.column_iter().map(|c| c.max()).collect();
    ds.x_test
        .row_iter()
        .map(|r| r.iter().enumerate().all(|(c, v)| *v >= lo[c] && *v <= hi[c]))
        .collect()
}

struct Prediction {
    means: DVector<f64>,
    variances: DVector<f64>,
    betas: Option<DMatrix<f64>>,
    /// Row excluded from the beta summary (the signed GRBCM communication exponent).
    skip_beta_row: Option<usize>,
    degeneracy: usize,
}

impl From<AggregatedPrediction> for Prediction {
    fn from(a: AggregatedPrediction) -> Self {
        Self {
            means: a.means,
            variances: a.variances,
            betas: a.betas,
            skip_beta_row: None,
            degeneracy: a.degeneracy_count,
        }
    }
}

fn predict_method(method: Method, config: &ExperimentConfig, ens: &mut ExpertEnsemble, ds: &Dataset) -> Result<Prediction> {
    let plain = |means, variances| Prediction {
        means,
        variances,
        betas: None,
        skip_beta_row: None,
        degeneracy: 0,
    };
    match method {
        Method::FullGp => {
            let gp = GpModel::fit(ds.x_train.clone(), ds.y_train.clone(), ens.hp.clone())?;
            let (means, variances) = gp.predict(&ds.x_test)?;
            Ok(plain(means, variances))
        }
        Method::Communication => {
            let c = ens.communication_index()?;
            let (means, variances) = ens.experts[c].predict(&ds.x_test)?;
            Ok(plain(means, variances))
        }
        Method::Grbcm => {
            // the augmented experts are method-specific work, so they are timed as prediction
            ens.ensure_augmented()?;
            let mut p = Prediction::from(aggregate(AggregationMethod::Grbcm, ens, &ds.x_test, None)?);
            p.skip_beta_row = Some(ens.communication_index()?);
            Ok(p)
        }
        m => {
            let agg = m.aggregation(config.gpoe_weights).expect("aggregation method");
            Ok(aggregate(agg, ens, &ds.x_test, None)?.into())
        }
    }
}

fn beta_summary(betas: &DMatrix<f64>, skip: Option<usize>) -> (Option<f64>, Option<f64>, Option<f64>) {
    let values: Vec<f64> = betas
        .row_iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .flat_map(|(_, r)| r.iter().copied().collect::<Vec<_>>())
        .collect();
    if values.is_empty() {
        return (None, None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (Some(mean), Some(min), Some(max))
}

fn score(
    record: &mut RunRecord,
    pred: &Prediction,
    ds: &Dataset,
    interior: &[bool],
    scale: MetricScale,
) -> Result<()> {
    let target = ds.norm_stats.target;
    let (means, vars, y_test, train_mean, train_var) = match scale {
        MetricScale::Normalized => (
            pred.means.clone(),
            pred.variances.clone(),
            ds.y_test.clone(),
            ds.y_train.mean(),
            population_variance(ds.y_train.as_slice()),
        ),
        MetricScale::Original => {
            let (m, v) = denormalize_predictions(&pred.means, &pred.variances, &target);
            let y = ds.y_test.map(|v| target.denormalize(v));
            let ytr: Vec<f64> = ds.y_train.iter().map(|v| target.denormalize(*v)).collect();
            let mean = ytr.iter().sum::<f64>() / ytr.len() as f64;
            (m, v, y, mean, population_variance(&ytr))
        }
    };
    record.smse = Some(smse(means.as_slice(), y_test.as_slice())?);
    record.msll = Some(msll(means.as_slice(), vars.as_slice(), y_test.as_slice(), train_mean, train_var)?);
    record.median_variance = median(pred.variances.iter().copied());
    record.median_interior_variance = median(
        pred.variances
            .iter()
            .zip(interior)
            .filter(|(_, inside)| **inside)
            .map(|(v, _)| *v),
    );
    if let Some(f) = &ds.test_noiseless {
        let (mut num, mut den) = (0.0, 0.0);
        for j in (0..f.len()).filter(|j| interior[*j]) {
            num += pred.means[j] * f[j];
            den += f[j] * f[j];
        }
        record.mean_inflation = (den > 0.0).then(|| num / den);
    }
    if let Some(b) = &pred.betas {
        (record.beta_mean, record.beta_min, record.beta_max) = beta_summary(b, pred.skip_beta_row);
    }
    record.degeneracy_count = pred.degeneracy;
    Ok(())
}

/// Runs every repetition of `config` and writes the results when an output directory is set.
///
/// Training happens once per repetition and is shared by all methods; each
/// method's prediction is timed separately. A numerical failure in one
/// method is recorded in its row and the remaining methods still run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut records = Vec::new();
    let mut partitions = Vec::new();
    for rep in 0..config.repetitions {
        let seed = config.seed.wrapping_add(rep as u64);
        let ds = config.dataset.load(seed)?;
        let n_experts = config.experts.resolve(ds.n_train());
        if n_experts > ds.n_train() {
            return Err(Error::InvalidConfig {
                field: "experts",
                message: format!("{n_experts} experts for {} training points", ds.n_train()),
            });
        }
        let partition = make_partition(config, &ds.x_train, n_experts, seed)?;
        partitions.push(partition.clone());

        let mut optimizer = config.optimizer.clone();
        optimizer.seed = seed;
        let start = Instant::now();
        let ensemble = ExpertEnsemble::train(&ds.x_train, &ds.y_train, partition, &optimizer)?;
        let train_time = start.elapsed().as_secs_f64();
        log::info!(
            "rep {rep}: trained {} experts on {} points in {:.2}s",
            n_experts,
            ds.n_train(),
            train_time
        );

        let hp = ensemble.hp.clone();
        let prior = PriorVariance::from_hyperparams(&hp)?;
        let true_noise = ds
            .test_noiseless
            .as_ref()
            .map(|_| ds.normalized_variance(crate::data::TOY_NOISE_STD * crate::data::TOY_NOISE_STD));
        let interior = interior_mask(&ds);
        let opt = ensemble.optimization.clone();
        let mut ensemble = ensemble;

        for &method in &config.methods {
            let mut record = RunRecord {
                method: method.label(config.gpoe_weights).to_string(),
                rep,
                seed,
                n_train: ds.n_train(),
                n_test: ds.n_test(),
                n_experts,
                smse: None,
                msll: None,
                train_time_seconds: train_time,
                predict_time_seconds: 0.0,
                degeneracy_count: 0,
                beta_mean: None,
                beta_min: None,
                beta_max: None,
                median_variance: None,
                median_interior_variance: None,
                mean_inflation: None,
                noise_variance: hp.noise_variance(),
                prior_variance: prior.value(),
                true_noise_variance: true_noise,
                optimizer_evals: opt.as_ref().map(|o| o.evals_used),
                final_nlml: opt.as_ref().map(|o| o.best_value),
                error: None,
            };
            let start = Instant::now();
            let outcome = predict_method(method, config, &mut ensemble, &ds);
            record.predict_time_seconds = start.elapsed().as_secs_f64();
            let outcome = outcome.and_then(|p| score(&mut record, &p, &ds, &interior, config.metric_scale));
            if let Err(e) = outcome {
                log::warn!("{} failed in rep {rep}: {e}", record.method);
                record.error = Some(e.to_string());
            }
            records.push(record);
        }
    }
    let output = ExperimentOutput { records, partitions };
    if let Some(dir) = &config.output {
        write_outputs(dir, config, &output)?;
    }
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartitionFile {
    schema_version: u32,
    partitions: Vec<Partition>,
}

/// Writes `results.csv`, `results.json` and `partition.json` into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, output: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records_csv(&dir.join("results.csv"), &output.records)?;
    let results = ResultsFile {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        records: output.records.clone(),
    };
    write_json(&dir.join("results.json"), &results)?;
    let partitions = PartitionFile {
        schema_version: SCHEMA_VERSION,
        partitions: output.partitions.clone(),
    };
    write_json(&dir.join("partition.json"), &partitions)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_records_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_results_json(path: &Path) -> Result<ResultsFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-method averages at one training-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub smse: Option<f64>,
    pub msll: Option<f64>,
    pub median_variance: Option<f64>,
    pub median_interior_variance: Option<f64>,
    pub mean_inflation: Option<f64>,
    pub predict_time_seconds: f64,
    pub degeneracy_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub n_experts: usize,
    pub train_time_seconds: f64,
    /// Mean trained noise variance over repetitions, normalized units.
    pub noise_variance: f64,
    pub prior_variance: f64,
    pub true_noise_variance: Option<f64>,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub n_list: Vec<usize>,
    pub points: Vec<SweepPoint>,
    pub checks: Vec<TrendCheck>,
}

impl SweepReport {
    /// Values of one summary field for `method` across the sweep, if present at every size.
    pub fn series(&self, method: &str, field: impl Fn(&MethodSummary) -> Option<f64>) -> Option<Vec<f64>> {
        self.points
            .iter()
            .map(|p| p.methods.iter().find(|m| m.method == method).and_then(&field))
            .collect()
    }

    pub fn check(&self, name: &str) -> Option<&TrendCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(records: &[RunRecord]) -> Vec<MethodSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.method.as_str()) {
            names.push(&r.method);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.method == name).collect();
            let pick = |f: fn(&RunRecord) -> Option<f64>| mean_of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                method: name.to_string(),
                smse: pick(|r| r.smse),
                msll: pick(|r| r.msll),
                median_variance: pick(|r| r.median_variance),
                median_interior_variance: pick(|r| r.median_interior_variance),
                mean_inflation: pick(|r| r.mean_inflation),
                predict_time_seconds: rs.iter().map(|r| r.predict_time_seconds).sum::<f64>() / rs.len() as f64,
                degeneracy_count: rs.iter().map(|r| r.degeneracy_count).sum(),
            }
        })
        .collect()
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn fmt_series(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.5}")).collect();
    format!("[{}]", parts.join(", "))
}

fn trend_checks(report: &SweepReport) -> Vec<TrendCheck> {
    let mut checks = Vec::new();
    let mut push = |name: String, passed: bool, detail: String| checks.push(TrendCheck { name, passed, detail });
    let msll = |m: &MethodSummary| m.msll;
    let smse_f = |m: &MethodSummary| m.smse;
    let var = |m: &MethodSummary| m.median_interior_variance;

    if let Some(v) = report.series("grbcm", smse_f) {
        push("grbcm-smse-decreasing".into(), strictly_decreasing(&v), fmt_series(&v));
    }
    if let Some(v) = report.series("grbcm", msll) {
        push("grbcm-msll-decreasing".into(), strictly_decreasing(&v), fmt_series(&v));
    }
    if let Some(v) = report.series("poe", msll) {
        push("poe-msll-non-decreasing".into(), non_decreasing(&v), fmt_series(&v));
    }
    for m in ["poe", "bcm", "rbcm"] {
        if let Some(v) = report.series(m, var) {
            push(format!("{m}-interior-variance-decreasing"), strictly_decreasing(&v), fmt_series(&v));
        }
    }
    let noise: Option<Vec<f64>> = report.points.iter().map(|p| p.true_noise_variance).collect();
    if let (Some(v), Some(noise)) = (report.series("gpoe-uniform", var), noise.as_ref()) {
        let ok = v.iter().zip(noise).all(|(a, b)| a >= b);
        push(
            "gpoe-variance-above-noise".into(),
            ok,
            format!("{} vs noise {}", fmt_series(&v), fmt_series(noise)),
        );
    }
    if let Some(v) = report.series("gpoe-uniform", msll) {
        push("gpoe-msll-decreasing".into(), strictly_decreasing(&v), fmt_series(&v));
    }
    if let (Some(g), Some(p)) = (report.series("grbcm", msll), report.series("gpoe-uniform", msll)) {
        let ok = g.iter().zip(&p).all(|(a, b)| a < b);
        push(
            "grbcm-msll-below-gpoe".into(),
            ok,
            format!("grbcm {} gpoe {}", fmt_series(&g), fmt_series(&p)),
        );
    }
    checks
}

/// Runs [`run_experiment`] at each training-set size with the subset size
/// held fixed (the number of experts grows with `n`).
///
/// For toy data the test-set size follows `n / 10`; for CSV data `n` is
/// ignored and only one point is produced per entry.
pub fn consistency_sweep(base: &ExperimentConfig, n_list: &[usize]) -> Result<SweepReport> {
    if n_list.is_empty() || !strictly_decreasing(&n_list.iter().rev().map(|n| *n as f64).collect::<Vec<_>>()) {
        return Err(Error::InvalidConfig {
            field: "n_list",
            message: "must be nonempty and strictly increasing".into(),
        });
    }
    let mut points = Vec::new();
    for &n in n_list {
        let mut config = base.clone();
        if let DatasetSpec::Toy { n: size, n_test } = &mut config.dataset {
            *size = n;
            *n_test = None;
        }
        config.output = base.output.as_ref().map(|d| d.join(format!("n{n}")));
        let out = run_experiment(&config)?;
        let first = out.records.first().ok_or_else(|| Error::Contract("no records produced".into()))?;
        let reps = config.repetitions as f64;
        let per_rep = |f: fn(&RunRecord) -> f64| {
            out.records
                .iter()
                .filter(|r| r.method == first.method)
                .map(f)
                .sum::<f64>()
                / reps
        };
        points.push(SweepPoint {
            n,
            n_experts: first.n_experts,
            train_time_seconds: per_rep(|r| r.train_time_seconds),
            noise_variance: per_rep(|r| r.noise_variance),
            prior_variance: per_rep(|r| r.prior_variance),
            true_noise_variance: mean_of(
                &out.records
                    .iter()
                    .filter(|r| r.method == first.method)
                    .map(|r| r.true_noise_variance)
                    .collect::<Vec<_>>(),
            ),
            methods: summarize(&out.records),
            records: out.records,
        });
    }
    let mut report = SweepReport {
        schema_version: SCHEMA_VERSION,
        n_list: n_list.to_vec(),
        points,
        checks: Vec::new(),
    };
    report.checks = trend_checks(&report);
    if let Some(dir) = &base.output {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("sweep.json"), &report)?;
    }
    Ok(report)
}

/// BCM mean-inflation limit `a` for a record, from its trained hyperparameters.
pub fn record_inflation_limit(record: &RunRecord) -> Result<f64> {
    Ok(bcm_inflation_limit(record.noise_variance, PriorVariance::new(record.prior_variance)?))
}

/// Named configurations for the published experiments, scaled to a desk machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Toy consistency study: all aggregations except NPAE, `m₀ = 250`.
    ToyConsistency,
    /// GRBCM against its communication expert alone on the toy problem.
    ToyCommunication,
    /// GRBCM and NPAE on kin40k with 16 experts from the hybrid disjoint partition.
    Kin40k,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-consistency" => Ok(Preset::ToyConsistency),
            "toy-communication" => Ok(Preset::ToyCommunication),
            "kin40k" => Ok(Preset::Kin40k),
            other => Err(Error::InvalidConfig {
                field: "preset",
                message: format!("unknown preset '{other}' (expected toy-consistency, toy-communication or kin40k)"),
            }),
        }
    }
}

impl Preset {
    /// Base configuration and the training sizes to sweep (empty for a single run).
    pub fn config(self, csv: Option<&Path>) -> Result<(ExperimentConfig, Vec<usize>)> {
        let sizes = vec![1000, 4000, 16000];
        Ok(match self {
            Preset::ToyConsistency => (ExperimentConfig::toy(1000), sizes),
            Preset::ToyCommunication => {
                let mut c = ExperimentConfig::toy(1000);
                c.methods = vec![Method::Communication, Method::Grbcm];
                (c, sizes)
            }
            Preset::Kin40k => {
                let path = csv.ok_or(Error::InvalidConfig {
                    field: "csv",
                    message: "the kin40k preset needs --csv".into(),
                })?;
                let c = ExperimentConfig {
                    dataset: DatasetSpec::Csv {
                        path: path.to_path_buf(),
                        target_column: None,
                        split: first_rows_split(path, 10_000)?,
                    },
                    experts: ExpertCount::Experts(16),
                    methods: vec![Method::Grbcm, Method::Npae],
                    ..ExperimentConfig::toy(0)
                };
                (c, Vec::new())
            }
        })
    }
}

/// Split whose first `n_train` data rows train and the rest test.
pub fn first_rows_split(path: &Path, n_train: usize) -> Result<CsvSplit> {
    let (_, rows) = crate::data::read_numeric_csv(path)?;
    if rows.len() <= n_train {
        return Err(Error::InvalidConfig {
            field: "csv",
            message: format!("{} has {} rows; need more than {n_train}", path.display(), rows.len()),
        });
    }
    Ok(CsvSplit::Indices {
        train: (0..n_train).collect(),
        test: (n_train..rows.len()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(n: usize, methods: Vec<Method>, experts: ExpertCount) -> ExperimentConfig {
        ExperimentConfig {
            experts,
            methods,
            optimizer: OptimizerConfig {
                max_evals: 40,
                ..Default::default()
            },
            ..ExperimentConfig::toy(n)
        }
    }

    #[test]
    fn record_shape_and_shared_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(1000, vec![Method::Poe, Method::Grbcm], ExpertCount::Experts(4));
        cfg.repetitions = 2;
        cfg.output = Some(dir.path().to_path_buf());
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.partitions.len(), 2);
        for rep in 0..2 {
            let rs: Vec<&RunRecord> = out.records.iter().filter(|r| r.rep == rep).collect();
            assert_eq!(rs[0].train_time_seconds, rs[1].train_time_seconds);
            assert_eq!(rs[0].seed, rep as u64);
        }
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(read_records_csv(&dir.path().join("results.csv")).unwrap(), out.records);
        let json = read_results_json(&dir.path().join("results.json")).unwrap();
        assert_eq!(json.schema_version, SCHEMA_VERSION);
        assert_eq!(json.records, out.records);
        assert_eq!(json.config, cfg);
        assert!(dir.path().join("partition.json").exists());
        assert!(out.records.iter().all(|r| r.error.is_none() && r.predict_time_seconds >= 0.0));
        let g = out.records.iter().find(|r| r.method == "grbcm").unwrap();
        assert_eq!(g.degeneracy_count, 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small(400, vec![Method::Bcm, Method::Gpoe], ExpertCount::Experts(3));
        let strip = |mut rs: Vec<RunRecord>| {
            for r in &mut rs {
                r.train_time_seconds = 0.0;
                r.predict_time_seconds = 0.0;
            }
            rs
        };
        let a = strip(run_experiment(&cfg).unwrap().records);
        let b = strip(run_experiment(&cfg).unwrap().records);
        assert_eq!(a, b);
    }

    #[test]
    fn single_expert_npae_matches_full_gp() {
        let cfg = small(400, vec![Method::Npae, Method::FullGp, Method::Bcm, Method::Poe], ExpertCount::Experts(1));
        let out = run_experiment(&cfg).unwrap();
        let full = out.records.iter().find(|r| r.method == "full-gp").unwrap();
        for r in &out.records {
            assert_relative_eq!(r.smse.unwrap(), full.smse.unwrap(), max_relative = 1e-8);
            assert_relative_eq!(r.msll.unwrap(), full.msll.unwrap(), max_relative = 1e-8);
        }
    }

    #[test]
    fn two_subset_grbcm_matches_full_gp() {
        let cfg = small(400, vec![Method::Grbcm, Method::FullGp], ExpertCount::Experts(2));
        let out = run_experiment(&cfg).unwrap();
        let (g, f) = (&out.records[0], &out.records[1]);
        assert_relative_eq!(g.smse.unwrap(), f.smse.unwrap(), max_relative = 1e-10);
        assert_relative_eq!(g.msll.unwrap(), f.msll.unwrap(), max_relative = 1e-10);
    }

    #[test]
    fn metric_scales_agree() {
        let mut cfg = small(300, vec![Method::Rbcm], ExpertCount::Experts(3));
        let a = run_experiment(&cfg).unwrap().records;
        cfg.metric_scale = MetricScale::Normalized;
        let b = run_experiment(&cfg).unwrap().records;
        assert_relative_eq!(a[0].smse.unwrap(), b[0].smse.unwrap(), max_relative = 1e-10);
        assert_relative_eq!(a[0].msll.unwrap(), b[0].msll.unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn failures_are_recorded_per_method() {
        // a random partition with one subset has a communication subset but
        // GRBCM needs two; the failure is recorded and PoE still runs
        let mut cfg = small(200, vec![Method::Grbcm, Method::Poe], ExpertCount::Experts(1));
        cfg.partition = PartitionChoice::Random;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.records[0].error.as_deref().unwrap().contains("two subsets"));
        assert!(out.records[0].smse.is_none());
        assert!(out.records[1].error.is_none() && out.records[1].smse.is_some());

        // the hybrid partition itself cannot be built with one subset
        cfg.partition = PartitionChoice::Disjoint;
        assert!(matches!(run_experiment(&cfg), Err(Error::InvalidConfig { field: "experts", .. })));
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = ExperimentConfig::toy(100);
        cfg.repetitions = 0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field: "repetitions", .. })));
        let mut cfg = ExperimentConfig::toy(100);
        cfg.experts = ExpertCount::SubsetSize(0);
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field: "subset_size", .. })));
        assert!(matches!(parse_methods("poe,foo"), Err(Error::InvalidConfig { field: "methods", .. })));
        assert_eq!(parse_methods("poe, GPOE,full").unwrap(), vec![Method::Poe, Method::Gpoe, Method::FullGp]);
        assert!("kmeans".parse::<PartitionChoice>().is_err());
    }

    #[test]
    fn partition_choice_mapping() {
        let ds = toy_generate(200, 20, 0).unwrap();
        let mut cfg = ExperimentConfig::toy(200);
        cfg.methods = vec![Method::Poe];
        let p = make_partition(&cfg, &ds.x_train, 4, 0).unwrap();
        assert_eq!(p.kind, crate::partition::PartitionKind::Disjoint);
        cfg.methods.push(Method::Grbcm);
        let p = make_partition(&cfg, &ds.x_train, 4, 0).unwrap();
        assert_eq!(p.kind, crate::partition::PartitionKind::GrbcmHybrid);
        cfg.partition = PartitionChoice::Random;
        let p = make_partition(&cfg, &ds.x_train, 4, 0).unwrap();
        assert_eq!(p.communication_index, Some(0));
        assert_eq!(ExpertCount::SubsetSize(250).resolve(16000), 64);
    }

    #[test]
    fn sweep_reports_trends() {
        let mut cfg = small(1000, vec![Method::Poe, Method::Gpoe, Method::Grbcm], ExpertCount::SubsetSize(100));
        cfg.optimizer.max_evals = 25;
        let report = consistency_sweep(&cfg, &[300, 600]).unwrap();
        assert_eq!(report.points.len(), 2);
        assert_eq!(report.points[0].n_experts, 3);
        assert_eq!(report.points[1].n_experts, 6);
        assert!(report.check("grbcm-msll-decreasing").is_some());
        assert!(report.check("gpoe-variance-above-noise").is_some());
        assert!(consistency_sweep(&cfg, &[600, 300]).is_err());
    }

    #[test]
    fn median_and_interior() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), Some(2.0));
        assert_eq!(median([4.0, 1.0].into_iter()), Some(2.5));
        assert_eq!(median(std::iter::empty()), None);
        let ds = toy_generate(100, 200, 1).unwrap();
        let mask = interior_mask(&ds);
        let raw = ds.raw_test_inputs();
        for (j, inside) in mask.iter().enumerate() {
            if *inside {
                assert!((-1e-9..=1.0 + 1e-9).contains(&raw[(j, 0)]));
            }
        }
        assert!(mask.iter().any(|m| !m) && mask.iter().any(|m| *m));
    }
}
