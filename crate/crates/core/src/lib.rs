//! Gaussian process expert committees.
//!
//! Trains `M` GP experts on subsets of the data with shared hyperparameters
//! (a factorized marginal likelihood) and combines their predictions with
//! one of several aggregation rules: PoE, generalized PoE, BCM, robust BCM,
//! NPAE and the generalized robust BCM (GRBCM), which corrects the
//! aggregated precision with a global communication expert instead of the
//! prior.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod experts;
pub mod gp;
pub mod kernel;
pub mod metrics;
pub mod optimizer;
pub mod partition;

pub use aggregation::{aggregate, AggregatedPrediction, AggregationMethod, GpoeWeights, PriorVariance};
pub use error::{Error, Result};
pub use experiment::{consistency_sweep, run_experiment, ExperimentConfig, Method, RunRecord};
pub use experts::{factorized_nlml, ExpertEnsemble, ExpertPredictions};
pub use gp::{nlml, GpModel};
pub use kernel::{kernel_matrix, kernel_matrix_grads, se_kernel, Hyperparams};
pub use optimizer::{minimize, OptimMethod, OptimResult, OptimizerConfig};
pub use partition::{disjoint_partition, grbcm_partition, random_partition, KMeansOptions, Partition, PartitionKind};
pub use data::{toy_generate, ColumnStats, Dataset};
pub use metrics::{msll, smse, EvalResult};
