use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gp_committee::aggregation::GpoeWeights;
use gp_committee::data::CsvSplit;
use gp_committee::experiment::{
    consistency_sweep, parse_methods, run_experiment, DatasetSpec, ExpertCount, ExperimentConfig, MetricScale,
    PartitionChoice, Preset, RunRecord, SweepReport,
};
use gp_committee::{OptimMethod, OptimizerConfig};

/// Train Gaussian process expert committees and score their aggregations.
#[derive(Debug, Parser)]
#[command(name = "gp-committee", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment (all repetitions) and write results.csv, results.json and partition.json.
    Run(RunArgs),
    /// Repeat an experiment over increasing training sizes with the subset size held fixed.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DatasetKind {
    Toy,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PartitionArg {
    Random,
    Disjoint,
    Grbcm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GpoeArg {
    Uniform,
    Entropy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Cg,
    Lbfgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Original,
    Normalized,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    ToyConsistency,
    ToyCommunication,
    Kin40k,
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long, value_enum, default_value = "toy")]
    dataset: DatasetKind,
    /// Toy training-set size.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Toy test-set size [default: n/10].
    #[arg(long)]
    n_test: Option<usize>,
    /// CSV file for --dataset csv.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Zero-based target column [default: last].
    #[arg(long)]
    target_col: Option<usize>,
    /// Fraction of CSV rows held out when no index files are given.
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// File of zero-based training row indices, one per line.
    #[arg(long, requires = "test_idx")]
    train_idx: Option<PathBuf>,
    /// File of zero-based test row indices, one per line.
    #[arg(long, requires = "train_idx")]
    test_idx: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "disjoint")]
    partition: PartitionArg,
    /// Number of experts M.
    #[arg(long, conflicts_with = "subset_size")]
    experts: Option<usize>,
    /// Points per expert m0; M = round(n / m0).
    #[arg(long)]
    subset_size: Option<usize>,
    /// Comma-separated list from poe, gpoe, bcm, rbcm, npae, grbcm, full, comm.
    #[arg(long, default_value = "poe,gpoe,bcm,rbcm,grbcm")]
    methods: String,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Objective evaluations allowed to the hyperparameter optimizer.
    #[arg(long, default_value_t = 500)]
    max_evals: usize,
    #[arg(long, value_enum, default_value = "cg")]
    optimizer: OptimizerArg,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "uniform")]
    gpoe_beta: GpoeArg,
    /// Keep raw k-means cluster sizes instead of balancing them.
    #[arg(long)]
    no_rebalance: bool,
    /// Scale on which SMSE and MSLL are computed.
    #[arg(long, value_enum, default_value = "original")]
    metric_scale: ScaleArg,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Start from a predefined configuration; explicit flags above are ignored except --csv, --reps, --seed, --max-evals and --out.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Increasing training sizes.
    #[arg(long, value_delimiter = ',', default_value = "1000,4000,16000")]
    n_list: Vec<usize>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

impl CommonArgs {
    fn experts(&self) -> Result<ExpertCount> {
        match (self.experts, self.subset_size) {
            (Some(m), None) => Ok(ExpertCount::Experts(m)),
            (None, Some(m0)) => Ok(ExpertCount::SubsetSize(m0)),
            (None, None) => bail!("give exactly one of --experts or --subset-size"),
            (Some(_), Some(_)) => unreachable!("clap rejects both"),
        }
    }

    fn dataset(&self) -> Result<DatasetSpec> {
        Ok(match self.dataset {
            DatasetKind::Toy => DatasetSpec::Toy {
                n: self.n,
                n_test: self.n_test,
            },
            DatasetKind::Csv => {
                let path = self.csv.clone().context("--dataset csv needs --csv PATH")?;
                let split = match (&self.train_idx, &self.test_idx) {
                    (Some(train), Some(test)) => CsvSplit::IndexFiles {
                        train: train.clone(),
                        test: test.clone(),
                    },
                    _ => CsvSplit::TestFraction(self.test_fraction),
                };
                DatasetSpec::Csv {
                    path,
                    target_column: self.target_col,
                    split,
                }
            }
        })
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            max_evals: self.max_evals,
            method: match self.optimizer {
                OptimizerArg::Cg => OptimMethod::ConjugateGradient,
                OptimizerArg::Lbfgs => OptimMethod::Lbfgs,
            },
            ..OptimizerConfig::default()
        }
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let config = ExperimentConfig {
            dataset: self.dataset()?,
            partition: match self.partition {
                PartitionArg::Random => PartitionChoice::Random,
                PartitionArg::Disjoint => PartitionChoice::Disjoint,
                PartitionArg::Grbcm => PartitionChoice::Grbcm,
            },
            experts: self.experts()?,
            methods: parse_methods(&self.methods)?,
            gpoe_weights: match self.gpoe_beta {
                GpoeArg::Uniform => GpoeWeights::Uniform,
                GpoeArg::Entropy => GpoeWeights::Entropy,
            },
            optimizer: self.optimizer(),
            seed: self.seed,
            repetitions: self.reps,
            rebalance: !self.no_rebalance,
            metric_scale: match self.metric_scale {
                ScaleArg::Original => MetricScale::Original,
                ScaleArg::Normalized => MetricScale::Normalized,
            },
            output: Some(self.out.clone()),
        };
        config.validate()?;
        Ok(config)
    }

    /// Preset configuration with the run-control flags applied on top.
    fn preset(&self, preset: PresetArg) -> Result<(ExperimentConfig, Vec<usize>)> {
        let preset = match preset {
            PresetArg::ToyConsistency => Preset::ToyConsistency,
            PresetArg::ToyCommunication => Preset::ToyCommunication,
            PresetArg::Kin40k => Preset::Kin40k,
        };
        let (mut config, sizes) = preset.config(self.csv.as_deref())?;
        config.repetitions = self.reps;
        config.seed = self.seed;
        config.optimizer = self.optimizer();
        config.output = Some(self.out.clone());
        config.validate()?;
        Ok((config, sizes))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn print_records(records: &[RunRecord]) {
    println!(
        "{:<14} {:>4} {:>7} {:>4} {:>8} {:>9} {:>9} {:>9} {:>5}",
        "method", "rep", "n", "M", "smse", "msll", "train_s", "pred_s", "degen"
    );
    for r in records {
        println!(
            "{:<14} {:>4} {:>7} {:>4} {:>8} {:>9} {:>9.3} {:>9.3} {:>5}{}",
            r.method,
            r.rep,
            r.n_train,
            r.n_experts,
            opt(r.smse),
            opt(r.msll),
            r.train_time_seconds,
            r.predict_time_seconds,
            r.degeneracy_count,
            r.error.as_ref().map(|e| format!("  error: {e}")).unwrap_or_default()
        );
    }
}

fn print_sweep(report: &SweepReport) {
    for p in &report.points {
        println!("n = {} (M = {}, train {:.2}s)", p.n, p.n_experts, p.train_time_seconds);
        for m in &p.methods {
            println!(
                "  {:<14} smse {:>8} msll {:>9} median var {:>8} interior {:>8}",
                m.method,
                opt(m.smse),
                opt(m.msll),
                opt(m.median_variance),
                opt(m.median_interior_variance)
            );
        }
    }
    for c in &report.checks {
        println!("[{}] {}: {}", if c.passed { "ok" } else { "no" }, c.name, c.detail);
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let config = match args.preset {
                Some(p) => args.common.preset(p)?.0,
                None => args.common.config()?,
            };
            let out = run_experiment(&config)?;
            print_records(&out.records);
            log::info!("results written to {}", args.common.out.display());
        }
        Command::Sweep(args) => {
            let (config, n_list) = match args.preset {
                Some(p) => {
                    let (c, sizes) = args.common.preset(p)?;
                    if sizes.is_empty() {
                        bail!("this preset is a single run; use `run --preset`");
                    }
                    (c, sizes)
                }
                None => (args.common.config()?, args.n_list.clone()),
            };
            let report = consistency_sweep(&config, &n_list)?;
            print_sweep(&report);
            log::info!("sweep written to {}", args.common.out.display());
        }
    }
    Ok(())
}
