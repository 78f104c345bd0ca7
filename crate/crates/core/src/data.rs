//! Datasets: the 1-D toy benchmark, CSV ingestion, and normalization.
//!
//! Every column of the training inputs and the training targets is
//! standardized to zero mean and unit (population) variance. Test data is
//! always transformed with the training statistics.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the toy observation noise, `ε ~ N(0, 0.25)`.
pub const TOY_NOISE_STD: f64 = 0.5;
pub const TOY_TRAIN_RANGE: (f64, f64) = (0.0, 1.0);
pub const TOY_TEST_RANGE: (f64, f64) = (-0.2, 1.2);

/// Noiseless toy response `5x² sin(12x) + (x³ − 0.5) sin(3x − 0.5) + 4 cos(2x)`.
pub fn toy_function(x: f64) -> f64 {
    5.0 * x * x * (12.0 * x).sin() + (x.powi(3) - 0.5) * (3.0 * x - 0.5).sin() + 4.0 * (2.0 * x).cos()
}

/// Mean and standard deviation of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    pub const IDENTITY: ColumnStats = ColumnStats { mean: 0.0, std: 1.0 };

    /// Population statistics; a constant column gets `std = 1`.
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 0.0 && std.is_finite() { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: Vec<ColumnStats>,
    pub target: ColumnStats,
}

/// Normalized train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub x_train: DMatrix<f64>,
    pub y_train: DVector<f64>,
    pub x_test: DMatrix<f64>,
    pub y_test: DVector<f64>,
    pub norm_stats: NormStats,
    /// Noiseless test responses in normalized target units, when known.
    pub test_noiseless: Option<DVector<f64>>,
}

impl Dataset {
    /// Normalizes raw arrays with statistics computed on the training part.
    pub fn from_raw(
        name: impl Into<String>,
        x_train: DMatrix<f64>,
        y_train: DVector<f64>,
        x_test: DMatrix<f64>,
        y_test: DVector<f64>,
    ) -> Result<Self> {
        if x_train.nrows() != y_train.len() || x_test.nrows() != y_test.len() {
            return Err(Error::Contract("input and target row counts differ".into()));
        }
        if x_train.ncols() != x_test.ncols() {
            return Err(Error::DimensionMismatch {
                context: "test input columns",
                expected: x_train.ncols(),
                actual: x_test.ncols(),
            });
        }
        if x_train.nrows() == 0 {
            return Err(Error::Contract("training set is empty".into()));
        }
        let inputs: Vec<ColumnStats> = x_train.column_iter().map(|c| ColumnStats::of(c.iter().copied())).collect();
        let target = ColumnStats::of(y_train.iter().copied());
        let norm_x = |x: DMatrix<f64>| {
            let mut x = x;
            for (mut col, s) in x.column_iter_mut().zip(&inputs) {
                col.apply(|v| *v = s.normalize(*v));
            }
            x
        };
        Ok(Self {
            name: name.into(),
            x_train: norm_x(x_train),
            y_train: y_train.map(|v| target.normalize(v)),
            x_test: norm_x(x_test),
            y_test: y_test.map(|v| target.normalize(v)),
            norm_stats: NormStats { inputs, target },
            test_noiseless: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.x_train.ncols()
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn n_test(&self) -> usize {
        self.x_test.nrows()
    }

    /// Test inputs mapped back to original units.
    pub fn raw_test_inputs(&self) -> DMatrix<f64> {
        let mut x = self.x_test.clone();
        for (mut col, s) in x.column_iter_mut().zip(&self.norm_stats.inputs) {
            col.apply(|v| *v = s.denormalize(*v));
        }
        x
    }

    /// Variance of a target-unit quantity expressed on the normalized scale.
    pub fn normalized_variance(&self, raw_variance: f64) -> f64 {
        raw_variance / (self.norm_stats.target.std * self.norm_stats.target.std)
    }
}

/// Maps normalized predictions back to original target units.
pub fn denormalize_predictions(
    means: &DVector<f64>,
    vars: &DVector<f64>,
    target: &ColumnStats,
) -> (DVector<f64>, DVector<f64>) {
    (
        means.map(|m| target.denormalize(m)),
        vars.map(|v| v * target.std * target.std),
    )
}

/// Toy data: training inputs on `[0, 1]`, test inputs on `[-0.2, 1.2]`, noisy targets for both.
pub fn toy_generate(n: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if n < 1 || n_test < 1 {
        return Err(Error::Contract("toy data needs n >= 1 and n_test >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TOY_NOISE_STD).expect("valid normal");
    let train_x = Uniform::new_inclusive(TOY_TRAIN_RANGE.0, TOY_TRAIN_RANGE.1).expect("valid range");
    let test_x = Uniform::new_inclusive(TOY_TEST_RANGE.0, TOY_TEST_RANGE.1).expect("valid range");

    let xs: Vec<f64> = (0..n).map(|_| train_x.sample(&mut rng)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| toy_function(*x) + noise.sample(&mut rng)).collect();
    let xt: Vec<f64> = (0..n_test).map(|_| test_x.sample(&mut rng)).collect();
    let ft: Vec<f64> = xt.iter().map(|x| toy_function(*x)).collect();
    let yt: Vec<f64> = ft.iter().map(|f| f + noise.sample(&mut rng)).collect();

    let mut ds = Dataset::from_raw(
        format!("toy-{n}"),
        DMatrix::from_column_slice(n, 1, &xs),
        DVector::from_vec(ys),
        DMatrix::from_column_slice(n_test, 1, &xt),
        DVector::from_vec(yt),
    )?;
    let target = ds.norm_stats.target;
    ds.test_noiseless = Some(DVector::from_iterator(n_test, ft.into_iter().map(|f| target.normalize(f))));
    Ok(ds)
}

/// How a CSV file is divided into training and test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CsvSplit {
    /// Random split with this fraction of rows held out for testing.
    TestFraction(f64),
    /// Row-index lists, one zero-based integer per line.
    IndexFiles { train: PathBuf, test: PathBuf },
    /// Explicit row indices.
    Indices { train: Vec<usize>, test: Vec<usize> },
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok()
}

/// Parses a comma-delimited numeric table. A first line with any non-numeric
/// cell is treated as a header.
pub fn read_numeric_csv(path: &Path) -> Result<(Option<Vec<String>>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(text.as_bytes());
    let mut header = None;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if line == 0 && record.iter().any(|c| parse_cell(c).is_none()) {
            header = Some(record.iter().map(|c| c.trim().to_string()).collect());
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (column, cell) in record.iter().enumerate() {
            match parse_cell(cell) {
                Some(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::NonNumericCell {
                        row: line + 1,
                        column: column + 1,
                        value: cell.to_string(),
                    })
                }
            }
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn read_index_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|_| Error::NonNumericCell {
                row: i + 1,
                column: 1,
                value: l.to_string(),
            })
        })
        .collect()
}

/// Loads a CSV, splits it and normalizes with training statistics.
///
/// `target_column` is zero-based; `None` selects the last column.
pub fn load_csv(path: &Path, target_column: Option<usize>, split: &CsvSplit, seed: u64) -> Result<Dataset> {
    let (_, rows) = read_numeric_csv(path)?;
    if rows.len() < 2 {
        return Err(Error::Contract(format!("{} has fewer than two data rows", path.display())));
    }
    let width = rows[0].len();
    if width < 2 {
        return Err(Error::Contract("CSV needs at least one input and one target column".into()));
    }
    let target = target_column.unwrap_or(width - 1);
    if target >= width {
        return Err(Error::InvalidConfig {
            field: "target_column",
            message: format!("column {target} out of range for {width} columns"),
        });
    }

    let (train_idx, test_idx) = match split {
        CsvSplit::TestFraction(frac) => {
            if !(*frac > 0.0 && *frac < 1.0) {
                return Err(Error::InvalidConfig {
                    field: "test_fraction",
                    message: format!("must lie in (0, 1), got {frac}"),
                });
            }
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_test = ((rows.len() as f64 * frac).round() as usize).clamp(1, rows.len() - 1);
            let test = order[..n_test].to_vec();
            let train = order[n_test..].to_vec();
            (train, test)
        }
        CsvSplit::IndexFiles { train, test } => (read_index_file(train)?, read_index_file(test)?),
        CsvSplit::Indices { train, test } => (train.clone(), test.clone()),
    };
    if let Some(bad) = train_idx.iter().chain(&test_idx).find(|i| **i >= rows.len()) {
        return Err(Error::InvalidConfig {
            field: "split",
            message: format!("row index {bad} out of range for {} rows", rows.len()),
        });
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InvalidConfig {
            field: "split",
            message: "train and test sets must be nonempty".into(),
        });
    }

    let input_cols: Vec<usize> = (0..width).filter(|c| *c != target).collect();
    let build = |idx: &[usize]| {
        let x = DMatrix::from_fn(idx.len(), input_cols.len(), |r, c| rows[idx[r]][input_cols[c]]);
        let y = DVector::from_fn(idx.len(), |r, _| rows[idx[r]][target]);
        (x, y)
    };
    let (xtr, ytr) = build(&train_idx);
    let (xte, yte) = build(&test_idx);
    for (c, col) in xtr.column_iter().enumerate() {
        let first = col[0];
        if col.iter().all(|v| *v == first) {
            log::warn!("input column {} is constant in the training split; std forced to 1", input_cols[c]);
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::from_raw(name, xtr, ytr, xte, yte)
}

/// Draws `n` points uniformly from `[lo, hi]`; used by tests and benches.
pub fn uniform_inputs(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| rng.random_range(lo..=hi))
}
