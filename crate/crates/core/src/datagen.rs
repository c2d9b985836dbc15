//! Problem construction: synthetic shards with prescribed smoothness
//! constants, CSV ingestion, and row partitioning across workers.
//!
//! Synthetic generation draws standard-normal features per worker and then
//! rescales the whole shard so the certified smoothness constant lands on the
//! target exactly (up to the power-iteration tolerance). The stock regimes
//! mirror the heterogeneity patterns the triggers are designed around:
//! `increasing` gives worker m the target `(1.3^(m-1) + 1)^2` under square
//! loss, `uniform` gives every worker 4 under regularized logistic loss.
//!
//! Labels come from a planted model `theta_true = ones/sqrt(d)` plus Gaussian
//! noise (sign of the noisy margin for logistic). Everything is keyed on a
//! single seed; per-worker streams are split off with a SplitMix64 hop so
//! shard m never changes when the worker count does.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::losses::{LossError, LossKind, LossModel};
use crate::numeric::{self, DataMatrix, ModelVector, NumericsError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv read failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("row at line {line} is ragged: {got} fields, expected {expected}")]
    Ragged { line: u64, got: usize, expected: usize },
    #[error("cell at line {line}, column {column} is not a number: {content:?}")]
    Parse { line: u64, column: usize, content: String },
    #[error("column {column} out of range for width {width}")]
    ColumnOutOfRange { column: usize, width: usize },
    #[error("binary labels need exactly two distinct values, found {distinct}")]
    NotBinary { distinct: usize },
    #[error("file has no data rows")]
    Empty,
    #[error("spec needs workers >= 1, samples_per_worker >= 1, dim >= 1")]
    SpecEmpty,
    #[error("spec lists {got} smoothness targets for {expected} workers")]
    TargetCount { expected: usize, got: usize },
    #[error("smoothness target {target} for worker {worker} must exceed the l2 term {l2}")]
    TargetBelowReg { worker: usize, target: f64, l2: f64 },
    #[error("worker {worker}'s shard is degenerate (zero Gram matrix)")]
    Degenerate { worker: usize },
    #[error("worker {worker}'s shard missed its smoothness target: got {got}, wanted {target}")]
    MissedTarget { worker: usize, got: f64, target: f64 },
    #[error("cannot split {rows} rows across {workers} workers")]
    TooManyWorkers { workers: usize, rows: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Recipe for one synthetic worker set.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub workers: usize,
    pub samples_per_worker: usize,
    pub dim: usize,
    pub kind: LossKind,
    pub l2_reg: f64,
    /// Per-worker smoothness targets, length `workers`.
    pub target_lms: Vec<f64>,
    /// Label noise sigma.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Square loss, smoothness growing as `(1.3^(m-1) + 1)^2` across workers.
    pub fn increasing_square(workers: usize, samples_per_worker: usize, dim: usize, seed: u64) -> Self {
        let target_lms = (0..workers)
            .map(|m| {
                let b = 1.3_f64.powi(m as i32) + 1.0;
                b * b
            })
            .collect();
        Self {
            workers,
            samples_per_worker,
            dim,
            kind: LossKind::Square,
            l2_reg: 0.0,
            target_lms,
            noise: 0.1,
            seed,
        }
    }

    /// Regularized logistic loss, every worker at smoothness 4.
    pub fn uniform_logistic(workers: usize, samples_per_worker: usize, dim: usize, seed: u64) -> Self {
        Self {
            workers,
            samples_per_worker,
            dim,
            kind: LossKind::Logistic,
            l2_reg: 1e-3,
            target_lms: vec![4.0; workers],
            noise: 0.1,
            seed,
        }
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(worker as u64 + 1)))
}

/// Builds one loss model per worker. Same spec, same bytes.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<LossModel>, DataError> {
    if spec.workers == 0 || spec.samples_per_worker == 0 || spec.dim == 0 {
        return Err(DataError::SpecEmpty);
    }
    if spec.target_lms.len() != spec.workers {
        return Err(DataError::TargetCount { expected: spec.workers, got: spec.target_lms.len() });
    }
    let n = spec.samples_per_worker;
    let d = spec.dim;
    let theta_true = ModelVector::new(vec![1.0 / (d as f64).sqrt(); d])?;

    let mut models = Vec::with_capacity(spec.workers);
    for worker in 0..spec.workers {
        let target = spec.target_lms[worker];
        if !(target > spec.l2_reg) {
            return Err(DataError::TargetBelowReg { worker, target, l2: spec.l2_reg });
        }
        let mut rng = worker_rng(spec.seed, worker);
        let rows: Vec<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut data = DataMatrix::new(n, d, rows, vec![0.0; n])?;

        // scale the shard so the certified constant hits the target; the
        // curvature part of L_m is quadratic in the feature scale
        let top = numeric::spectral_norm_sym(&data.gram())?;
        let curvature = match spec.kind {
            LossKind::Square => 2.0 * top,
            LossKind::Logistic => 0.25 * top,
        };
        if curvature <= 0.0 {
            return Err(DataError::Degenerate { worker });
        }
        data.scale_features(((target - spec.l2_reg) / curvature).sqrt());

        let labels: Vec<f64> = (0..n)
            .map(|i| {
                let margin = data.row_dot(i, &theta_true) + spec.noise * rng.sample::<f64, _>(StandardNormal);
                match spec.kind {
                    LossKind::Square => margin,
                    LossKind::Logistic => {
                        if margin >= 0.0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                }
            })
            .collect();
        let data = DataMatrix::new(n, d, data_rows(&data), labels)?;
        let model = LossModel::new(spec.kind, data, spec.l2_reg)?;

        let got = model.smoothness_constant()?;
        if (got - target).abs() > 1e-8 * target {
            return Err(DataError::MissedTarget { worker, got, target });
        }
        models.push(model);
    }
    Ok(models)
}

fn data_rows(data: &DataMatrix) -> Vec<f64> {
    (0..data.n_samples()).flat_map(|i| data.row(i).to_vec()).collect()
}

/// Which columns of a CSV file hold what.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub label_column: usize,
    /// Feature columns in the order they should appear; `None` takes every
    /// non-label column left to right.
    pub feature_columns: Option<Vec<usize>>,
    /// Map the two distinct label values onto -1/+1 (smaller value to -1).
    pub binary_labels: bool,
}

/// Per-column affine transform applied to the features of a loaded file.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    /// Population standard deviations; a zero entry marks a constant column,
    /// which standardizes to all zeros.
    pub stds: Vec<f64>,
}

/// Reads a numeric CSV file, standardizes features to zero mean and unit
/// variance, and optionally maps binary labels onto -1/+1. A non-numeric
/// first line is treated as a header.
pub fn load_csv(path: &std::path::Path, schema: &CsvSchema) -> Result<(DataMatrix, Standardization), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut raw: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (index, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(index as u64 + 1);
        if let Some(expected) = width {
            if record.len() != expected {
                return Err(DataError::Ragged { line, got: record.len(), expected });
            }
        }
        let mut row = Vec::with_capacity(record.len());
        let mut parse_err = None;
        for (column, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) => row.push(v),
                Err(_) => {
                    parse_err = Some(DataError::Parse { line, column, content: cell.to_string() });
                    break;
                }
            }
        }
        match parse_err {
            None => {
                width = width.or(Some(record.len()));
                raw.push(row);
            }
            // a non-numeric first line is the header; anywhere else it is bad data
            Some(err) => {
                if index == 0 {
                    continue;
                }
                return Err(err);
            }
        }
    }
    let width = width.ok_or(DataError::Empty)?;
    if schema.label_column >= width {
        return Err(DataError::ColumnOutOfRange { column: schema.label_column, width });
    }
    let feature_columns: Vec<usize> = match &schema.feature_columns {
        Some(cols) => {
            for &c in cols {
                if c >= width {
                    return Err(DataError::ColumnOutOfRange { column: c, width });
                }
            }
            cols.clone()
        }
        None => (0..width).filter(|&c| c != schema.label_column).collect(),
    };

    let n = raw.len();
    let d = feature_columns.len();
    let mut labels: Vec<f64> = raw.iter().map(|r| r[schema.label_column]).collect();
    if schema.binary_labels {
        let mut distinct: Vec<f64> = labels.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() != 2 {
            return Err(DataError::NotBinary { distinct: distinct.len() });
        }
        let low = distinct[0];
        for y in &mut labels {
            *y = if *y == low { -1.0 } else { 1.0 };
        }
    }

    // standardize feature columns in place: (x - mean) / std, constant
    // columns collapse to zero
    let mut means = vec![0.0; d];
    let mut stds = vec![0.0; d];
    for (j, &c) in feature_columns.iter().enumerate() {
        let mean = raw.iter().map(|r| r[c]).sum::<f64>() / n as f64;
        let var = raw.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n as f64;
        means[j] = mean;
        stds[j] = var.sqrt();
    }
    let mut rows = Vec::with_capacity(n * d);
    for r in &raw {
        for (j, &c) in feature_columns.iter().enumerate() {
            let v = if stds[j] > 0.0 { (r[c] - means[j]) / stds[j] } else { 0.0 };
            rows.push(v);
        }
    }
    let data = DataMatrix::new(n, d, rows, labels)?;
    Ok((data, Standardization { means, stds }))
}

/// How to split one matrix across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub workers: usize,
    /// Keep only the first `feature_cap` feature columns.
    pub feature_cap: Option<usize>,
    /// Shuffle rows with this seed before the contiguous split.
    pub shuffle_seed: Option<u64>,
}

/// Contiguous even split: every worker gets `n / workers` rows and the last
/// worker also takes the remainder. Shards are disjoint and cover the input.
pub fn partition(data: &DataMatrix, spec: &PartitionSpec) -> Result<Vec<DataMatrix>, DataError> {
    let n = data.n_samples();
    if spec.workers == 0 || spec.workers > n {
        return Err(DataError::TooManyWorkers { workers: spec.workers, rows: n });
    }
    let d = spec.feature_cap.map_or(data.dim(), |cap| cap.min(data.dim()));
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = spec.shuffle_seed {
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(seed)));
    }
    let base = n / spec.workers;
    let mut shards = Vec::with_capacity(spec.workers);
    let mut start = 0;
    for worker in 0..spec.workers {
        let take = if worker + 1 == spec.workers { n - start } else { base };
        let mut rows = Vec::with_capacity(take * d);
        let mut labels = Vec::with_capacity(take);
        for &i in &order[start..start + take] {
            rows.extend_from_slice(&data.row(i)[..d]);
            labels.push(data.label(i));
        }
        shards.push(DataMatrix::new(take, d, rows, labels)?);
        start += take;
    }
    Ok(shards)
}
