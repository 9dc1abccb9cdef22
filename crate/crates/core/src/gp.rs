//! Noiseless GP posterior-mean prediction with `Sigma*`, plus dataset
//! ingestion (IDX and CSV) onto the unit sphere.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inputs::UNIT_NORM_TOL;
use crate::kernel::{DotProductKernel, KernelOptions};
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::simulator::{hidden_states, init_params, EmpiricalMode};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Labelled inputs, one unit-norm row per example.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    /// Projects every row onto the unit sphere. All-zero rows are an error.
    pub fn new(mut inputs: DMatrix<f64>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Precondition(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        for (i, mut row) in inputs.row_iter_mut().enumerate() {
            let norm = row.norm();
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::Domain(format!(
                    "row {i} has norm {norm}; cannot project to the sphere"
                )));
            }
            row /= norm;
        }
        Ok(Dataset {
            inputs,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn head(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        Dataset {
            inputs: self.inputs.rows(0, count).into_owned(),
            labels: self.labels[..count].to_vec(),
            split: self.split,
        }
    }

    pub fn rows_as_vectors(&self) -> Vec<DVector<f64>> {
        self.inputs.row_iter().map(|r| r.transpose()).collect()
    }

    /// Merges rows that are identical after normalization (within the unit
    /// tolerance). The merged label is the majority label, ties going to
    /// the smallest class index. Returns the number of rows removed.
    pub fn dedup_majority(&mut self) -> usize {
        let n = self.len();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut by_key: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for i in 0..n {
            // Coarse key first, exact distance check second.
            let key: Vec<i64> = self
                .inputs
                .row(i)
                .iter()
                .map(|v| (v * 1e6).round() as i64)
                .collect();
            let candidates = by_key.entry(key).or_default();
            let mut placed = false;
            for &g in candidates.iter() {
                let rep = groups[g][0];
                if (self.inputs.row(i) - self.inputs.row(rep)).norm() <= UNIT_NORM_TOL {
                    groups[g].push(i);
                    placed = true;
                    break;
                }
            }
            if !placed {
                candidates.push(groups.len());
                groups.push(vec![i]);
            }
        }
        let removed = n - groups.len();
        if removed == 0 {
            return 0;
        }
        let keep: Vec<usize> = groups.iter().map(|g| g[0]).collect();
        let labels = groups
            .iter()
            .map(|g| {
                let mut counts: HashMap<usize, usize> = HashMap::new();
                for &i in g {
                    *counts.entry(self.labels[i]).or_default() += 1;
                }
                let best = counts.values().copied().max().unwrap_or(0);
                counts
                    .into_iter()
                    .filter(|(_, c)| *c == best)
                    .map(|(l, _)| l)
                    .min()
                    .expect("group is non-empty")
            })
            .collect();
        self.inputs = self.inputs.select_rows(&keep);
        self.labels = labels;
        removed
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: format!("truncated header: file has {} bytes", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn check_body(bytes: &[u8], header: usize, expected: usize, path: &Path) -> Result<()> {
    let got = bytes.len() - header.min(bytes.len());
    if got < expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            message: format!("truncated data: expected {expected} bytes after the {header}-byte header, found {got}"),
        });
    }
    Ok(())
}

/// Reads an IDX image file (`0x803`) and label file (`0x801`). Pixels are
/// scaled to `[0, 1]` and each row is projected onto the unit sphere.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    check_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels_path)?;
    let count = read_be_u32(&img, 4, images_path)? as usize;
    let rows = read_be_u32(&img, 8, images_path)? as usize;
    let cols = read_be_u32(&img, 12, images_path)? as usize;
    let label_count = read_be_u32(&lab, 4, labels_path)? as usize;
    if count != label_count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("label count {label_count} does not match image count {count}"),
        });
    }
    let dim = rows * cols;
    check_body(&img, 16, count * dim, images_path)?;
    check_body(&lab, 8, count, labels_path)?;
    let pixels = &img[16..16 + count * dim];
    let inputs = DMatrix::from_row_iterator(count, dim, pixels.iter().map(|&b| b as f64 / 255.0));
    let labels = lab[8..8 + count].iter().map(|&b| b as usize).collect();
    Dataset::new(inputs, labels, split)
}

/// Reads a numeric CSV with a header row. `label_column` selects the
/// column holding integer class labels; every other column is a feature.
pub fn load_csv(path: &Path, label_column: usize, split: Split) -> Result<Dataset> {
    let csv_err = |row: usize, column: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => csv_err(0, 0, format!("{other:?}")),
        })?;
    let width = reader
        .headers()
        .map_err(|e| csv_err(0, 0, e.to_string()))?
        .len();
    if label_column >= width {
        return Err(csv_err(
            0,
            label_column,
            format!("label column out of range; header has {width} columns"),
        ));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // Data rows are numbered from 1; the header is row 0.
        let row = r + 1;
        let record = record.map_err(|e| csv_err(row, 0, e.to_string()))?;
        if record.len() != width {
            return Err(csv_err(
                row,
                record.len(),
                format!("expected {width} columns, found {}", record.len()),
            ));
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if c == label_column {
                let l: usize = cell.parse().map_err(|_| {
                    csv_err(
                        row,
                        c,
                        format!("label {cell:?} is not a nonnegative integer"),
                    )
                })?;
                labels.push(l);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| csv_err(row, c, format!("cell {cell:?} is not numeric")))?;
                if !v.is_finite() {
                    return Err(csv_err(row, c, format!("cell {cell:?} is not finite")));
                }
                values.push(v);
            }
        }
    }
    let inputs = DMatrix::from_row_slice(labels.len(), width - 1, &values);
    Dataset::new(inputs, labels, split)
}

/// One-hot targets, optionally centered by subtracting `1 / n_out`.
pub fn one_hot(labels: &[usize], n_out: usize, centered: bool) -> Result<DMatrix<f64>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_out) {
        return Err(Error::Precondition(format!(
            "label {bad} out of range for {n_out} classes"
        )));
    }
    let shift = if centered { 1.0 / n_out as f64 } else { 0.0 };
    Ok(DMatrix::from_fn(labels.len(), n_out, |i, j| {
        (if labels[i] == j { 1.0 } else { 0.0 }) - shift
    }))
}

/// Jitter values tried in order until Cholesky succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterSchedule(pub Vec<f64>);

impl Default for JitterSchedule {
    /// `1e-10, 1e-9, ..., 1e-4`.
    fn default() -> Self {
        JitterSchedule((0..7).map(|k| 10f64.powi(-10 + k)).collect())
    }
}

impl JitterSchedule {
    /// The default schedule preceded by an exact (zero-jitter) attempt.
    pub fn starting_at_zero() -> Self {
        let mut s = vec![0.0];
        s.extend(JitterSchedule::default().0);
        JitterSchedule(s)
    }
}

#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub train_chol: Cholesky<f64, Dyn>,
    pub alpha: DMatrix<f64>,
    pub jitter_used: f64,
    pub predictions: DMatrix<f64>,
    /// `||(K + jI) alpha - Y||_F / ||Y||_F`.
    pub residual: f64,
}

impl GpPosterior {
    pub fn predicted_classes(&self) -> Vec<usize> {
        argmax_rows(&self.predictions)
    }
}

pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Posterior mean `K_cross (K_train + jI)^{-1} Y`, escalating the jitter
/// through `schedule` until the factorization succeeds.
pub fn gp_predict(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    schedule: &JitterSchedule,
) -> Result<GpPosterior> {
    let n = k_train.nrows();
    if k_train.ncols() != n {
        return Err(Error::Precondition("K_train must be square".into()));
    }
    if k_cross.ncols() != n || y_train.nrows() != n {
        return Err(Error::Precondition(format!(
            "shape mismatch: K_train {n}x{n}, K_cross {}x{}, Y {}x{}",
            k_cross.nrows(),
            k_cross.ncols(),
            y_train.nrows(),
            y_train.ncols()
        )));
    }
    let asym = (k_train - k_train.transpose()).amax();
    if asym > 1e-12 * k_train.amax().max(1.0) {
        return Err(Error::Precondition(format!(
            "K_train is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    if schedule.0.is_empty() {
        return Err(Error::Precondition("empty jitter schedule".into()));
    }
    let y_norm = y_train.norm();
    for &jitter in &schedule.0 {
        let mut k = k_train.clone();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        let Some(chol) = Cholesky::new(k.clone()) else {
            continue;
        };
        let alpha = chol.solve(y_train);
        if alpha.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let residual = (&k * &alpha - y_train).norm() / y_norm.max(f64::MIN_POSITIVE);
        // At zero jitter a numerically singular matrix can factor but
        // solve badly; treat that like a failed factorization.
        if residual > 1e-8 && jitter == 0.0 {
            continue;
        }
        if jitter > 0.0 {
            info!("gp_predict: factorized with jitter {jitter:.1e}");
        }
        let predictions = predict_rows(k_cross, &alpha);
        return Ok(GpPosterior {
            train_chol: chol,
            alpha,
            jitter_used: jitter,
            predictions,
            residual,
        });
    }
    let lambda_min_estimate = SymmetricEigen::new(k_train.clone()).eigenvalues.min();
    Err(Error::NotPositiveDefinite {
        lambda_min_estimate,
        last_jitter: *schedule.0.last().expect("non-empty"),
    })
}

fn predict_rows(k_cross: &DMatrix<f64>, alpha: &DMatrix<f64>) -> DMatrix<f64> {
    const CHUNK: usize = 64;
    let m = k_cross.nrows();
    let blocks: Vec<(usize, DMatrix<f64>)> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|b| {
            let start = b * CHUNK;
            let len = CHUNK.min(m - start);
            (start, k_cross.rows(start, len) * alpha)
        })
        .collect();
    let mut out = DMatrix::zeros(m, alpha.ncols());
    for (start, block) in blocks {
        out.rows_mut(start, block.nrows()).copy_from(&block);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy(f64),
    Mse(f64),
}

impl Metric {
    pub fn value(&self) -> f64 {
        match self {
            Metric::Accuracy(v) | Metric::Mse(v) => *v,
        }
    }
}

/// Accuracy of row-wise argmax, or mean squared error against targets.
pub fn evaluate(
    predictions: &DMatrix<f64>,
    labels: &[usize],
    targets: Option<&DMatrix<f64>>,
    task: Task,
) -> Result<Metric> {
    if predictions.nrows() != labels.len() {
        return Err(Error::Precondition(format!(
            "{} prediction rows but {} labels",
            predictions.nrows(),
            labels.len()
        )));
    }
    match task {
        Task::Classification => {
            if labels.is_empty() {
                return Err(Error::Precondition("no labels to score".into()));
            }
            let hits = argmax_rows(predictions)
                .iter()
                .zip(labels)
                .filter(|(p, l)| p == l)
                .count();
            Ok(Metric::Accuracy(hits as f64 / labels.len() as f64))
        }
        Task::Regression => {
            let owned;
            let t = match targets {
                Some(t) => t,
                None => {
                    owned = one_hot(labels, predictions.ncols(), false)?;
                    &owned
                }
            };
            if t.shape() != predictions.shape() {
                return Err(Error::Precondition(
                    "prediction and target shapes differ".into(),
                ));
            }
            Ok(Metric::Mse(
                (predictions - t).norm_squared() / t.len() as f64,
            ))
        }
    }
}

/// Which kernel the inference pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceKernel {
    /// The limiting DEQ kernel `Sigma*`.
    Nngp,
    /// The input kernel `Sigma^1` alone.
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub kernel: InferenceKernel,
    pub train_size: usize,
    pub test_size: usize,
    pub duplicates_removed: usize,
    pub jitter_used: f64,
    pub residual: f64,
    pub accuracy: f64,
    pub mse: f64,
    #[serde(skip)]
    pub predictions: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub centered_targets: bool,
    pub jitter: JitterSchedule,
    /// Chebyshev nodes used to tabulate `Sigma*` as a function of `Sigma^1`.
    pub map_nodes: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            centered_targets: true,
            jitter: JitterSchedule::default(),
            map_nodes: 129,
        }
    }
}

/// GP classification of `test` from `train` with the chosen kernel.
/// `config.n_in` must equal the dataset dimension.
pub fn run_inference(
    train: &Dataset,
    test: &Dataset,
    config: &ModelConfig,
    kernel_opts: &KernelOptions,
    kernel: InferenceKernel,
    opts: &InferenceOptions,
) -> Result<InferenceOutcome> {
    if train.dim() != config.n_in || test.dim() != config.n_in {
        return Err(Error::Precondition(format!(
            "dataset dimension {} / {} does not match n_in = {}",
            train.dim(),
            test.dim(),
            config.n_in
        )));
    }
    let n_out = config
        .n_out
        .max(train.num_classes())
        .max(test.num_classes());
    let mut train = train.clone();
    let duplicates_removed = train.dedup_majority();
    if duplicates_removed > 0 {
        warn!("removed {duplicates_removed} duplicate training rows");
    }
    let (k_train, k_cross) = match kernel {
        InferenceKernel::Nngp => {
            let map = DotProductKernel::limit(config, kernel_opts, opts.map_nodes)?;
            (
                map.gram_rows(&train.inputs),
                map.cross_rows(&test.inputs, &train.inputs),
            )
        }
        InferenceKernel::Linear => {
            let s = config.sigma1_diag();
            (
                &train.inputs * train.inputs.transpose() * s,
                &test.inputs * train.inputs.transpose() * s,
            )
        }
    };
    let y = one_hot(&train.labels, n_out, opts.centered_targets)?;
    let post = gp_predict(&k_train, &k_cross, &y, &opts.jitter)?;
    let accuracy = evaluate(&post.predictions, &test.labels, None, Task::Classification)?.value();
    let test_targets = one_hot(&test.labels, n_out, opts.centered_targets)?;
    let mse = evaluate(
        &post.predictions,
        &test.labels,
        Some(&test_targets),
        Task::Regression,
    )?
    .value();
    info!("{kernel:?} kernel: accuracy {accuracy:.4}, mse {mse:.5}");
    Ok(InferenceOutcome {
        kernel,
        train_size: train.len(),
        test_size: test.len(),
        duplicates_removed,
        jitter_used: post.jitter_used,
        residual: post.residual,
        accuracy,
        mse,
        predictions: post.predictions,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRidgeRow {
    pub width: usize,
    pub accuracies: Vec<f64>,
    pub median_accuracy: f64,
}

/// Ridge regression on the untrained fixed-point features `h*` of sampled
/// networks, a proxy for finite-width performance (nothing is trained).
/// Network `k` at width index `w` uses seed `derive_seed(root_seed, 1000 w + k)`.
pub fn feature_ridge_baseline(
    train: &Dataset,
    test: &Dataset,
    config: &ModelConfig,
    widths: &[usize],
    seeds_per_width: usize,
    ridge: f64,
    root_seed: u64,
) -> Result<Vec<FeatureRidgeRow>> {
    if seeds_per_width == 0 || ridge <= 0.0 {
        return Err(Error::Precondition("need >= 1 seed and ridge > 0".into()));
    }
    let n_out = config
        .n_out
        .max(train.num_classes())
        .max(test.num_classes());
    let y = one_hot(&train.labels, n_out, true)?;
    let xs_train = train.rows_as_vectors();
    let xs_test = test.rows_as_vectors();
    let mut rows = Vec::new();
    for (wi, &width) in widths.iter().enumerate() {
        let cfg = config.with_width(width);
        let mut accuracies = Vec::with_capacity(seeds_per_width);
        for k in 0..seeds_per_width {
            let params = init_params(&cfg, derive_seed(root_seed, (1000 * wi + k) as u64))?;
            let f_train = hidden_states(&params, &xs_train, EmpiricalMode::FixedPoint)?.transpose();
            let f_test = hidden_states(&params, &xs_test, EmpiricalMode::FixedPoint)?.transpose();
            // Primal ridge: (F^T F + r I) w = F^T Y.
            let mut gram = f_train.tr_mul(&f_train);
            for i in 0..width {
                gram[(i, i)] += ridge;
            }
            let chol = Cholesky::new(gram).ok_or(Error::NotPositiveDefinite {
                lambda_min_estimate: ridge,
                last_jitter: ridge,
            })?;
            let weights = chol.solve(&f_train.tr_mul(&y));
            let pred = f_test * weights;
            accuracies.push(evaluate(&pred, &test.labels, None, Task::Classification)?.value());
        }
        let mut sorted = accuracies.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median_accuracy = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        info!("feature ridge width {width}: median accuracy {median_accuracy:.4}");
        rows.push(FeatureRidgeRow {
            width,
            accuracies,
            median_accuracy,
        });
    }
    Ok(rows)
}

/// Paths of the four standard IDX files inside `dir`.
pub fn mnist_paths(dir: &Path) -> [PathBuf; 4] {
    [
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        dir.join("test-images-idx3-ubyte"),
        dir.join("test-labels-idx1-ubyte"),
    ]
}
