use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use deqgp::gp::one_hot;
use deqgp::inputs::check_pairwise_distinct;
use deqgp::{
    check_unit, composed_series, contraction_gamma, depth_convergence, derive_seed, eigen_study,
    empirical_kernel, forward_fixed_point, gaussianity_experiment, hermite_coefficients,
    init_params, kernel_recursion, limit_kernel, load_csv, load_mnist_idx, network_output,
    normalize, output_kernel, pd_diagnostic, random_unit_inputs, run_inference, width_convergence,
    ConvergenceTrace, Dataset, EmpiricalMode, InferenceKernel, InferenceOptions, KernelMatrix,
    Split,
};
use log::{info, warn};
use nalgebra::DVector;
use serde::Serialize;

use crate::config::Resolved;
use crate::output::{num, opt_num, CsvTable, ExperimentReport, RunDir};
use crate::CliError;

/// Where a command's input vectors come from.
#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// CSV file, one input vector per row, no header.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// Draw this many inputs uniformly from the unit sphere.
    #[arg(long)]
    pub random_inputs: Option<usize>,
    /// Project rows onto the unit sphere instead of rejecting them.
    #[arg(long)]
    pub normalize: bool,
}

impl InputArgs {
    fn load(
        &self,
        resolved: &Resolved,
        default_count: usize,
    ) -> Result<Vec<DVector<f64>>, CliError> {
        let n_in = resolved.model.n_in;
        match &self.inputs {
            Some(path) => {
                let rows = read_vectors(path, n_in)?;
                if self.normalize {
                    rows.iter()
                        .map(|r| normalize(r).map_err(CliError::from))
                        .collect()
                } else {
                    check_unit(&rows).map_err(|e| {
                        CliError::Data(format!(
                            "{}: {e}; pass --normalize to project rows",
                            path.display()
                        ))
                    })?;
                    Ok(rows)
                }
            }
            None => {
                let count = self.random_inputs.unwrap_or(default_count);
                Ok(random_unit_inputs(
                    n_in,
                    count,
                    derive_seed(resolved.seed, INPUT_STREAM),
                ))
            }
        }
    }
}

/// Seed stream reserved for randomly drawn inputs.
const INPUT_STREAM: u64 = 0x1_0000;

fn read_vectors(path: &Path, dim: usize) -> Result<Vec<DVector<f64>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if record.len() != dim {
            return Err(CliError::Data(format!(
                "{}: row {} has {} values, expected n_in = {dim}",
                path.display(),
                r + 1,
                record.len()
            )));
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().map_err(|_| {
                    CliError::Data(format!(
                        "{}: row {}, column {}: `{cell}` is not a number",
                        path.display(),
                        r + 1,
                        c + 1
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(DVector::from_vec(values));
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no input rows", path.display())));
    }
    Ok(rows)
}

fn require_contraction(resolved: &Resolved) -> Result<(), CliError> {
    let gamma = contraction_gamma(&resolved.model);
    if gamma < 1.0 {
        return Ok(());
    }
    if resolved.force {
        warn!("contraction constant gamma = {gamma:.4} >= 1; continuing because of --force");
        return Ok(());
    }
    Err(CliError::Config(format!(
        "sigma_w = {} gives gamma = 2 sqrt(2) sigma_w = {gamma:.4} >= 1, so the fixed point is not guaranteed; pass --force to run anyway",
        resolved.model.sigma_w
    )))
}

fn single_sigma_w(resolved: &Resolved) -> Result<(), CliError> {
    if resolved.sigma_w_list.len() > 1 {
        return Err(CliError::Config(
            "--sigma-w takes a list only for `eigen`".into(),
        ));
    }
    Ok(())
}

struct Run {
    dir: RunDir,
    kind: &'static str,
    args: serde_json::Value,
    started: Instant,
    started_at: String,
    seeds: Vec<u64>,
}

impl Run {
    fn start<A: Serialize>(
        resolved: &Resolved,
        kind: &'static str,
        args: &A,
    ) -> Result<Self, CliError> {
        let args = serde_json::to_value(args).map_err(|e| CliError::Config(e.to_string()))?;
        let dir = RunDir::create(resolved, kind, &args)?;
        info!("{kind}: writing to {}", dir.path.display());
        Ok(Run {
            dir,
            kind,
            args,
            started: Instant::now(),
            started_at: chrono::Utc::now().to_rfc3339(),
            seeds: vec![resolved.seed],
        })
    }

    fn finish(self, resolved: &Resolved, summary: serde_json::Value) -> Result<PathBuf, CliError> {
        let report = ExperimentReport {
            kind: self.kind.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            settings: resolved.clone(),
            args: self.args,
            seeds: self.seeds,
            summary,
            files: Default::default(),
        };
        self.dir.finish(report)
    }
}

fn kernel_table(k: &KernelMatrix) -> Vec<u8> {
    let n = k.size();
    let header: Vec<String> = (0..n).map(|j| format!("k{j}")).collect();
    let mut table = CsvTable::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for i in 0..n {
        table.row(&(0..n).map(|j| num(k.get(i, j))).collect::<Vec<_>>());
    }
    table.into_bytes()
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// CSV file whose first row is the input.
    #[arg(long, conflicts_with = "random_input")]
    pub input: Option<PathBuf>,
    /// Use a random unit input (the default).
    #[arg(long)]
    pub random_input: bool,
    #[arg(long)]
    pub normalize: bool,
}

pub fn simulate(resolved: &Resolved, a: &SimulateArgs) -> Result<PathBuf, CliError> {
    single_sigma_w(resolved)?;
    require_contraction(resolved)?;
    let inputs = InputArgs {
        inputs: a.input.clone(),
        random_inputs: Some(1),
        normalize: a.normalize,
    };
    let x = inputs.load(resolved, 1)?.swap_remove(0);
    let mut run = Run::start(resolved, "simulate", a)?;
    let params = init_params(&resolved.model, resolved.seed)?;
    let fp = forward_fixed_point(&params, &x)?;
    let f = network_output(&params, &fp.h_star)?;

    let mut trace = CsvTable::new(&["iteration", "relative_residual"]);
    for (i, r) in fp.residual_trace.iter().enumerate() {
        trace.row(&[(i + 1).to_string(), num(*r)]);
    }
    run.dir
        .write("residual_trace", "residual_trace.csv", &trace.into_bytes())?;
    let mut states = CsvTable::new(&["unit", "h_star"]);
    for (i, v) in fp.h_star.iter().enumerate() {
        states.row(&[i.to_string(), num(*v)]);
    }
    run.dir
        .write("h_star", "h_star.csv", &states.into_bytes())?;
    run.seeds = vec![resolved.seed];
    let summary = serde_json::json!({
        "iterations": fp.iterations,
        "converged": fp.converged,
        "final_residual": fp.residual_trace.last(),
        "contraction_warning": fp.contraction_warning,
        "output": f.as_slice(),
    });
    let converged = fp.converged;
    let dir = run.finish(resolved, summary)?;
    if !converged {
        return Err(CliError::NotConverged(format!(
            "fixed point not reached in {} iterations; results are in {}",
            resolved.model.fp_max_iter,
            dir.display()
        )));
    }
    Ok(dir)
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// `Sigma^depth` from the layer recursion.
    Recursion,
    /// The fixed point `Sigma*`.
    Limit,
    /// A finite network's hidden-state kernel.
    Empirical,
}

#[derive(Debug, Args, Serialize)]
pub struct KernelArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, value_enum, default_value = "limit")]
    pub mode: KernelMode,
    /// Level for `recursion`; for `empirical`, unroll to this level instead of the fixed point.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Apply the readout: scale by `sigma_v^2 / sigma_w^2`.
    #[arg(long)]
    pub output: bool,
}

pub fn kernel(resolved: &Resolved, a: &KernelArgs) -> Result<PathBuf, CliError> {
    single_sigma_w(resolved)?;
    require_contraction(resolved)?;
    let xs = a.inputs.load(resolved, 8)?;
    let cfg = &resolved.model;
    let opts = &resolved.kernel;
    let mut summary = serde_json::Map::new();
    let k = match a.mode {
        KernelMode::Recursion => {
            let depth = a
                .depth
                .ok_or_else(|| CliError::Config("--mode recursion needs --depth".into()))?;
            kernel_recursion(&xs, cfg, opts, depth)?
                .pop()
                .expect("depth >= 1")
        }
        KernelMode::Limit => {
            let lim = limit_kernel(&xs, cfg, opts)?;
            summary.insert("steps".into(), lim.steps.into());
            summary.insert("beta".into(), lim.beta.into());
            lim.kernel
        }
        KernelMode::Empirical => {
            let params = init_params(cfg, resolved.seed)?;
            let mode = match a.depth {
                None => EmpiricalMode::FixedPoint,
                Some(d) if d >= 2 => EmpiricalMode::Depth(d - 1),
                Some(d) => {
                    return Err(CliError::Config(format!(
                        "empirical --depth must be >= 2, got {d}"
                    )))
                }
            };
            // Fixed-point mode already carries sigma_v^2; rescale it to the hidden-state kernel.
            let k = empirical_kernel(&params, &xs, mode)?;
            match mode {
                EmpiricalMode::FixedPoint => k.scaled((cfg.sigma_w / cfg.sigma_v).powi(2)),
                EmpiricalMode::Depth(_) => k,
            }
        }
    };
    let k = if a.output { output_kernel(&k, cfg) } else { k };
    summary.insert("size".into(), k.size().into());
    summary.insert("min_eigenvalue".into(), k.min_eigenvalue().into());
    summary.insert("level".into(), k.level.label().into());

    let mut run = Run::start(resolved, "kernel", a)?;
    run.dir.write("kernel", "kernel.csv", &kernel_table(&k))?;
    run.dir.write_json("kernel_json", "kernel.json", &k)?;
    run.finish(resolved, summary.into())
}

#[derive(Debug, Args, Serialize)]
pub struct GaussianityArgs {
    /// Comma-separated widths.
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,500,1000")]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub num_nets: usize,
    /// CSV file whose first row is the input; random otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub normalize: bool,
    /// Also write every output sample.
    #[arg(long)]
    pub samples: bool,
}

pub fn gaussianity(resolved: &Resolved, a: &GaussianityArgs) -> Result<PathBuf, CliError> {
    single_sigma_w(resolved)?;
    require_contraction(resolved)?;
    let inputs = InputArgs {
        inputs: a.input.clone(),
        random_inputs: Some(1),
        normalize: a.normalize,
    };
    let x = inputs.load(resolved, 1)?.swap_remove(0);
    let mut run = Run::start(resolved, "gaussianity", a)?;
    let mut table = CsvTable::new(&[
        "width",
        "coordinate",
        "statistic",
        "p_value",
        "sample_count",
    ]);
    let mut samples = CsvTable::new(&["width", "net", "coordinate", "output"]);
    let mut rows = Vec::new();
    run.seeds.clear();
    for (wi, &width) in a.widths.iter().enumerate() {
        let seed = derive_seed(resolved.seed, wi as u64);
        run.seeds.push(seed);
        let report = gaussianity_experiment(
            &resolved.model.with_width(width),
            &x,
            a.num_nets,
            seed,
            &resolved.kernel,
        )?;
        info!(
            "width {width}: D = {:.4}, p = {:.3}",
            report.ks[0].statistic, report.ks[0].p_value
        );
        for (c, ks) in report.ks.iter().enumerate() {
            table.row(&[
                width.to_string(),
                c.to_string(),
                num(ks.statistic),
                num(ks.p_value),
                ks.sample_count.to_string(),
            ]);
        }
        if a.samples {
            for (c, column) in report.samples.iter().enumerate() {
                for (k, v) in column.iter().enumerate() {
                    samples.row(&[width.to_string(), k.to_string(), c.to_string(), num(*v)]);
                }
            }
        }
        rows.push(serde_json::json!({
            "width": width,
            "theoretical_variance": report.theoretical_variance,
            "failures": report.failures,
            "mean_iterations": report.mean_iterations,
            "max_abs_off_diagonal_correlation": report.max_abs_off_diagonal_correlation(),
        }));
    }
    run.dir.write("ks", "ks.csv", &table.into_bytes())?;
    if a.samples {
        run.dir
            .write("samples", "samples.csv", &samples.into_bytes())?;
    }
    run.finish(resolved, serde_json::json!({ "widths": rows }))
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Width,
    Depth,
}

#[derive(Debug, Args, Serialize)]
pub struct ConvergenceArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated widths for `--axis width`.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "16,32,64,128,256,512,1024"
    )]
    pub widths: Vec<usize>,
    /// Comma-separated depths for `--axis depth`.
    #[arg(long, value_delimiter = ',')]
    pub depths: Vec<usize>,
    /// Unrolled depth of the width study.
    #[arg(long, default_value_t = 30)]
    pub depth: usize,
    /// Networks per width.
    #[arg(long, default_value_t = 4)]
    pub reps: usize,
}

pub fn convergence(resolved: &Resolved, a: &ConvergenceArgs) -> Result<PathBuf, CliError> {
    single_sigma_w(resolved)?;
    require_contraction(resolved)?;
    let xs = a.inputs.load(resolved, 8)?;
    let trace: ConvergenceTrace = match a.axis {
        Axis::Width => width_convergence(
            &resolved.model,
            &xs,
            &a.widths,
            a.depth,
            a.reps,
            resolved.seed,
            &resolved.kernel,
        )?,
        Axis::Depth => {
            let depths = if a.depths.is_empty() {
                (1..=30).collect()
            } else {
                a.depths.clone()
            };
            depth_convergence(&resolved.model, &xs, &depths, &resolved.kernel)?
        }
    };
    let mut run = Run::start(resolved, "convergence", a)?;
    let mut table = CsvTable::new(&["abscissa", "relative_error"]);
    for (x, e) in trace.abscissa.iter().zip(&trace.errors) {
        table.row(&[num(*x), num(*e)]);
    }
    run.dir
        .write("trace", "convergence.csv", &table.into_bytes())?;
    let summary = serde_json::json!({
        "axis": a.axis,
        "fitted_slope": trace.fitted_slope,
        "fitted_ratio": trace.fitted_ratio,
    });
    run.finish(resolved, summary)
}

#[derive(Debug, Args, Serialize)]
pub struct EigenArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,10,20,30")]
    pub depths: Vec<usize>,
    /// Also estimate each level with a network of this width.
    #[arg(long)]
    pub simulation_width: Option<usize>,
}

pub fn eigen(resolved: &Resolved, a: &EigenArgs) -> Result<PathBuf, CliError> {
    let sigma_ws = if resolved.sigma_w_list.is_empty() {
        vec![resolved.model.sigma_w]
    } else {
        resolved.sigma_w_list.clone()
    };
    for &s in &sigma_ws {
        let mut r = resolved.clone();
        r.model.sigma_w = s;
        require_contraction(&r)?;
    }
    let xs = a.inputs.load(resolved, 10)?;
    check_pairwise_distinct(&xs).map_err(|e| CliError::Data(e.to_string()))?;
    let rows = eigen_study(
        &resolved.model,
        &xs,
        &a.depths,
        &sigma_ws,
        a.simulation_width,
        resolved.seed,
        &resolved.kernel,
    )?;
    let mut run = Run::start(resolved, "eigen", a)?;
    let mut table = CsvTable::new(&[
        "sigma_w",
        "depth",
        "lambda_min_theory",
        "lambda_min_simulation",
    ]);
    for r in &rows {
        let depth = r
            .depth
            .map(|d| d.to_string())
            .unwrap_or_else(|| "star".into());
        table.row(&[
            num(r.sigma_w),
            depth,
            num(r.lambda_min_theory),
            opt_num(r.lambda_min_simulation),
        ]);
    }
    run.dir.write("eigen", "eigen.csv", &table.into_bytes())?;
    let all_positive = rows.iter().all(|r| r.lambda_min_theory > 0.0);
    run.finish(
        resolved,
        serde_json::json!({ "rows": rows.len(), "all_positive": all_positive }),
    )
}

#[derive(Debug, Args, Serialize)]
pub struct CoeffsArgs {
    /// Truncation degree N.
    #[arg(long = "N", short = 'N', default_value_t = 40)]
    pub truncation: usize,
    /// Scale c in `phi(sqrt(c + 1) z)`.
    #[arg(long, default_value_t = 0.0)]
    pub scale_c: f64,
    /// Quadrature order, at least 2N + 16.
    #[arg(long = "coeff-order")]
    pub coeff_order: Option<usize>,
    /// Iterations of the composed series.
    #[arg(long, default_value_t = 200)]
    pub compose_iterations: usize,
}

pub fn coeffs(resolved: &Resolved, a: &CoeffsArgs) -> Result<PathBuf, CliError> {
    single_sigma_w(resolved)?;
    if !(a.scale_c.is_finite() && a.scale_c >= 0.0) {
        return Err(CliError::Config(format!(
            "--scale-c must be >= 0, got {}",
            a.scale_c
        )));
    }
    let order = a.coeff_order.unwrap_or(2 * a.truncation + 16);
    let expansion =
        hermite_coefficients(&resolved.model.activation, a.scale_c, a.truncation, order)?;
    let mut report = pd_diagnostic(&expansion);
    report.composed = Some(composed_series(
        &expansion,
        resolved.model.sigma_w,
        a.compose_iterations,
    ));

    let mut run = Run::start(resolved, "coeffs", a)?;
    let mut table = CsvTable::new(&["n", "a_n", "a_n_squared"]);
    for (n, c) in expansion.coefficients.iter().enumerate() {
        table.row(&[n.to_string(), num(*c), num(c * c)]);
    }
    run.dir
        .write("coefficients", "coeffs.csv", &table.into_bytes())?;
    run.dir.write_json(
        "expansion",
        "expansion.json",
        &serde_json::json!({ "expansion": expansion, "pd_report": report }),
    )?;
    let summary = serde_json::json!({
        "parseval_defect": expansion.parseval_defect,
        "verdict": report.verdict,
        "nonzero_even": report.nonzero_even,
        "nonzero_odd": report.nonzero_odd,
    });
    run.finish(resolved, summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    Nngp,
    Linear,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    /// Directory holding the four standard MNIST IDX files.
    #[arg(long, conflicts_with_all = ["train", "test"])]
    pub mnist_dir: Option<PathBuf>,
    /// Training data: IDX images (with --train-labels) or CSV.
    #[arg(long, requires = "test")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long, requires = "train")]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    /// Zero-based label column for CSV data.
    #[arg(long, default_value_t = 0)]
    pub label_column: usize,
    /// Keep the first TRAIN,TEST rows.
    #[arg(long, value_delimiter = ',')]
    pub subset: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub kernel: KernelChoice,
    /// Fit raw one-hot targets instead of centered ones.
    #[arg(long)]
    pub uncentered: bool,
}

fn load_split(
    data: &Path,
    labels: Option<&Path>,
    label_column: usize,
    split: Split,
) -> Result<Dataset, CliError> {
    let d = match labels {
        Some(l) => load_mnist_idx(data, l, split)?,
        None => load_csv(data, label_column, split)?,
    };
    if d.is_empty() {
        return Err(CliError::Data(format!("{}: no rows", data.display())));
    }
    Ok(d)
}

pub fn infer(resolved: &Resolved, a: &InferArgs) -> Result<PathBuf, CliError> {
    single_sigma_w(resolved)?;
    require_contraction(resolved)?;
    let (mut train, mut test) = match (&a.mnist_dir, &a.train, &a.test) {
        (Some(dir), _, _) => {
            let [tri, trl, tei, tel] = deqgp::gp::mnist_paths(dir);
            (
                load_split(&tri, Some(&trl), 0, Split::Train)?,
                load_split(&tei, Some(&tel), 0, Split::Test)?,
            )
        }
        (None, Some(tr), Some(te)) => (
            load_split(tr, a.train_labels.as_deref(), a.label_column, Split::Train)?,
            load_split(te, a.test_labels.as_deref(), a.label_column, Split::Test)?,
        ),
        _ => {
            return Err(CliError::Config(
                "give --mnist-dir or both --train and --test".into(),
            ))
        }
    };
    if train.dim() != test.dim() {
        return Err(CliError::Data(format!(
            "train has dimension {}, test has {}",
            train.dim(),
            test.dim()
        )));
    }
    match a.subset[..] {
        [] => {}
        [n_train, n_test] => {
            train = train.head(n_train);
            test = test.head(n_test);
        }
        _ => return Err(CliError::Config("--subset takes TRAIN,TEST".into())),
    }
    let mut resolved = resolved.clone();
    resolved.model.n_in = train.dim();
    if !resolved.sigma_u_explicit {
        resolved.model.sigma_u = (train.dim() as f64).sqrt();
    }
    resolved.model.n_out = train.num_classes().max(test.num_classes());
    let opts = InferenceOptions {
        centered_targets: !a.uncentered,
        ..InferenceOptions::default()
    };
    let kernels: &[InferenceKernel] = match a.kernel {
        KernelChoice::Nngp => &[InferenceKernel::Nngp],
        KernelChoice::Linear => &[InferenceKernel::Linear],
        KernelChoice::Both => &[InferenceKernel::Nngp, InferenceKernel::Linear],
    };
    let mut outcomes = Vec::new();
    for &k in kernels {
        let outcome = run_inference(&train, &test, &resolved.model, &resolved.kernel, k, &opts)?;
        info!(
            "{k:?}: accuracy {:.4}, jitter {:e}",
            outcome.accuracy, outcome.jitter_used
        );
        outcomes.push(outcome);
    }

    let mut run = Run::start(&resolved, "infer", a)?;
    let classes = resolved.model.n_out;
    let mut header = vec!["kernel".to_string(), "row".to_string()];
    header.extend((0..classes).map(|c| format!("score_{c}")));
    header.extend(["predicted".to_string(), "label".to_string()]);
    let mut table = CsvTable::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for o in &outcomes {
        let name = serde_json::to_value(o.kernel)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let predicted = deqgp::gp::argmax_rows(&o.predictions);
        for (r, (class, label)) in predicted.iter().zip(&test.labels).enumerate() {
            let mut cells = vec![name.clone(), r.to_string()];
            cells.extend(o.predictions.row(r).iter().map(|v| num(*v)));
            cells.push(class.to_string());
            cells.push(label.to_string());
            table.row(&cells);
        }
    }
    run.dir
        .write("predictions", "predictions.csv", &table.into_bytes())?;
    run.dir.write_json("metrics", "metrics.json", &outcomes)?;
    let chance = {
        let y = one_hot(&test.labels, classes, false)?;
        let counts = y.row_sum();
        counts.max() / test.len() as f64
    };
    let summary = serde_json::json!({
        "train_size": train.len(),
        "test_size": test.len(),
        "majority_class_rate": chance,
        "accuracy": outcomes.iter().map(|o| (o.kernel, o.accuracy)).collect::<Vec<_>>(),
    });
    run.finish(&resolved, summary)
}
