//! Experiment configuration: a TOML file with `[model]`, `[kernel]` and
//! `[run]` sections, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use deqgp::{ActivationKind, ExpectationMethod, KernelOptions, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_in: Option<usize>,
    pub n_out: Option<usize>,
    pub width: Option<usize>,
    pub sigma_u: Option<f64>,
    pub sigma_w: Option<f64>,
    pub sigma_v: Option<f64>,
    pub activation: Option<String>,
    /// Coefficients `c_0, c_1, ...` when `activation = "polynomial"`.
    pub polynomial: Option<Vec<f64>>,
    pub fp_tol: Option<f64>,
    pub fp_max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub order: Option<usize>,
    pub kernel_tol: Option<f64>,
    pub max_steps: Option<usize>,
    /// `auto` (closed forms where known) or `quadrature`.
    pub method: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub force: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Flags shared by every subcommand. Each wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parent directory for run directories (default `runs`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Write into exactly this directory instead of a fresh timestamped one.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run even when a contraction constant is >= 1.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true)]
    pub n_in: Option<usize>,
    #[arg(long, global = true)]
    pub n_out: Option<usize>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    #[arg(long, global = true)]
    pub sigma_u: Option<f64>,
    /// One value, or a comma-separated list for `eigen`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub sigma_w: Vec<f64>,
    #[arg(long, global = true)]
    pub sigma_v: Option<f64>,
    /// tanh, relu, erf, identity or polynomial.
    #[arg(long, global = true)]
    pub activation: Option<String>,
    /// Polynomial coefficients, lowest degree first.
    #[arg(
        long,
        global = true,
        value_delimiter = ',',
        allow_negative_numbers = true
    )]
    pub polynomial: Vec<f64>,
    #[arg(long, global = true)]
    pub fp_tol: Option<f64>,
    #[arg(long, global = true)]
    pub fp_max_iter: Option<usize>,
    /// Quadrature order.
    #[arg(long, global = true)]
    pub order: Option<usize>,
    #[arg(long, global = true)]
    pub kernel_tol: Option<f64>,
}

/// Fully merged settings for one run.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub model: ModelConfig,
    pub kernel: KernelOptions,
    pub seed: u64,
    pub force: bool,
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub run_dir: Option<PathBuf>,
    /// Values passed to `--sigma-w` beyond the first.
    #[serde(skip)]
    pub sigma_w_list: Vec<f64>,
    /// Whether `sigma_u` was set rather than defaulted to `sqrt(n_in)`.
    #[serde(skip)]
    pub sigma_u_explicit: bool,
}

fn activation_from(name: &str, coefficients: Option<Vec<f64>>) -> Result<ActivationKind, CliError> {
    if name.eq_ignore_ascii_case("polynomial") {
        let coefficients = coefficients.filter(|c| !c.is_empty()).ok_or_else(|| {
            CliError::Config("activation `polynomial` needs polynomial coefficients".into())
        })?;
        return Ok(ActivationKind::Polynomial { coefficients });
    }
    ActivationKind::from_name(name).map_err(CliError::from)
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let m = &file.model;
        let n_in = self.n_in.or(m.n_in).unwrap_or(10);
        let n_out = self.n_out.or(m.n_out).unwrap_or(1);
        let width = self.width.or(m.width).unwrap_or(1000);
        let mut model = ModelConfig::new(n_in, n_out, width);
        let sigma_u = self.sigma_u.or(m.sigma_u);
        if let Some(v) = sigma_u {
            model.sigma_u = v;
        }
        if let Some(v) = self.sigma_w.first().copied().or(m.sigma_w) {
            model.sigma_w = v;
        }
        if let Some(v) = self.sigma_v.or(m.sigma_v) {
            model.sigma_v = v;
        }
        if let Some(v) = self.fp_tol.or(m.fp_tol) {
            model.fp_tol = v;
        }
        if let Some(v) = self.fp_max_iter.or(m.fp_max_iter) {
            model.fp_max_iter = v;
        }
        let poly = if self.polynomial.is_empty() {
            m.polynomial.clone()
        } else {
            Some(self.polynomial.clone())
        };
        if let Some(name) = self.activation.as_deref().or(m.activation.as_deref()) {
            model.activation = activation_from(name, poly)?;
        }
        let seed = self.seed.or(file.run.seed).unwrap_or(0);
        model.seed = seed;
        model.validate()?;

        let k = &file.kernel;
        let mut kernel = KernelOptions::default();
        if let Some(v) = self.order.or(k.order) {
            kernel.order = v;
        }
        if let Some(v) = self.kernel_tol.or(k.kernel_tol) {
            kernel.kernel_tol = v;
        }
        if let Some(v) = k.max_steps {
            kernel.max_steps = v;
        }
        if let Some(method) = &k.method {
            kernel.method = match method.as_str() {
                "auto" => ExpectationMethod::Auto,
                "quadrature" => ExpectationMethod::Quadrature,
                other => return Err(CliError::Config(format!("unknown kernel method `{other}`"))),
            };
        }
        let force = self.force || file.run.force.unwrap_or(false);
        kernel.force = force;
        let out_dir = self
            .out_dir
            .clone()
            .or(file.run.out_dir)
            .unwrap_or_else(|| PathBuf::from("runs"));
        Ok(Resolved {
            model,
            kernel,
            seed,
            force,
            out_dir,
            run_dir: self.run_dir.clone(),
            sigma_w_list: self.sigma_w.clone(),
            sigma_u_explicit: sigma_u.is_some(),
        })
    }
}
