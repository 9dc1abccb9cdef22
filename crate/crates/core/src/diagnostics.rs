//! Statistical checks of the finite-width simulator against the
//! infinite-width theory: Gaussianity of outputs, kernel convergence in
//! width and depth, and smallest eigenvalues.

use std::f64::consts::PI;

use log::info;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inputs::{check_pairwise_distinct, check_unit};
use crate::kernel::{kernel_recursion, limit_kernel, output_kernel, KernelMatrix, KernelOptions};
use crate::model::ModelConfig;
use crate::rng::{derive_seed, derive_seed2};
use crate::simulator::{
    empirical_kernel, forward_fixed_point, init_params, network_output, EmpiricalMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub sample_count: usize,
}

fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * libm::erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

/// Survival function of the Kolmogorov distribution, `P(K > t)`.
///
/// Uses the alternating series `2 sum (-1)^{k-1} exp(-2 k^2 t^2)` for
/// `t >= 1` and the Jacobi-theta form of the CDF below that, where the
/// alternating series converges slowly. Both stop once a term drops under
/// `1e-12`.
pub fn kolmogorov_survival(t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    let p = if t >= 1.0 {
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * t * t).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-12 {
                break;
            }
        }
        2.0 * sum
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let odd = (2 * k - 1) as f64;
            let term = (-odd * odd * PI * PI / (8.0 * t * t)).exp();
            sum += term;
            if term < 1e-12 {
                break;
            }
        }
        1.0 - (2.0 * PI).sqrt() / t * sum
    };
    p.clamp(0.0, 1.0)
}

/// One-sample KS test against `N(mean, variance)` with the asymptotic
/// p-value at `sqrt(m) D`.
pub fn ks_test(samples: &[f64], mean: f64, variance: f64) -> Result<KsResult> {
    if samples.len() < 8 {
        return Err(Error::Precondition(format!(
            "KS test needs >= 8 samples, got {}",
            samples.len()
        )));
    }
    if !(variance.is_finite() && variance > 0.0) {
        return Err(Error::Precondition(format!(
            "reference variance must be > 0, got {variance}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("KS samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let sd = variance.sqrt();
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x, mean, sd);
            let above = (i + 1) as f64 / m - f;
            let below = f - i as f64 / m;
            above.max(below)
        })
        .fold(0.0, f64::max);
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_survival(m.sqrt() * statistic),
        sample_count: sorted.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub width: usize,
    pub num_nets: usize,
    pub root_seed: u64,
    /// Theoretical output variance `(sigma_v^2 / sigma_w^2) Sigma*(x, x)`.
    pub theoretical_variance: f64,
    pub ks: Vec<KsResult>,
    pub cross_covariance: DMatrix<f64>,
    pub cross_correlation: DMatrix<f64>,
    pub failures: usize,
    /// `samples[k]` holds the outputs of network `k`.
    pub samples: Vec<Vec<f64>>,
    pub mean_iterations: f64,
}

impl GaussianityReport {
    pub fn output_samples(&self, coordinate: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[coordinate]).collect()
    }

    pub fn max_abs_off_diagonal_correlation(&self) -> f64 {
        let n = self.cross_correlation.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    worst = worst.max(self.cross_correlation[(i, j)].abs());
                }
            }
        }
        worst
    }
}

/// Simulates `num_nets` independent networks at input `x` and tests each
/// output coordinate against the limiting Gaussian. Network `k` uses seed
/// `derive_seed(root_seed, k)`.
pub fn gaussianity_experiment(
    config: &ModelConfig,
    x: &DVector<f64>,
    num_nets: usize,
    root_seed: u64,
    opts: &KernelOptions,
) -> Result<GaussianityReport> {
    if num_nets < 100 {
        return Err(Error::Precondition(format!(
            "need >= 100 networks, got {num_nets}"
        )));
    }
    check_unit(std::slice::from_ref(x))?;
    let lim = limit_kernel(std::slice::from_ref(x), config, opts)?;
    let theoretical_variance = output_kernel(&lim.kernel, config).get(0, 0);

    let runs: Vec<Option<(Vec<f64>, usize)>> = (0..num_nets)
        .into_par_iter()
        .map(|k| {
            let params = init_params(config, derive_seed(root_seed, k as u64)).ok()?;
            let fp = forward_fixed_point(&params, x).ok()?;
            if !fp.converged {
                return None;
            }
            let out = network_output(&params, &fp.h_star).ok()?;
            Some((out.iter().copied().collect(), fp.iterations))
        })
        .collect();
    let failures = runs.iter().filter(|r| r.is_none()).count();
    if failures * 100 > num_nets {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: num_nets,
        });
    }
    let ok: Vec<(Vec<f64>, usize)> = runs.into_iter().flatten().collect();
    let samples: Vec<Vec<f64>> = ok.iter().map(|(s, _)| s.clone()).collect();
    let mean_iterations = ok.iter().map(|(_, it)| *it as f64).sum::<f64>() / ok.len() as f64;

    let n_out = config.n_out;
    let ks = (0..n_out)
        .map(|c| {
            let col: Vec<f64> = samples.iter().map(|s| s[c]).collect();
            ks_test(&col, 0.0, theoretical_variance)
        })
        .collect::<Result<Vec<_>>>()?;

    let m = samples.len() as f64;
    let means: Vec<f64> = (0..n_out)
        .map(|c| samples.iter().map(|s| s[c]).sum::<f64>() / m)
        .collect();
    let cross_covariance = DMatrix::from_fn(n_out, n_out, |i, j| {
        samples
            .iter()
            .map(|s| (s[i] - means[i]) * (s[j] - means[j]))
            .sum::<f64>()
            / (m - 1.0)
    });
    let cross_correlation = DMatrix::from_fn(n_out, n_out, |i, j| {
        cross_covariance[(i, j)] / (cross_covariance[(i, i)] * cross_covariance[(j, j)]).sqrt()
    });
    info!(
        "gaussianity: width {} nets {} D[0] = {:.4} p[0] = {:.4}",
        config.width, num_nets, ks[0].statistic, ks[0].p_value
    );
    Ok(GaussianityReport {
        width: config.width,
        num_nets,
        root_seed,
        theoretical_variance,
        ks,
        cross_covariance,
        cross_correlation,
        failures,
        samples,
        mean_iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceAxis {
    Width,
    Depth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub axis: ConvergenceAxis,
    pub abscissa: Vec<f64>,
    pub errors: Vec<f64>,
    /// Log-log least-squares slope (width axis).
    pub fitted_slope: Option<f64>,
    /// Geometric mean of per-step error ratios (depth axis).
    pub fitted_ratio: Option<f64>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Relative Frobenius error of the depth-`depth` empirical kernel against
/// `Sigma*`, averaged over `reps` realizations per width.
pub fn width_convergence(
    config: &ModelConfig,
    inputs: &[DVector<f64>],
    widths: &[usize],
    depth: usize,
    reps: usize,
    root_seed: u64,
    opts: &KernelOptions,
) -> Result<ConvergenceTrace> {
    if widths.len() < 2 || !strictly_increasing(widths) {
        return Err(Error::Precondition(
            "need at least two strictly increasing widths".into(),
        ));
    }
    if reps == 0 {
        return Err(Error::Precondition("reps must be >= 1".into()));
    }
    let reference = limit_kernel(inputs, config, opts)?.kernel;
    let mut errors = Vec::with_capacity(widths.len());
    for (wi, &n) in widths.iter().enumerate() {
        let cfg = config.with_width(n);
        let errs = (0..reps)
            .into_par_iter()
            .map(|r| {
                let params = init_params(&cfg, derive_seed2(root_seed, wi as u64, r as u64))?;
                empirical_kernel(&params, inputs, EmpiricalMode::Depth(depth))?
                    .relative_error(&reference)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = errs.iter().sum::<f64>() / reps as f64;
        info!("width {n}: relative error {mean:.4e}");
        errors.push(mean);
    }
    let abscissa: Vec<f64> = widths.iter().map(|&w| w as f64).collect();
    Ok(ConvergenceTrace {
        axis: ConvergenceAxis::Width,
        fitted_slope: Some(log_log_slope(&abscissa, &errors)),
        fitted_ratio: None,
        abscissa,
        errors,
    })
}

/// Errors below this are at the accuracy floor of the reference `Sigma*`
/// and are excluded from the fitted ratio.
pub fn depth_ratio_floor(opts: &KernelOptions) -> f64 {
    100.0 * opts.kernel_tol
}

/// `||Sigma^l - Sigma*||_F / ||Sigma*||_F` of the theoretical recursion.
pub fn depth_convergence(
    config: &ModelConfig,
    inputs: &[DVector<f64>],
    depths: &[usize],
    opts: &KernelOptions,
) -> Result<ConvergenceTrace> {
    if depths.is_empty() || !strictly_increasing(depths) || depths[0] == 0 {
        return Err(Error::Precondition(
            "depths must be >= 1 and strictly increasing".into(),
        ));
    }
    let reference = limit_kernel(inputs, config, opts)?.kernel;
    let levels = kernel_recursion(inputs, config, opts, *depths.last().expect("non-empty"))?;
    let errors = depths
        .iter()
        .map(|&d| levels[d - 1].relative_error(&reference))
        .collect::<Result<Vec<f64>>>()?;
    let floor = depth_ratio_floor(opts);
    let mut log_sum = 0.0;
    let mut gap = 0.0;
    for i in 1..errors.len() {
        if errors[i] > floor && errors[i - 1] > floor {
            log_sum += (errors[i] / errors[i - 1]).ln();
            gap += (depths[i] - depths[i - 1]) as f64;
        }
    }
    Ok(ConvergenceTrace {
        axis: ConvergenceAxis::Depth,
        abscissa: depths.iter().map(|&d| d as f64).collect(),
        errors,
        fitted_slope: None,
        fitted_ratio: (gap > 0.0).then(|| (log_sum / gap).exp()),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenRow {
    pub sigma_w: f64,
    /// `None` marks the limit kernel `Sigma*`.
    pub depth: Option<usize>,
    pub lambda_min_theory: f64,
    /// Empirical kernel of one sampled network, when a simulation width is given.
    pub lambda_min_simulation: Option<f64>,
}

/// Smallest eigenvalues of `Sigma^l` for each depth and `sigma_w`, plus
/// `Sigma*`. With `simulation_width`, the same quantity for the empirical
/// depth kernel `sigma_w^2 <h^{l-1}, h^{l-1}> / n` of one network.
pub fn eigen_study(
    config: &ModelConfig,
    inputs: &[DVector<f64>],
    depths: &[usize],
    sigma_w_values: &[f64],
    simulation_width: Option<usize>,
    root_seed: u64,
    opts: &KernelOptions,
) -> Result<Vec<EigenRow>> {
    check_unit(inputs)?;
    check_pairwise_distinct(inputs)?;
    if depths.is_empty() || depths.contains(&0) {
        return Err(Error::Precondition("depths must be >= 1".into()));
    }
    let max_depth = *depths.iter().max().expect("non-empty");
    let mut rows = Vec::new();
    for (si, &sw) in sigma_w_values.iter().enumerate() {
        let cfg = config.with_sigma_w(sw);
        let beta = crate::kernel::contraction_beta(&cfg, opts.order.max(16))?;
        if beta >= 1.0 {
            return Err(Error::Precondition(format!(
                "sigma_w = {sw} gives beta = {beta:.4} >= 1"
            )));
        }
        let levels = kernel_recursion(inputs, &cfg, opts, max_depth)?;
        let star = limit_kernel(inputs, &cfg, opts)?.kernel;
        let params = match simulation_width {
            Some(n) => Some(init_params(
                &cfg.with_width(n),
                derive_seed(root_seed, si as u64),
            )?),
            None => None,
        };
        let simulate = |mode: EmpiricalMode| -> Result<Option<f64>> {
            match &params {
                Some(p) => Ok(Some(empirical_kernel(p, inputs, mode)?.min_eigenvalue())),
                None => Ok(None),
            }
        };
        for &d in depths {
            let sim = if d >= 2 {
                simulate(EmpiricalMode::Depth(d - 1))?
            } else {
                None
            };
            rows.push(EigenRow {
                sigma_w: sw,
                depth: Some(d),
                lambda_min_theory: levels[d - 1].min_eigenvalue(),
                lambda_min_simulation: sim,
            });
        }
        // The fixed-point empirical kernel carries sigma_v^2; rescale to the
        // sigma_w^2 convention of Sigma*.
        let sim_star = simulate(EmpiricalMode::FixedPoint)?.map(|v| v * (sw / cfg.sigma_v).powi(2));
        rows.push(EigenRow {
            sigma_w: sw,
            depth: None,
            lambda_min_theory: star.min_eigenvalue(),
            lambda_min_simulation: sim_star,
        });
    }
    Ok(rows)
}

/// Relative Frobenius errors of the two empirical routes to `Sigma*`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommutingLimits {
    /// Fixed-point kernel against the output-scaled `Sigma*`.
    pub fixed_point_vs_star: f64,
    /// Depth-`l` kernel against `Sigma^{l+1}`.
    pub depth_vs_recursion: f64,
    /// Fixed-point route against depth route, both on the `Sigma*` scale.
    pub routes_vs_each_other: f64,
}

pub fn commuting_limits(
    config: &ModelConfig,
    inputs: &[DVector<f64>],
    depth: usize,
    seed: u64,
    opts: &KernelOptions,
) -> Result<CommutingLimits> {
    let star = limit_kernel(inputs, config, opts)?.kernel;
    let levels = kernel_recursion(inputs, config, opts, depth + 1)?;
    let params = init_params(config, seed)?;
    let fixed = empirical_kernel(&params, inputs, EmpiricalMode::FixedPoint)?;
    let deep = empirical_kernel(&params, inputs, EmpiricalMode::Depth(depth))?;
    let out_star = output_kernel(&star, config);
    let fixed_on_star_scale: KernelMatrix = fixed.scaled((config.sigma_w / config.sigma_v).powi(2));
    Ok(CommutingLimits {
        fixed_point_vs_star: fixed.relative_error(&out_star)?,
        depth_vs_recursion: deep.relative_error(&levels[depth])?,
        routes_vs_each_other: fixed_on_star_scale.relative_error(&deep)?,
    })
}
