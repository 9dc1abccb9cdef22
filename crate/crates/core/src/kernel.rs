//! The infinite-width kernel recursion and its limit.
//!
//! `Sigma^1(x, x') = sigma_u^2 <x, x'> / n_in`, and for every later level
//! `Sigma^{l+1}(x, x') = sigma_w^2 E[phi(u) phi(v)]` where `(u, v)` is a
//! centered Gaussian pair with covariance `Sigma^1` (first step) or
//! `Sigma^l + Sigma^1` (input injection, all later steps).

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inputs::{check_unit, fingerprint};
use crate::model::{ActivationKind, ModelConfig};
use crate::quadrature::NormalRule;

/// Accumulated-rounding slack on the Cauchy–Schwarz bound of a spec.
pub const CS_SLACK: f64 = 1e-12;

/// Truncation of the real line for the kink-aware rules.
const SPLIT_HALF_WIDTH: f64 = 10.0;

/// Centered bivariate Gaussian, described by its covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateGaussianSpec {
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

impl BivariateGaussianSpec {
    /// Validates the covariance. `|cov|` may exceed `sqrt(var_a var_b)` by
    /// at most [`CS_SLACK`]; such values are clamped onto the boundary.
    pub fn new(var_a: f64, var_b: f64, cov: f64) -> Result<Self> {
        if !(var_a.is_finite() && var_b.is_finite() && cov.is_finite()) {
            return Err(Error::Precondition(
                "bivariate spec has non-finite entries".into(),
            ));
        }
        if var_a < 0.0 || var_b < 0.0 {
            return Err(Error::Precondition(format!(
                "negative variance in bivariate spec ({var_a}, {var_b})"
            )));
        }
        let bound = (var_a * var_b).sqrt();
        if cov.abs() > bound + CS_SLACK {
            return Err(Error::Precondition(format!(
                "covariance {cov} exceeds the Cauchy-Schwarz bound {bound}"
            )));
        }
        Ok(BivariateGaussianSpec {
            var_a,
            var_b,
            cov: cov.clamp(-bound, bound),
        })
    }

    pub fn standard(rho: f64) -> Result<Self> {
        Self::new(1.0, 1.0, rho)
    }

    /// Lower Cholesky factor: `u = a z1`, `v = b z1 + d z2`.
    fn factor(&self) -> (f64, f64, f64) {
        let a = self.var_a.sqrt();
        if a == 0.0 {
            return (0.0, 0.0, self.var_b.sqrt());
        }
        let b = self.cov / a;
        let d = (self.var_b - b * b).max(0.0).sqrt();
        (a, b, d)
    }
}

/// `E[phi(u) phi(v)]` by tensor-product quadrature on the Cholesky factor
/// `u = a z1`, `v = b z1 + d z2`.
///
/// Polynomial activations use `order`-point Gauss–Hermite per axis, which
/// is exact once `2 order` exceeds the degree. Everything else uses
/// composite Gauss–Legendre on `[-10, 10]` with `max(order / 4, 8)` nodes
/// per panel, split at the kinks. Panels are at most `1 / scale` wide on an
/// axis scaled by `scale`, which keeps the nearest complex singularity of
/// tanh a fixed number of panel widths away. A perfectly correlated pair
/// collapses to a one-dimensional rule.
pub fn bivariate_expectation(
    activation: &ActivationKind,
    spec: &BivariateGaussianSpec,
    order: usize,
) -> Result<f64> {
    if order < 2 {
        return Err(Error::Precondition(format!(
            "quadrature order must be >= 2, got {order}"
        )));
    }
    let spec = BivariateGaussianSpec::new(spec.var_a, spec.var_b, spec.cov)?;
    let (a, b, d) = spec.factor();
    let phi = |x: f64| activation.eval(x);

    if activation.polynomial_degree().is_some() {
        let rule = NormalRule::hermite_cached(order);
        let inner = |z1: f64| -> f64 {
            if d == 0.0 {
                phi(b * z1)
            } else {
                rule.expect(|z2| phi(b * z1 + d * z2))
            }
        };
        if a == 0.0 {
            return Ok(phi(0.0) * inner(0.0));
        }
        return Ok(rule.expect(|z1| phi(a * z1) * inner(z1)));
    }

    let per_panel = (order / 4).max(8);
    let kinks = activation.kinks();
    let panel = |scale: f64| 1.0f64.min(1.0 / scale);
    let inner_panel = panel(d);
    // Without kinks the inner rule does not depend on z1.
    let shared = kinks
        .is_empty()
        .then(|| NormalRule::split_panels(&[], SPLIT_HALF_WIDTH, per_panel, inner_panel));
    let inner = |z1: f64| -> f64 {
        if d == 0.0 {
            return phi(b * z1);
        }
        let f = |z2: f64| phi(b * z1 + d * z2);
        match &shared {
            Some(rule) => rule.expect(f),
            None => {
                let breaks: Vec<f64> = kinks.iter().map(|k| (k - b * z1) / d).collect();
                NormalRule::split_panels(&breaks, SPLIT_HALF_WIDTH, per_panel, inner_panel)
                    .expect(f)
            }
        }
    };
    if a == 0.0 {
        return Ok(phi(0.0) * inner(0.0));
    }
    let mut outer_breaks: Vec<f64> = kinks.iter().map(|k| k / a).collect();
    // The inner expectation bends over a width d/|b| around z1 = k/b; for
    // strongly correlated pairs grade the outer panels towards it.
    if b != 0.0 && d < b.abs() {
        let s = d / b.abs();
        for k in kinks {
            let c = k / b;
            outer_breaks.push(c);
            for j in -2..=6 {
                let off = s * 2f64.powi(j);
                outer_breaks.push(c - off);
                outer_breaks.push(c + off);
            }
        }
    }
    let outer = NormalRule::split_panels(
        &outer_breaks,
        SPLIT_HALF_WIDTH,
        per_panel,
        panel(a.max(b.abs())),
    );
    Ok(outer.expect(|z1| phi(a * z1) * inner(z1)))
}

/// Exact `E[phi(u) phi(v)]` for activations with a known closed form.
pub fn closed_form_expectation(
    activation: &ActivationKind,
    spec: &BivariateGaussianSpec,
) -> Result<f64> {
    let spec = BivariateGaussianSpec::new(spec.var_a, spec.var_b, spec.cov)?;
    match activation {
        ActivationKind::Identity => Ok(spec.cov),
        ActivationKind::Relu => {
            let scale = (spec.var_a * spec.var_b).sqrt();
            if scale == 0.0 {
                return Ok(0.0);
            }
            let rho = (spec.cov / scale).clamp(-1.0, 1.0);
            let theta = rho.acos();
            Ok(scale / (2.0 * PI) * (theta.sin() + (PI - theta) * rho))
        }
        ActivationKind::Erf => {
            let denom = ((1.0 + 2.0 * spec.var_a) * (1.0 + 2.0 * spec.var_b)).sqrt();
            Ok(2.0 / PI * (2.0 * spec.cov / denom).clamp(-1.0, 1.0).asin())
        }
        other => Err(Error::Unsupported(format!(
            "no closed-form Gaussian expectation for the {} activation",
            other.name()
        ))),
    }
}

pub fn has_closed_form(activation: &ActivationKind) -> bool {
    matches!(
        activation,
        ActivationKind::Identity | ActivationKind::Relu | ActivationKind::Erf
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectationMethod {
    /// Closed form where one exists, quadrature otherwise.
    Auto,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    pub order: usize,
    pub kernel_tol: f64,
    pub max_steps: usize,
    /// Run the limit iteration even when the contraction constant is >= 1.
    pub force: bool,
    pub method: ExpectationMethod,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            order: 64,
            kernel_tol: 1e-10,
            max_steps: 500,
            force: false,
            method: ExpectationMethod::Auto,
        }
    }
}

impl KernelOptions {
    pub fn expectation(
        &self,
        activation: &ActivationKind,
        spec: &BivariateGaussianSpec,
    ) -> Result<f64> {
        match self.method {
            ExpectationMethod::Auto if has_closed_form(activation) => {
                closed_form_expectation(activation, spec)
            }
            _ => bivariate_expectation(activation, spec, self.order),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "level", content = "depth", rename_all = "snake_case")]
pub enum KernelLevel {
    Sigma1,
    SigmaL(usize),
    SigmaStar,
    Empirical,
}

impl KernelLevel {
    pub fn label(&self) -> String {
        match self {
            KernelLevel::Sigma1 => "sigma1".into(),
            KernelLevel::SigmaL(l) => format!("sigma{l}"),
            KernelLevel::SigmaStar => "sigma_star".into(),
            KernelLevel::Empirical => "empirical".into(),
        }
    }
}

/// Symmetric kernel matrix over an input set.
///
/// Only the upper triangle is stored; reads mirror it, so symmetry is
/// exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "KernelMatrixRepr", try_from = "KernelMatrixRepr")]
pub struct KernelMatrix {
    size: usize,
    upper: Vec<f64>,
    pub level: KernelLevel,
    pub inputs_id: u64,
}

#[inline]
fn packed_index(size: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * size - i * (i + 1) / 2 + j
}

impl KernelMatrix {
    /// Builds a matrix from an entry function evaluated on the upper triangle.
    pub fn from_fn(
        size: usize,
        level: KernelLevel,
        inputs_id: u64,
        f: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let mut upper = Vec::with_capacity(size * (size + 1) / 2);
        for i in 0..size {
            for j in i..size {
                upper.push(f(i, j));
            }
        }
        KernelMatrix {
            size,
            upper,
            level,
            inputs_id,
        }
    }

    /// Parallel fallible variant of [`KernelMatrix::from_fn`].
    pub fn try_from_fn_par(
        size: usize,
        level: KernelLevel,
        inputs_id: u64,
        f: impl Fn(usize, usize) -> Result<f64> + Sync,
    ) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = (0..size)
            .flat_map(|i| (i..size).map(move |j| (i, j)))
            .collect();
        let upper = pairs
            .par_iter()
            .map(|&(i, j)| f(i, j))
            .collect::<Result<Vec<f64>>>()?;
        Ok(KernelMatrix {
            size,
            upper,
            level,
            inputs_id,
        })
    }

    /// Takes the upper triangle of `m` (the lower triangle is ignored).
    pub fn from_dmatrix(m: &DMatrix<f64>, level: KernelLevel, inputs_id: u64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Precondition(format!(
                "kernel matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self::from_fn(m.nrows(), level, inputs_id, |i, j| m[(i, j)]))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.upper[packed_index(self.size, i, j)]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.size, self.size, |i, j| self.get(i, j))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.get(i, i)).collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        KernelMatrix {
            upper: self.upper.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn with_level(mut self, level: KernelLevel) -> Self {
        self.level = level;
        self
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.size {
            for j in 0..self.size {
                let v = self.get(i, j);
                s += v * v;
            }
        }
        s.sqrt()
    }

    fn check_shape(&self, other: &KernelMatrix) -> Result<()> {
        if self.size != other.size {
            return Err(Error::Precondition(format!(
                "kernel sizes differ ({} vs {})",
                self.size, other.size
            )));
        }
        Ok(())
    }

    /// `||self - other||_F`.
    pub fn frobenius_distance(&self, other: &KernelMatrix) -> Result<f64> {
        self.check_shape(other)?;
        let mut s = 0.0;
        for i in 0..self.size {
            for j in 0..self.size {
                let v = self.get(i, j) - other.get(i, j);
                s += v * v;
            }
        }
        Ok(s.sqrt())
    }

    /// `||self - reference||_F / ||reference||_F`.
    pub fn relative_error(&self, reference: &KernelMatrix) -> Result<f64> {
        Ok(self.frobenius_distance(reference)? / reference.frobenius_norm())
    }

    pub fn max_abs_diff(&self, other: &KernelMatrix) -> Result<f64> {
        self.check_shape(other)?;
        Ok(self
            .upper
            .iter()
            .zip(&other.upper)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_dmatrix())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(f64::NAN)
    }

    /// Largest violation of `K_ij^2 <= K_ii K_jj`.
    pub fn cauchy_schwarz_violation(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.size {
            for j in i..self.size {
                let v = self.get(i, j).powi(2) - self.get(i, i) * self.get(j, j);
                worst = worst.max(v);
            }
        }
        worst
    }

    /// Row-major full matrix, 17 significant digits, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.size {
            for j in 0..self.size {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{:.16e}", self.get(i, j)).expect("writing to a String cannot fail");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct KernelMatrixRepr {
    level: KernelLevel,
    inputs_id: String,
    size: usize,
    entries: Vec<Vec<f64>>,
}

impl From<KernelMatrix> for KernelMatrixRepr {
    fn from(k: KernelMatrix) -> Self {
        KernelMatrixRepr {
            level: k.level,
            inputs_id: format!("{:016x}", k.inputs_id),
            size: k.size,
            entries: (0..k.size)
                .map(|i| (0..k.size).map(|j| k.get(i, j)).collect())
                .collect(),
        }
    }
}

impl TryFrom<KernelMatrixRepr> for KernelMatrix {
    type Error = String;

    fn try_from(r: KernelMatrixRepr) -> std::result::Result<Self, String> {
        if r.entries.len() != r.size || r.entries.iter().any(|row| row.len() != r.size) {
            return Err(format!("entries do not form a {0}x{0} matrix", r.size));
        }
        for i in 0..r.size {
            for j in 0..i {
                if r.entries[i][j].to_bits() != r.entries[j][i].to_bits() {
                    return Err(format!("entries ({i},{j}) and ({j},{i}) differ"));
                }
            }
        }
        let inputs_id = u64::from_str_radix(&r.inputs_id, 16).map_err(|e| e.to_string())?;
        Ok(KernelMatrix::from_fn(r.size, r.level, inputs_id, |i, j| {
            r.entries[i][j]
        }))
    }
}

/// Input kernel `sigma_u^2 <x_i, x_j> / n_in`.
pub fn sigma1(inputs: &[DVector<f64>], sigma_u: f64) -> Result<KernelMatrix> {
    check_unit(inputs)?;
    let n_in = inputs[0].len() as f64;
    let scale = sigma_u * sigma_u / n_in;
    Ok(KernelMatrix::from_fn(
        inputs.len(),
        KernelLevel::Sigma1,
        fingerprint(inputs),
        |i, j| scale * inputs[i].dot(&inputs[j]),
    ))
}

/// One application of the kernel map. `Sigma1` input produces `Sigma^2`;
/// `SigmaL(l)` produces `SigmaL(l + 1)`.
pub fn kernel_step(
    current: &KernelMatrix,
    sigma1: &KernelMatrix,
    config: &ModelConfig,
    opts: &KernelOptions,
) -> Result<KernelMatrix> {
    current.check_shape(sigma1)?;
    if sigma1.level != KernelLevel::Sigma1 {
        return Err(Error::Precondition(
            "second argument must be the Sigma1 kernel".into(),
        ));
    }
    let (next_level, inject) = match current.level {
        KernelLevel::Sigma1 => (KernelLevel::SigmaL(2), false),
        KernelLevel::SigmaL(l) => (KernelLevel::SigmaL(l + 1), true),
        other => {
            return Err(Error::Precondition(format!(
                "kernel_step needs a Sigma1 or SigmaL input, got {}",
                other.label()
            )))
        }
    };
    let effective = |i: usize, j: usize| -> f64 {
        if inject {
            current.get(i, j) + sigma1.get(i, j)
        } else {
            sigma1.get(i, j)
        }
    };
    let sw2 = config.sigma_w * config.sigma_w;
    KernelMatrix::try_from_fn_par(current.size(), next_level, current.inputs_id, |i, j| {
        let spec = BivariateGaussianSpec::new(effective(i, i), effective(j, j), effective(i, j))?;
        Ok(sw2 * opts.expectation(&config.activation, &spec)?)
    })
}

/// `Sigma^1, ..., Sigma^max_depth`.
pub fn kernel_recursion(
    inputs: &[DVector<f64>],
    config: &ModelConfig,
    opts: &KernelOptions,
    max_depth: usize,
) -> Result<Vec<KernelMatrix>> {
    if max_depth == 0 {
        return Err(Error::Precondition("recursion depth must be >= 1".into()));
    }
    let s1 = sigma1(inputs, config.sigma_u)?;
    let mut levels = vec![s1.clone()];
    while levels.len() < max_depth {
        let next = kernel_step(levels.last().expect("non-empty"), &s1, config, opts)?;
        levels.push(next);
    }
    Ok(levels)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitKernel {
    pub kernel: KernelMatrix,
    /// Number of kernel-map applications performed.
    pub steps: usize,
    /// Max entrywise change `|Sigma^{l+1} - Sigma^l|` after each step past `Sigma^2`.
    pub diff_trace: Vec<f64>,
    /// `Sigma^2`, kept for the diagonal bound `Sigma* <= (1 + 1/beta) Sigma^2`.
    pub sigma2: KernelMatrix,
    pub beta: f64,
}

/// Iterates the kernel map to its fixed point `Sigma*`.
pub fn limit_kernel(
    inputs: &[DVector<f64>],
    config: &ModelConfig,
    opts: &KernelOptions,
) -> Result<LimitKernel> {
    config.validate()?;
    let beta = contraction_beta(config, opts.order.max(16))?;
    if beta >= 1.0 && !opts.force {
        return Err(Error::Precondition(format!(
            "kernel contraction constant beta = {beta:.4} >= 1; pass force to iterate anyway"
        )));
    }
    let s1 = sigma1(inputs, config.sigma_u)?;
    let sigma2 = kernel_step(&s1, &s1, config, opts)?;
    let mut current = sigma2.clone();
    let mut trace = Vec::new();
    let mut steps = 1;
    loop {
        if steps >= opts.max_steps {
            return Err(Error::KernelNotConverged {
                max_steps: opts.max_steps,
                trace,
            });
        }
        let next = kernel_step(&current, &s1, config, opts)?;
        steps += 1;
        let diff = next.max_abs_diff(&current)?;
        trace.push(diff);
        current = next;
        if diff <= opts.kernel_tol {
            break;
        }
    }
    Ok(LimitKernel {
        kernel: current.with_level(KernelLevel::SigmaStar),
        steps,
        diff_trace: trace,
        sigma2,
        beta,
    })
}

/// `E |z|^2 |z^2 - 1|` for standard normal `z`, split at `z = +-1`.
pub fn contraction_moment(order: usize) -> f64 {
    let per_panel = (order / 2).max(16);
    NormalRule::split(&[-1.0, 1.0], 12.0, per_panel).expect(|z| z * z * (z * z - 1.0).abs())
}

/// Kernel-map contraction constant `(sigma_w^2 / 2) E|z|^2 |z^2 - 1|`.
pub fn contraction_beta_for(sigma_w: f64, order: usize) -> Result<f64> {
    if order < 16 {
        return Err(Error::Precondition(format!(
            "contraction_beta needs order >= 16, got {order}"
        )));
    }
    Ok(0.5 * sigma_w * sigma_w * contraction_moment(order))
}

pub fn contraction_beta(config: &ModelConfig, order: usize) -> Result<f64> {
    contraction_beta_for(config.sigma_w, order)
}

/// Output covariance of the network, `(sigma_v^2 / sigma_w^2) Sigma*`.
///
/// `Sigma*` carries the hidden-layer factor `sigma_w^2`; the readout draws
/// its weights with variance `sigma_v^2 / n` instead.
pub fn output_kernel(sigma_star: &KernelMatrix, config: &ModelConfig) -> KernelMatrix {
    sigma_star.scaled((config.sigma_v / config.sigma_w).powi(2))
}

/// The limit kernel as a function of the input kernel value.
///
/// On the sphere every diagonal entry of every level is the same, so an
/// off-diagonal entry of `Sigma*` depends only on `t = Sigma^1(x, x')`.
/// The map is tabulated at Chebyshev–Lobatto nodes on `[-s, s]`
/// (`s = sigma_u^2 / n_in`) and evaluated by barycentric interpolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DotProductKernel {
    pub sigma1_diag: f64,
    /// The common diagonal value `Sigma*(x, x)`.
    pub diagonal: f64,
    nodes: Vec<f64>,
    values: Vec<f64>,
}

impl DotProductKernel {
    /// Tabulates `Sigma*` at `num_nodes` nodes (at least 3).
    pub fn limit(config: &ModelConfig, opts: &KernelOptions, num_nodes: usize) -> Result<Self> {
        config.validate()?;
        let beta = contraction_beta(config, opts.order.max(16))?;
        if beta >= 1.0 && !opts.force {
            return Err(Error::Precondition(format!(
                "kernel contraction constant beta = {beta:.4} >= 1; pass force to iterate anyway"
            )));
        }
        let num_nodes = num_nodes.max(3);
        let s = config.sigma1_diag();
        let sw2 = config.sigma_w * config.sigma_w;

        // Diagonal sequence, shared by every input on the sphere.
        let mut diag_seq = vec![
            sw2 * opts.expectation(&config.activation, &BivariateGaussianSpec::new(s, s, s)?)?,
        ];
        loop {
            let v = diag_seq.last().copied().expect("non-empty") + s;
            let next = sw2
                * opts.expectation(&config.activation, &BivariateGaussianSpec::new(v, v, v)?)?;
            let diff = (next - diag_seq.last().copied().expect("non-empty")).abs();
            diag_seq.push(next);
            if diff <= opts.kernel_tol {
                break;
            }
            if diag_seq.len() >= opts.max_steps {
                return Err(Error::KernelNotConverged {
                    max_steps: opts.max_steps,
                    trace: vec![diff],
                });
            }
        }
        let diagonal = *diag_seq.last().expect("non-empty");

        let m = num_nodes - 1;
        let nodes: Vec<f64> = (0..=m)
            .map(|k| -s * (PI * k as f64 / m as f64).cos())
            .collect();
        let values = nodes
            .par_iter()
            .map(|&t| -> Result<f64> {
                let mut k = sw2
                    * opts
                        .expectation(&config.activation, &BivariateGaussianSpec::new(s, s, t)?)?;
                let mut level = 0;
                loop {
                    let v = diag_seq[level.min(diag_seq.len() - 1)] + s;
                    let next = sw2
                        * opts.expectation(
                            &config.activation,
                            &BivariateGaussianSpec::new(v, v, k + t)?,
                        )?;
                    let diff = (next - k).abs();
                    k = next;
                    level += 1;
                    if diff <= opts.kernel_tol && level + 1 >= diag_seq.len() {
                        return Ok(k);
                    }
                    if level >= opts.max_steps {
                        return Err(Error::KernelNotConverged {
                            max_steps: opts.max_steps,
                            trace: vec![diff],
                        });
                    }
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(DotProductKernel {
            sigma1_diag: s,
            diagonal,
            nodes,
            values,
        })
    }

    /// Evaluates the map at `Sigma^1` value `t` (clamped onto `[-s, s]`).
    pub fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(-self.sigma1_diag, self.sigma1_diag);
        let m = self.nodes.len() - 1;
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, (&x, &f)) in self.nodes.iter().zip(&self.values).enumerate() {
            let dx = t - x;
            if dx == 0.0 {
                return f;
            }
            let mut w = if k % 2 == 0 { 1.0 } else { -1.0 };
            if k == 0 || k == m {
                w *= 0.5;
            }
            let c = w / dx;
            num += c * f;
            den += c;
        }
        num / den
    }

    /// Kernel value for two unit inputs.
    pub fn between(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.eval(self.sigma1_diag * x.dot(y))
    }

    /// Gram matrix over unit inputs stored as rows of `rows`.
    pub fn gram_rows(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let g = rows * rows.transpose();
        let n = g.nrows();
        let mut out = DMatrix::zeros(n, n);
        let upper: Vec<(usize, usize, f64)> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let g = &g;
                (i..n).map(move |j| (i, j, self.eval(self.sigma1_diag * g[(i, j)])))
            })
            .collect();
        for (i, j, v) in upper {
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
        out
    }

    /// Cross kernel between rows of `a` and rows of `b`.
    pub fn cross_rows(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = a * b.transpose();
        g.as_mut_slice()
            .par_iter_mut()
            .for_each(|v| *v = self.eval(self.sigma1_diag * *v));
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputs::random_unit_inputs;

    fn unit_relu(rho: f64) -> f64 {
        ((1.0 - rho * rho).sqrt() + rho * (PI - rho.acos())) / (2.0 * PI)
    }

    #[test]
    fn spec_validation_and_clamping() {
        assert!(BivariateGaussianSpec::new(1.0, 1.0, 1.0 + 1e-13).is_ok());
        assert_eq!(
            BivariateGaussianSpec::new(1.0, 1.0, 1.0 + 1e-13)
                .unwrap()
                .cov,
            1.0
        );
        assert!(BivariateGaussianSpec::new(1.0, 1.0, 1.0 + 1e-9).is_err());
        assert!(BivariateGaussianSpec::new(-1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn identity_expectation_is_covariance() {
        for &(a, b, c) in &[
            (1.0, 1.0, 0.3),
            (2.0, 0.5, -0.7),
            (0.0, 3.0, 0.0),
            (4.0, 1.0, 2.0),
        ] {
            let spec = BivariateGaussianSpec::new(a, b, c).unwrap();
            let q = bivariate_expectation(&ActivationKind::Identity, &spec, 64).unwrap();
            assert!((q - c).abs() <= 1e-12, "{q} vs {c}");
        }
        assert_eq!(
            closed_form_expectation(
                &ActivationKind::Identity,
                &BivariateGaussianSpec::new(1.0, 1.0, 0.3).unwrap()
            )
            .unwrap(),
            0.3
        );
    }

    #[test]
    fn relu_unit_values() {
        let relu = ActivationKind::Relu;
        let one = bivariate_expectation(&relu, &BivariateGaussianSpec::standard(1.0).unwrap(), 64)
            .unwrap();
        assert!((one - 0.5).abs() < 1e-12, "{one}");
        let zero =
            closed_form_expectation(&relu, &BivariateGaussianSpec::standard(0.0).unwrap()).unwrap();
        assert!((zero - 1.0 / (2.0 * PI)).abs() < 1e-15);
        for &rho in &[-0.95, -0.5, 0.0, 0.3, 0.9, 0.999] {
            let q =
                bivariate_expectation(&relu, &BivariateGaussianSpec::standard(rho).unwrap(), 64)
                    .unwrap();
            assert!(
                (q - unit_relu(rho)).abs() < 1e-12,
                "rho {rho}: {q} vs {}",
                unit_relu(rho)
            );
        }
    }

    #[test]
    fn erf_independent_is_zero() {
        let v = closed_form_expectation(
            &ActivationKind::Erf,
            &BivariateGaussianSpec::standard(0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(v, 0.0);
        assert!(matches!(
            closed_form_expectation(
                &ActivationKind::Tanh,
                &BivariateGaussianSpec::standard(0.0).unwrap()
            ),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn closed_forms_match_quadrature_on_scaled_specs() {
        for act in [ActivationKind::Relu, ActivationKind::Erf] {
            for &(a, b, r) in &[
                (1e-6, 1e-6, 0.2),
                (100.0, 100.0, -0.4),
                (0.3, 7.0, 0.99),
                (2.0, 0.01, -1.0),
                (5.0, 5.0, 1.0),
            ] {
                let spec = BivariateGaussianSpec::new(a, b, r * (a * b).sqrt()).unwrap();
                let q = bivariate_expectation(&act, &spec, 64).unwrap();
                let c = closed_form_expectation(&act, &spec).unwrap();
                assert!((q - c).abs() <= 1e-8, "{act:?} {spec:?}: {q} vs {c}");
            }
        }
    }

    #[test]
    fn degenerate_variance_collapses() {
        let spec = BivariateGaussianSpec::new(0.0, 2.0, 0.0).unwrap();
        let v = bivariate_expectation(&ActivationKind::Tanh, &spec, 32).unwrap();
        assert_eq!(v, 0.0);
        let shifted = ActivationKind::Polynomial {
            coefficients: vec![1.0, 0.0, 1.0],
        };
        // phi(0) * E[1 + v^2] = 1 + 2
        let v = bivariate_expectation(&shifted, &spec, 32).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sigma1_examples() {
        let e = |k: usize| DVector::from_fn(3, |i, _| if i == k { 1.0 } else { 0.0 });
        let x = e(0);
        let k = sigma1(&[x.clone(), e(1), -x], 3f64.sqrt()).unwrap();
        assert!((k.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(k.get(0, 1), 0.0);
        assert!((k.get(0, 2) + k.get(0, 0)).abs() < 1e-15);
        assert!(sigma1(&[DVector::from_element(3, 1.0)], 1.0).is_err());
    }

    #[test]
    fn identity_recursion_is_geometric() {
        let xs = random_unit_inputs(4, 5, 11);
        let mut cfg = ModelConfig::new(4, 1, 8).with_activation(ActivationKind::Identity);
        cfg.sigma_w = 0.3;
        let levels = kernel_recursion(&xs, &cfg, &KernelOptions::default(), 8).unwrap();
        let s1 = &levels[0];
        let q = cfg.sigma_w * cfg.sigma_w;
        for (l, k) in levels.iter().enumerate().skip(1) {
            // Sigma^{l+1} = q (Sigma^l + Sigma^1) with Sigma^2 = q Sigma^1:
            // Sigma^{l+1} = (q + q^2 + ... + q^l) Sigma^1.
            let factor: f64 = (1..=l).map(|p| q.powi(p as i32)).sum();
            for i in 0..5 {
                for j in 0..5 {
                    assert!((k.get(i, j) - factor * s1.get(i, j)).abs() < 1e-14);
                }
            }
        }
        let lim = limit_kernel(&xs, &cfg, &KernelOptions::default()).unwrap();
        let factor = q / (1.0 - q);
        for i in 0..5 {
            for j in 0..5 {
                assert!((lim.kernel.get(i, j) - factor * s1.get(i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kernel_step_rejects_bad_levels() {
        let xs = random_unit_inputs(3, 2, 1);
        let cfg = ModelConfig::new(3, 1, 8);
        let s1 = sigma1(&xs, cfg.sigma_u).unwrap();
        let star = s1.clone().with_level(KernelLevel::SigmaStar);
        assert!(kernel_step(&star, &s1, &cfg, &KernelOptions::default()).is_err());
        let other = sigma1(&random_unit_inputs(3, 3, 2), cfg.sigma_u).unwrap();
        assert!(kernel_step(&s1, &other, &cfg, &KernelOptions::default()).is_err());
    }

    #[test]
    fn tanh_step_properties() {
        let xs = random_unit_inputs(6, 6, 5);
        let cfg = ModelConfig::new(6, 1, 8);
        let opts = KernelOptions::default();
        let levels = kernel_recursion(&xs, &cfg, &opts, 12).unwrap();
        let beta = contraction_beta(&cfg, 64).unwrap();
        for (l, k) in levels.iter().enumerate() {
            assert!(k.cauchy_schwarz_violation() <= 1e-10);
            let d = k.diagonal();
            assert!(
                d.iter().all(|v| (v - d[0]).abs() <= 1e-10),
                "level {l}: {d:?}"
            );
            assert!(d[0] > 0.0);
        }
        for l in 2..levels.len() - 1 {
            let up = (levels[l + 1].get(0, 0) - levels[l].get(0, 0)).abs();
            let down = (levels[l].get(0, 0) - levels[l - 1].get(0, 0)).abs();
            assert!(
                up <= beta * down + 1e-15,
                "level {l}: {up} > {beta} * {down}"
            );
        }
    }

    #[test]
    fn limit_kernel_bounds() {
        let xs = random_unit_inputs(6, 6, 9);
        let cfg = ModelConfig::new(6, 1, 8);
        let lim = limit_kernel(&xs, &cfg, &KernelOptions::default()).unwrap();
        let beta = lim.beta;
        let ratios: Vec<f64> = lim.diff_trace.windows(2).map(|w| w[1] / w[0]).collect();
        let tail = &ratios[ratios.len().saturating_sub(3)..];
        assert!(tail.iter().all(|r| *r <= beta + 0.02), "{ratios:?}");
        for i in 0..6 {
            let star = lim.kernel.get(i, i);
            assert!(star > 0.0);
            assert!(star <= (1.0 + 1.0 / beta) * lim.sigma2.get(i, i));
        }
        assert_eq!(lim.kernel.level, KernelLevel::SigmaStar);
    }

    #[test]
    fn limit_kernel_refuses_non_contracting_config() {
        let xs = random_unit_inputs(3, 3, 1);
        let cfg = ModelConfig::new(3, 1, 8).with_sigma_w(1.0);
        assert!(matches!(
            limit_kernel(&xs, &cfg, &KernelOptions::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn limit_kernel_reports_non_convergence() {
        let xs = random_unit_inputs(3, 3, 1);
        let cfg = ModelConfig::new(3, 1, 8);
        let opts = KernelOptions {
            max_steps: 3,
            kernel_tol: 1e-300,
            ..KernelOptions::default()
        };
        match limit_kernel(&xs, &cfg, &opts) {
            Err(Error::KernelNotConverged { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn beta_scaling() {
        assert_eq!(contraction_beta_for(0.0, 64).unwrap(), 0.0);
        let b1 = contraction_beta_for(0.2, 64).unwrap();
        let b2 = contraction_beta_for(0.4, 64).unwrap();
        assert!((b2 / b1 - 4.0).abs() < 1e-13);
        assert!(contraction_beta_for(0.2, 8).is_err());
    }

    #[test]
    fn dot_product_map_matches_limit_kernel() {
        let xs = random_unit_inputs(5, 8, 21);
        let cfg = ModelConfig::new(5, 1, 8);
        let opts = KernelOptions::default();
        let lim = limit_kernel(&xs, &cfg, &opts).unwrap();
        let map = DotProductKernel::limit(&cfg, &opts, 129).unwrap();
        assert!((map.diagonal - lim.kernel.get(0, 0)).abs() < 1e-10);
        for i in 0..8 {
            for j in 0..8 {
                let v = map.between(&xs[i], &xs[j]);
                assert!(
                    (v - lim.kernel.get(i, j)).abs() < 1e-9,
                    "({i},{j}): {v} vs {}",
                    lim.kernel.get(i, j)
                );
            }
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let xs = random_unit_inputs(3, 4, 2);
        let k = sigma1(&xs, 3f64.sqrt()).unwrap();
        let json = serde_json::to_string(&k).unwrap();
        let back: KernelMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, k);
        let csv = k.to_csv();
        let parsed: Vec<Vec<f64>> = csv
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(parsed[i][j].to_bits(), k.get(i, j).to_bits());
            }
        }
    }
}
