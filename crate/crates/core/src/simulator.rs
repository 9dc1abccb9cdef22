//! Finite-width equilibrium networks: sampling, forward iteration, and
//! empirical kernels.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inputs::{check_unit, fingerprint};
use crate::kernel::{KernelLevel, KernelMatrix};
use crate::model::ModelConfig;
use crate::rng::rng_from_seed;

/// Floor on the denominator of the relative residual.
pub const RESIDUAL_FLOOR: f64 = 1e-30;

/// Consecutive residual increases that count as divergence.
const DIVERGENCE_RUN: usize = 5;

/// One weight realization: `U` is `n_in x n`, `W` is `n x n`, `V` is `n x n_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub u: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub config: ModelConfig,
}

impl NetworkParams {
    /// Assembles parameters from explicit matrices, checking shapes.
    pub fn from_parts(
        config: ModelConfig,
        u: DMatrix<f64>,
        w: DMatrix<f64>,
        v: DMatrix<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (n_in, n, n_out) = (config.n_in, config.width, config.n_out);
        if u.shape() != (n_in, n) || w.shape() != (n, n) || v.shape() != (n, n_out) {
            return Err(Error::Precondition(format!(
                "parameter shapes U {:?}, W {:?}, V {:?} do not match n_in={n_in}, n={n}, n_out={n_out}",
                u.shape(),
                w.shape(),
                v.shape()
            )));
        }
        Ok(NetworkParams { u, w, v, config })
    }

    /// `U^T x`, the input injection.
    pub fn inject(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.config.n_in {
            return Err(Error::Precondition(format!(
                "input has length {}, expected {}",
                x.len(),
                self.config.n_in
            )));
        }
        Ok(self.u.tr_mul(x))
    }

    /// One application of `h -> phi(W^T h + g1)`, written into `out`.
    #[inline]
    fn transition_into(&self, h: &DVector<f64>, g1: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv_tr(1.0, &self.w, h, 0.0);
        let act = &self.config.activation;
        for (o, g) in out.iter_mut().zip(g1.iter()) {
            *o = act.eval(*o + *g);
        }
    }
}

/// Draws `U`, `W`, `V` with i.i.d. entries of variance `sigma_u^2 / n_in`,
/// `sigma_w^2 / n` and `sigma_v^2 / n`, in that order, from one stream.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let n = config.width;
    let mut block = |rows: usize, cols: usize, sd: f64| {
        DMatrix::from_iterator(
            rows,
            cols,
            (0..rows * cols).map(|_| sd * rng.sample::<f64, _>(StandardNormal)),
        )
    };
    let u = block(config.n_in, n, config.sigma_u / (config.n_in as f64).sqrt());
    let w = block(n, n, config.sigma_w / (n as f64).sqrt());
    let v = block(n, config.n_out, config.sigma_v / (n as f64).sqrt());
    Ok(NetworkParams {
        u,
        w,
        v,
        config: config.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResult {
    pub h_star: DVector<f64>,
    pub iterations: usize,
    /// `|h^l - h^{l-1}| / max(|h^{l-1}|, |h^l|)` for every step taken.
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    /// Set when `2 sqrt(2) sigma_w >= 1`, i.e. convergence is not guaranteed.
    pub contraction_warning: bool,
}

/// Picard iteration of the transition from `h^0 = 0`.
pub fn forward_fixed_point(params: &NetworkParams, x: &DVector<f64>) -> Result<FixedPointResult> {
    let cfg = &params.config;
    if !(x.norm() > 0.0) {
        return Err(Error::Precondition("input must be nonzero".into()));
    }
    let g1 = params.inject(x)?;
    let contraction_ok = cfg.contraction_ok();
    if !contraction_ok {
        warn!(
            "2*sqrt(2)*sigma_w = {:.4} >= 1, the forward iteration may not converge",
            crate::contraction_gamma(cfg)
        );
    }
    let mut h = DVector::zeros(cfg.width);
    let mut next = DVector::zeros(cfg.width);
    let mut trace = Vec::with_capacity(64);
    let mut rising = 0usize;
    let mut prev_step = f64::INFINITY;
    let mut converged = false;
    for _ in 0..cfg.fp_max_iter {
        params.transition_into(&h, &g1, &mut next);
        let step = (&next - &h).norm();
        let res = step / h.norm().max(next.norm()).max(RESIDUAL_FLOOR);
        std::mem::swap(&mut h, &mut next);
        // Growth is judged on the absolute step: for a linear blow-up the
        // relative residual settles at a constant while the step explodes.
        rising = if step > prev_step || !step.is_finite() {
            rising + 1
        } else {
            0
        };
        prev_step = step;
        trace.push(res);
        if res <= cfg.fp_tol {
            converged = true;
            break;
        }
        if !contraction_ok && rising >= DIVERGENCE_RUN {
            return Err(Error::Diverged { trace });
        }
    }
    Ok(FixedPointResult {
        h_star: h,
        iterations: trace.len(),
        residual_trace: trace,
        converged,
        contraction_warning: !contraction_ok,
    })
}

/// `h^{L-1}` of the unrolled network: `h^1 = phi(U^T x)`,
/// `h^l = phi(W^T h^{l-1} + U^T x)`.
pub fn finite_depth_forward(
    params: &NetworkParams,
    x: &DVector<f64>,
    depth: usize,
) -> Result<DVector<f64>> {
    if depth < 2 {
        return Err(Error::Precondition(format!(
            "finite depth must be >= 2, got {depth}"
        )));
    }
    let g1 = params.inject(x)?;
    let mut h = DVector::zeros(params.config.width);
    let mut next = DVector::zeros(params.config.width);
    // Starting from h^0 = 0 the first step is exactly phi(U^T x).
    for _ in 1..depth {
        params.transition_into(&h, &g1, &mut next);
        std::mem::swap(&mut h, &mut next);
    }
    Ok(h)
}

/// `V^T h`.
pub fn network_output(params: &NetworkParams, h: &DVector<f64>) -> Result<DVector<f64>> {
    if h.len() != params.config.width {
        return Err(Error::Precondition(format!(
            "hidden state has length {}, expected {}",
            h.len(),
            params.config.width
        )));
    }
    Ok(params.v.tr_mul(h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmpiricalMode {
    /// `sigma_w^2 <h^l, h^l'> / n`, an estimate of `Sigma^{l+1}`.
    Depth(usize),
    /// `sigma_v^2 <h*, h*'> / n`, an estimate of the output covariance.
    FixedPoint,
}

/// Hidden states for a batch of inputs (columns of the result).
///
/// Depth mode unrolls `l` transitions. Fixed-point mode iterates until
/// every column meets `fp_tol`, so columns that converge early keep
/// iterating with the others.
pub fn hidden_states(
    params: &NetworkParams,
    inputs: &[DVector<f64>],
    mode: EmpiricalMode,
) -> Result<DMatrix<f64>> {
    let cfg = &params.config;
    if inputs.iter().any(|x| x.len() != cfg.n_in) {
        return Err(Error::Precondition(format!(
            "inputs must have length {}",
            cfg.n_in
        )));
    }
    let x = DMatrix::from_columns(inputs);
    let g1 = params.u.tr_mul(&x);
    let mut h = DMatrix::zeros(cfg.width, inputs.len());
    let mut next = DMatrix::zeros(cfg.width, inputs.len());
    let step = |h: &DMatrix<f64>, next: &mut DMatrix<f64>| {
        next.gemm_tr(1.0, &params.w, h, 0.0);
        *next += &g1;
        next.apply(|v| *v = cfg.activation.eval(*v));
    };
    match mode {
        EmpiricalMode::Depth(l) => {
            if l == 0 {
                return Err(Error::Precondition("empirical depth must be >= 1".into()));
            }
            for _ in 0..l {
                step(&h, &mut next);
                std::mem::swap(&mut h, &mut next);
            }
        }
        EmpiricalMode::FixedPoint => {
            let mut done = false;
            for _ in 0..cfg.fp_max_iter {
                step(&h, &mut next);
                done = (0..inputs.len()).all(|c| {
                    let r = (next.column(c) - h.column(c)).norm()
                        / h.column(c)
                            .norm()
                            .max(next.column(c).norm())
                            .max(RESIDUAL_FLOOR);
                    r <= cfg.fp_tol
                });
                std::mem::swap(&mut h, &mut next);
                if done {
                    break;
                }
            }
            if !done {
                return Err(Error::Diverged { trace: Vec::new() });
            }
        }
    }
    Ok(h)
}

/// Empirical kernel of one realization over unit inputs.
pub fn empirical_kernel(
    params: &NetworkParams,
    inputs: &[DVector<f64>],
    mode: EmpiricalMode,
) -> Result<KernelMatrix> {
    check_unit(inputs)?;
    let cfg = &params.config;
    let h = hidden_states(params, inputs, mode)?;
    let gram = h.tr_mul(&h);
    let scale = match mode {
        EmpiricalMode::Depth(_) => cfg.sigma_w * cfg.sigma_w,
        EmpiricalMode::FixedPoint => cfg.sigma_v * cfg.sigma_v,
    } / cfg.width as f64;
    Ok(KernelMatrix::from_fn(
        inputs.len(),
        KernelLevel::Empirical,
        fingerprint(inputs),
        |i, j| scale * gram[(i, j)],
    ))
}

/// Operator-norm estimate by power iteration on `W^T W`.
pub fn operator_norm_estimate(w: &DMatrix<f64>, iterations: usize) -> f64 {
    let mut v = DVector::from_element(w.ncols(), 1.0 / (w.ncols() as f64).sqrt());
    let mut norm = 0.0;
    for _ in 0..iterations {
        let wv = w * &v;
        let wtwv = w.tr_mul(&wv);
        let n = wtwv.norm();
        if n == 0.0 {
            return 0.0;
        }
        norm = n.sqrt();
        v = wtwv / n;
    }
    norm
}
