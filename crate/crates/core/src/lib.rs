//! NNGP kernels for deep equilibrium models.
//!
//! A DEQ layer `h = phi(W^T h + U^T x)` with Gaussian weights becomes a
//! Gaussian process as the width grows. This crate computes the limiting
//! kernel `Sigma*`, simulates finite networks, and checks the two against
//! each other.

pub mod diagnostics;
pub mod dual;
pub mod error;
pub mod gp;
pub mod inputs;
pub mod kernel;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod simulator;

pub use diagnostics::{
    commuting_limits, depth_convergence, eigen_study, gaussianity_experiment, ks_test,
    width_convergence, CommutingLimits, ConvergenceAxis, ConvergenceTrace, EigenRow,
    GaussianityReport, KsResult,
};
pub use dual::{
    composed_series, dual_kernel_eval, hermite_coefficients, pd_diagnostic, sigma_star_series,
    ComposedSeries, HermiteExpansion, PdReport, PdVerdict,
};
pub use error::{Error, ErrorCategory, Result};
pub use gp::{
    evaluate, gp_predict, load_csv, load_mnist_idx, run_inference, Dataset, GpPosterior,
    InferenceKernel, InferenceOptions, JitterSchedule, Metric, Split, Task,
};
pub use inputs::{check_unit, normalize, random_unit_inputs};
pub use kernel::{
    bivariate_expectation, closed_form_expectation, contraction_beta, kernel_recursion,
    kernel_step, limit_kernel, output_kernel, sigma1, BivariateGaussianSpec, DotProductKernel,
    ExpectationMethod, KernelLevel, KernelMatrix, KernelOptions, LimitKernel,
};
pub use model::{apply_activation, contraction_gamma, ActivationKind, ModelConfig};
pub use rng::derive_seed;
pub use simulator::{
    empirical_kernel, finite_depth_forward, forward_fixed_point, init_params, network_output,
    EmpiricalMode, FixedPointResult, NetworkParams,
};
