//! Model hyperparameters and pointwise activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise nonlinearity of the equilibrium layer.
///
/// `Identity` and `Polynomial` are analytic oracles for tests: both are
/// polynomial, so the positive-definiteness theory does not apply to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Tanh,
    Relu,
    Erf,
    Identity,
    /// `sum_k coefficients[k] * x^k`, monomial basis.
    Polynomial {
        coefficients: Vec<f64>,
    },
}

impl ActivationKind {
    /// Evaluates the activation without checking the input.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Erf => libm::erf(x),
            ActivationKind::Identity => x,
            ActivationKind::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, &c| acc * x + c)
            }
        }
    }

    /// Points where the activation is not smooth. Quadrature splits there.
    pub fn kinks(&self) -> &'static [f64] {
        match self {
            ActivationKind::Relu => &[0.0],
            _ => &[],
        }
    }

    pub fn is_smooth(&self) -> bool {
        self.kinks().is_empty()
    }

    /// Degree for the polynomial variants, `None` for the rest.
    pub fn polynomial_degree(&self) -> Option<usize> {
        match self {
            ActivationKind::Identity => Some(1),
            ActivationKind::Polynomial { coefficients } => {
                Some(coefficients.iter().rposition(|&c| c != 0.0).unwrap_or(0))
            }
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu => "relu",
            ActivationKind::Erf => "erf",
            ActivationKind::Identity => "identity",
            ActivationKind::Polynomial { .. } => "polynomial",
        }
    }

    /// Parses the plain names used on the command line and in config files.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tanh" => Ok(ActivationKind::Tanh),
            "relu" => Ok(ActivationKind::Relu),
            "erf" => Ok(ActivationKind::Erf),
            "identity" | "linear" => Ok(ActivationKind::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Evaluates `kind` at `x`, rejecting non-finite inputs.
pub fn apply_activation(kind: &ActivationKind, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("activation input {x} is not finite")));
    }
    Ok(kind.eval(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_in: usize,
    pub n_out: usize,
    pub width: usize,
    pub sigma_u: f64,
    pub sigma_w: f64,
    pub sigma_v: f64,
    pub activation: ActivationKind,
    /// Relative residual at which the forward iteration stops.
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults: tanh, `sigma_w = 0.25`, `sigma_v = 1`, and `sigma_u = sqrt(n_in)`
    /// so that the input kernel has unit diagonal on the sphere.
    pub fn new(n_in: usize, n_out: usize, width: usize) -> Self {
        ModelConfig {
            n_in,
            n_out,
            width,
            sigma_u: (n_in as f64).sqrt(),
            sigma_w: 0.25,
            sigma_v: 1.0,
            activation: ActivationKind::Tanh,
            fp_tol: 1e-6,
            fp_max_iter: 200,
            seed: 0,
        }
    }

    pub fn with_width(&self, width: usize) -> Self {
        ModelConfig {
            width,
            ..self.clone()
        }
    }

    pub fn with_sigma_w(&self, sigma_w: f64) -> Self {
        ModelConfig {
            sigma_w,
            ..self.clone()
        }
    }

    pub fn with_activation(&self, activation: ActivationKind) -> Self {
        ModelConfig {
            activation,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "dimensions must be >= 1 (n_in={}, n_out={}, width={})",
                self.n_in, self.n_out, self.width
            )));
        }
        for (name, s) in [
            ("sigma_u", self.sigma_u),
            ("sigma_w", self.sigma_w),
            ("sigma_v", self.sigma_v),
        ] {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and > 0, got {s}"
                )));
            }
        }
        if !(self.fp_tol.is_finite() && self.fp_tol > 0.0) {
            return Err(Error::Config(format!(
                "fp_tol must be > 0, got {}",
                self.fp_tol
            )));
        }
        if self.fp_max_iter == 0 {
            return Err(Error::Config("fp_max_iter must be >= 1".into()));
        }
        if let ActivationKind::Polynomial { coefficients } = &self.activation {
            if coefficients.is_empty() || coefficients.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(
                    "polynomial activation needs finite coefficients".into(),
                ));
            }
        }
        Ok(())
    }

    /// Diagonal of the input kernel for unit-norm inputs, `sigma_u^2 / n_in`.
    pub fn sigma1_diag(&self) -> f64 {
        self.sigma_u * self.sigma_u / self.n_in as f64
    }

    pub fn contraction_ok(&self) -> bool {
        contraction_gamma(self) < 1.0
    }
}

/// Forward-pass contraction rate `2 * sqrt(2) * sigma_w`.
pub fn contraction_gamma(config: &ModelConfig) -> f64 {
    2.0 * std::f64::consts::SQRT_2 * config.sigma_w
}
