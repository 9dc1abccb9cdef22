//! Quadrature rules for expectations under the standard normal.
//!
//! Smooth integrands use Gauss–Hermite. Integrands with kinks use a
//! composite Gauss–Legendre rule on a truncated line, split at the kinks
//! and at every unit interval, with the Gaussian density folded into the
//! weights.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights such that `sum w_i f(z_i) ~= E f(Z)`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    /// Probabilists' Gauss–Hermite rule with `order` nodes.
    pub fn hermite(order: usize) -> Self {
        let (x, w) = gauss_hermite_physicists(order);
        let scale = 1.0 / PI.sqrt();
        NormalRule {
            nodes: x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|v| v * scale).collect(),
        }
    }

    /// Shared, memoized Gauss–Hermite rule.
    pub fn hermite_cached(order: usize) -> Arc<NormalRule> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<NormalRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard
            .entry(order)
            .or_insert_with(|| Arc::new(NormalRule::hermite(order)))
            .clone()
    }

    /// Composite Gauss–Legendre on `[-half_width, half_width]`, split at
    /// `breaks` and into panels no wider than one unit.
    pub fn split(breaks: &[f64], half_width: f64, nodes_per_panel: usize) -> Self {
        Self::split_panels(breaks, half_width, nodes_per_panel, 1.0)
    }

    /// As [`NormalRule::split`] with panels no wider than `max_panel`.
    pub fn split_panels(
        breaks: &[f64],
        half_width: f64,
        nodes_per_panel: usize,
        max_panel: f64,
    ) -> Self {
        let (nodes, weights) = composite_legendre(
            breaks,
            -half_width,
            half_width,
            nodes_per_panel,
            max_panel,
            |z| (-0.5 * z * z).exp() / (2.0 * PI).sqrt(),
        );
        NormalRule { nodes, weights }
    }

    #[inline]
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Gauss–Hermite nodes and weights for the weight `exp(-x^2)`.
///
/// Starting points are the eigenvalues of the Jacobi matrix; each root is
/// then polished by Newton iteration on the orthonormal recurrence, which
/// also gives the weight to full relative precision.
pub fn gauss_hermite_physicists(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Hermite order must be positive");
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let nf = n as f64;
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    guesses.sort_by(f64::total_cmp);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for (i, &guess) in guesses.iter().enumerate() {
        let mut z = guess;
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / (pp * pp);
    }
    // Enforce exact symmetry.
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let node = 0.5 * (x[j] - x[i]);
        let weight = 0.5 * (w[i] + w[j]);
        x[i] = -node;
        x[j] = node;
        w[i] = weight;
        w[j] = weight;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre order must be positive");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[m - 1] = 0.0;
    }
    (x, w)
}

fn legendre_cached(n: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| Arc::new(gauss_legendre(n)))
        .clone()
}

/// Composite Gauss–Legendre on `[lo, hi]` with `density` folded into the
/// weights. Breakpoints outside the interval are ignored; every piece
/// between breakpoints is cut into panels no wider than `max_panel`.
pub fn composite_legendre(
    breaks: &[f64],
    lo: f64,
    hi: f64,
    nodes_per_panel: usize,
    max_panel: f64,
    density: impl Fn(f64) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    assert!(max_panel > 0.0, "panel width must be positive");
    let base = legendre_cached(nodes_per_panel.max(1));
    let mut cuts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|b| *b > lo && *b < hi)
        .collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("breakpoints must not be NaN"));
    cuts.dedup();

    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let panels = (((b - a) / max_panel).ceil() as usize).max(1);
        let h = (b - a) / panels as f64;
        for p in 0..panels {
            let pa = a + p as f64 * h;
            let mid = pa + 0.5 * h;
            for (&t, &wt) in base.0.iter().zip(&base.1) {
                let z = mid + 0.5 * h * t;
                nodes.push(z);
                weights.push(0.5 * h * wt * density(z));
            }
        }
    }
    (nodes, weights)
}
