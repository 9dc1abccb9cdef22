//! Helpers for input sets on the unit sphere.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Accepted deviation of `|x|` from 1.
pub const UNIT_NORM_TOL: f64 = 1e-12;

pub fn normalize(x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Precondition(
            "cannot project a zero or non-finite vector onto the sphere".into(),
        ));
    }
    Ok(x / n)
}

pub fn check_unit(inputs: &[DVector<f64>]) -> Result<()> {
    let Some(first) = inputs.first() else {
        return Err(Error::Precondition("input set is empty".into()));
    };
    let dim = first.len();
    for (i, x) in inputs.iter().enumerate() {
        if x.len() != dim {
            return Err(Error::Precondition(format!(
                "input {i} has length {}, expected {dim}",
                x.len()
            )));
        }
        let dev = (x.norm() - 1.0).abs();
        if !(dev <= UNIT_NORM_TOL) {
            return Err(Error::Precondition(format!(
                "input {i} is not unit-normalized (| |x| - 1 | = {dev:e})"
            )));
        }
    }
    Ok(())
}

/// Fails when two inputs coincide (within `1e-12` in Euclidean distance).
pub fn check_pairwise_distinct(inputs: &[DVector<f64>]) -> Result<()> {
    for i in 0..inputs.len() {
        for j in (i + 1)..inputs.len() {
            if (&inputs[i] - &inputs[j]).norm() <= 1e-12 {
                return Err(Error::Precondition(format!("inputs {i} and {j} coincide")));
            }
        }
    }
    Ok(())
}

/// `count` points drawn uniformly from the sphere in `dim` dimensions.
pub fn random_unit_inputs(dim: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..count)
        .map(|_| {
            let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let n = v.norm();
            v / n
        })
        .collect()
}

/// Stable fingerprint of an input set (first 8 bytes of SHA-256 over the bits).
pub fn fingerprint(inputs: &[DVector<f64>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update((inputs.len() as u64).to_le_bytes());
    for x in inputs {
        hasher.update((x.len() as u64).to_le_bytes());
        for v in x.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}
