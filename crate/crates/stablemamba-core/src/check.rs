//! Central finite-difference gradient checking.
//!
//! Runs at f64 only: the forward under test is evaluated twice per probed
//! coordinate (`theta +/- h`) and the symmetric difference is compared against
//! the analytic gradient under the relative-error convention
//! `|a-b| / max(|a|,|b|,1e-8)`. Large tensors can be spot-checked by sampling
//! a fixed number of coordinates per tensor (deterministic per seed).

use crate::tensor::{rel_err, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Step size, tolerance, and how many coordinates per tensor to probe.
#[derive(Debug, Clone)]
pub struct FiniteDiffConfig {
    pub h: f64,
    pub tol: f64,
    /// `None` probes every coordinate. With `Some(k)`, tensors larger than
    /// `k` get `k` distinct coordinates sampled deterministically from `seed`.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        FiniteDiffConfig {
            h: 1e-4,
            tol: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

/// One probed coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub numeric: f64,
    pub analytic: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
    /// Coordinates whose relative error exceeded the configured tolerance.
    pub failures: Vec<CoordCheck>,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check `grads` (aligned by position with `params`) against central finite
/// differences of `loss_fn`. The closure receives the full parameter list with
/// exactly one coordinate perturbed; any missing gradient tensor is treated as
/// all-zero (a parameter the loss genuinely does not touch).
pub fn finite_diff_check(
    params: &[(String, Tensor<f64>)],
    grads: &[Option<Tensor<f64>>],
    mut loss_fn: impl FnMut(&[(String, Tensor<f64>)]) -> Result<f64>,
    cfg: &FiniteDiffConfig,
) -> Result<FiniteDiffReport> {
    assert_eq!(
        params.len(),
        grads.len(),
        "finite_diff_check: {} params vs {} grads",
        params.len(),
        grads.len()
    );
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<(String, Tensor<f64>)> = params.to_vec();
    let mut report = FiniteDiffReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };

    for (pi, (name, p)) in params.iter().enumerate() {
        let numel = p.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(k) if numel > k => {
                // distinct draws without replacement
                let mut picked = std::collections::BTreeSet::new();
                while picked.len() < k {
                    picked.insert(rng.gen_range(0..numel));
                }
                picked.into_iter().collect()
            }
            _ => (0..numel).collect(),
        };
        for ci in coords {
            let orig = p.data()[ci];
            work[pi].1.data_mut()[ci] = orig + cfg.h;
            let up = loss_fn(&work)?;
            work[pi].1.data_mut()[ci] = orig - cfg.h;
            let down = loss_fn(&work)?;
            work[pi].1.data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let analytic = grads[pi].as_ref().map_or(0.0, |g| g.data()[ci]);
            let e = rel_err(numeric, analytic);
            report.n_checked += 1;
            let coord = CoordCheck {
                name: name.clone(),
                index: ci,
                numeric,
                analytic,
                rel_err: e,
            };
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some(coord.clone());
            }
            if e > cfg.tol {
                report.failures.push(coord);
            }
        }
    }
    Ok(report)
}
