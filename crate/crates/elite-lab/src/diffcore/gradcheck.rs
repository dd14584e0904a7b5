//! Central finite-difference verification of analytic gradients.
//!
//! The checker perturbs sampled parameter entries by `±h`, re-evaluates a
//! caller-supplied loss, and compares `(f(x+h) - f(x-h)) / 2h` against the
//! gradient already accumulated in the parameter's grad slot. Intended to
//! run with `f64` models, where `h = 1e-5` leaves ~9 significant digits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::diffcore::params::{ParamRef, ParamSet};
use crate::diffcore::tensor::Scalar;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest relative error seen across all sampled entries.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    /// Number of entries compared.
    pub checked: usize,
}

/// Relative error with a floor so near-zero pairs compare absolutely.
/// The floor sits above central-difference roundoff for unit-scale
/// losses, where gradients that small cannot be resolved relatively.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

/// Compares analytic gradients (already in the grad slots of `ps`) against
/// central differences of `eval` at up to `samples_per_tensor` randomly
/// chosen entries of each listed parameter.
///
/// `eval` must be a deterministic pure function of the parameter values.
/// Returns an error if any sampled entry exceeds `tol`, naming the entry.
pub fn finite_diff_check<S: Scalar>(
    ps: &mut ParamSet<S>,
    refs: &[ParamRef],
    samples_per_tensor: usize,
    h: f64,
    tol: f64,
    rng: &mut ChaCha8Rng,
    eval: &mut dyn FnMut(&ParamSet<S>) -> Result<f64>,
) -> Result<FdReport> {
    let mut report = FdReport { max_rel_err: 0.0, worst: None, checked: 0 };
    for &r in refs {
        let n = ps.get(r).numel();
        let analytic: Vec<f64> = match ps.get(r).grad() {
            Some(g) => g.iter().map(|&v| Scalar::to_f64(v)).collect(),
            None => vec![0.0; n],
        };
        let mut indices: Vec<usize> = (0..n).collect();
        if n > samples_per_tensor {
            for i in 0..samples_per_tensor {
                let j = rng.random_range(i..n);
                indices.swap(i, j);
            }
            indices.truncate(samples_per_tensor);
        }
        for &idx in &indices {
            let orig = ps.get(r).data()[idx];
            ps.get_mut(r).data_mut()[idx] = orig + S::from_f64(h);
            let f_plus = eval(ps)?;
            ps.get_mut(r).data_mut()[idx] = orig - S::from_f64(h);
            let f_minus = eval(ps)?;
            ps.get_mut(r).data_mut()[idx] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let err = rel_err(analytic[idx], fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ps.name(r).to_string(), idx));
            }
            if err > tol {
                return Err(Error::Numeric(format!(
                    "gradient check failed at `{}`[{}]: analytic {} vs finite-diff {} \
                     (rel err {:.3e} > {:.3e})",
                    ps.name(r),
                    idx,
                    analytic[idx],
                    fd,
                    err,
                    tol
                )));
            }
        }
    }
    Ok(report)
}
