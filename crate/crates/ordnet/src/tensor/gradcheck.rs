//! Finite-difference verification of tape gradients.

use super::Tensor;
use crate::error::{OrdError, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    /// Worst relative difference per parameter.
    pub per_parameter: Vec<(String, f64)>,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_diff < rel_tol
    }
}

// Denominator floor keeps the ratio meaningful where both gradients are
// near zero and central differences are dominated by roundoff.
const REL_FLOOR: f64 = 1e-3;

/// Compare reverse-mode gradients against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps), coordinate by coordinate.
///
/// `loss_fn` evaluates the scalar objective at a parameter point; `grad_fn`
/// returns one gradient tensor per parameter, in `params` order.
pub fn grad_check(
    params: &[(String, Tensor)],
    eps: f64,
    loss_fn: impl Fn(&[(String, Tensor)]) -> Result<f64>,
    grad_fn: impl Fn(&[(String, Tensor)]) -> Result<Vec<Tensor>>,
) -> Result<GradReport> {
    if eps <= 0.0 {
        return Err(OrdError::Argument("grad_check eps must be > 0".into()));
    }
    let analytic = grad_fn(params)?;
    if analytic.len() != params.len() {
        return Err(OrdError::Argument(format!(
            "grad_fn returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut per_parameter = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut param_rel = 0.0f64;
        for ci in 0..work[pi].1.numel() {
            let orig = work[pi].1.data()[ci];
            work[pi].1.data_mut()[ci] = orig + eps;
            let fp = loss_fn(&work)?;
            work[pi].1.data_mut()[ci] = orig - eps;
            let fm = loss_fn(&work)?;
            work[pi].1.data_mut()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(OrdError::Evaluation(format!(
                    "non-finite objective near {}[{}]",
                    name, ci
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[ci];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            param_rel = param_rel.max(rel);
        }
        per_parameter.push((name.clone(), param_rel));
    }
    Ok(GradReport {
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        per_parameter,
    })
}
