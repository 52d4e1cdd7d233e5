//! Approximation error of the shifted reciprocal `1 / (eps + s)`.

use crate::error::{Error, Result};
use crate::polyapprox::goldschmidt::{reciprocal_circuit, GoldschmidtConfig};
use crate::polyapprox::poly::grid;
use crate::polyapprox::PlainEvaluator;

use super::sweep::{SweepParameter, SweepResult, SweepSpec};

pub const METRIC_SUP_ERROR: &str = "sup_error";

/// Sup-norm error of a `budget`-iteration Goldschmidt reciprocal of
/// `eps + s` over `s` in `[0, s_max]`, measured on the dense grid.
pub fn shifted_reciprocal_error(eps: f64, budget: u32, s_max: f64) -> Result<f64> {
    if !(eps > 0.0 && s_max > 0.0 && s_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("need eps > 0 and s_max > 0, got {eps}, {s_max}")));
    }
    let cfg = GoldschmidtConfig::new(budget, eps, eps + s_max)?;
    Ok(grid(0.0, s_max)
        .map(|s| {
            let x = eps + s;
            (reciprocal_circuit(&mut PlainEvaluator, &x, &cfg) - 1.0 / x).abs()
        })
        .fold(0.0, f64::max))
}

/// One `sup_error` row per epsilon at a fixed iteration budget.
pub fn epsilon_error_sweep(spec: &SweepSpec, budget: u32, s_max: f64) -> Result<SweepResult> {
    spec.expect(SweepParameter::Epsilon)?;
    let mut out = SweepResult::new(spec.clone());
    for &eps in &spec.values {
        let e = shifted_reciprocal_error(eps, budget, s_max)?;
        // deterministic: every repetition measures the same value
        out.push(eps, METRIC_SUP_ERROR, &vec![e; spec.repetitions]);
    }
    Ok(out)
}
