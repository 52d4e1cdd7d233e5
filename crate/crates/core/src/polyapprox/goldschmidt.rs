//! Goldschmidt-style reciprocal and inverse square root.
//!
//! Inputs are first mapped into `(0, 2)` by the plaintext factor
//! `s = 2 / (lo + hi)`. On the scaled value `xs` the reciprocal iteration is
//! `r <- r * (2 - xs * r)` from `r = 1`, so `1 - xs * r_k = (1 - xs)^(2^k)`.
//! The inverse square root uses the coupled form
//! `r = 1/2 - g h; g <- g (1 + r); h <- h (1 + r)` from `g = xs, h = 1/2`,
//! which converges to `g = sqrt(xs)`, `h = 1 / (2 sqrt(xs))`.
//! Both spend two multiplications per iteration.

use serde::{Deserialize, Serialize};

use super::circuit::{Evaluator, PlainEvaluator};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldschmidtConfig {
    pub iterations: u32,
    pub lo: f64,
    pub hi: f64,
}

impl GoldschmidtConfig {
    pub fn new(iterations: u32, lo: f64, hi: f64) -> Result<Self> {
        let cfg = GoldschmidtConfig { iterations, lo, hi };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("Goldschmidt needs at least one iteration".into()));
        }
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo > 0.0 && self.lo < self.hi) {
            return Err(Error::InvalidArgument(format!(
                "Goldschmidt domain [{}, {}] must satisfy 0 < lo < hi",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Plaintext factor mapping the domain into `(0, 2)`.
    pub fn scale(&self) -> f64 {
        2.0 / (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub(crate) fn check(&self, x: f64, site: &str) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::domain(site, x, self.lo, self.hi))
        }
    }
}

/// Reciprocal circuit; no domain check.
pub fn reciprocal_circuit<E: Evaluator>(ev: &mut E, x: &E::Value, cfg: &GoldschmidtConfig) -> E::Value {
    let s = cfg.scale();
    let xs = ev.mul_plain(x, s);
    let mut r = ev.constant(1.0);
    for _ in 0..cfg.iterations {
        let xr = ev.mul(&xs, &r);
        let neg = ev.mul_plain(&xr, -1.0);
        let corr = ev.add_plain(&neg, 2.0);
        r = ev.mul(&r, &corr);
    }
    ev.mul_plain(&r, s)
}

/// Inverse square root circuit; no domain check.
pub fn inv_sqrt_circuit<E: Evaluator>(ev: &mut E, x: &E::Value, cfg: &GoldschmidtConfig) -> E::Value {
    let s = cfg.scale();
    let mut g = ev.mul_plain(x, s);
    let mut h = ev.constant(0.5);
    for _ in 0..cfg.iterations {
        let gh = ev.mul(&g, &h);
        let neg = ev.mul_plain(&gh, -1.0);
        let r = ev.add_plain(&neg, 0.5);
        let gr = ev.mul(&g, &r);
        let hr = ev.mul(&h, &r);
        g = ev.add(&g, &gr);
        h = ev.add(&h, &hr);
    }
    // 1/sqrt(x) = sqrt(s) / sqrt(xs) = 2 h sqrt(s)
    ev.mul_plain(&h, 2.0 * s.sqrt())
}

/// Approximates `1 / x` for `x` in the configured domain.
pub fn goldschmidt_reciprocal(x: f64, cfg: &GoldschmidtConfig) -> Result<f64> {
    cfg.validate()?;
    cfg.check(x, "goldschmidt_reciprocal")?;
    Ok(reciprocal_circuit(&mut PlainEvaluator, &x, cfg))
}

/// Approximates `1 / sqrt(x)` for `x` in the configured domain.
pub fn goldschmidt_inv_sqrt(x: f64, cfg: &GoldschmidtConfig) -> Result<f64> {
    cfg.validate()?;
    cfg.check(x, "goldschmidt_inv_sqrt")?;
    Ok(inv_sqrt_circuit(&mut PlainEvaluator, &x, cfg))
}

/// Exact error of the reciprocal iteration on the scaled variable:
/// `|1/xs - r_k| = |1 - xs|^(2^k) / xs`.
pub fn reciprocal_error_bound(x: f64, cfg: &GoldschmidtConfig) -> f64 {
    let xs = x * cfg.scale();
    let exponent = 2f64.powi(cfg.iterations as i32);
    (1.0 - xs).abs().powf(exponent) / xs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyapprox::circuit::TraceEvaluator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_is_fixed_point() {
        for k in 1..6 {
            let cfg = GoldschmidtConfig::new(k, 0.5, 3.5).unwrap();
            assert_eq!(goldschmidt_reciprocal(2.0, &cfg).unwrap(), 0.5);
        }
    }

    #[test]
    fn reciprocal_of_half() {
        let cfg = GoldschmidtConfig::new(6, 0.25, 1.75).unwrap();
        assert!((goldschmidt_reciprocal(0.5, &cfg).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn error_nonincreasing_in_iterations() {
        let x = 0.3;
        let mut prev = f64::INFINITY;
        for k in 1..=10 {
            let cfg = GoldschmidtConfig::new(k, 0.1, 4.0).unwrap();
            let err = (goldschmidt_reciprocal(x, &cfg).unwrap() - 1.0 / x).abs();
            assert!(err <= prev, "k = {k}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn error_exponent_doubles_per_iteration() {
        // on the scaled variable the residual 1 - xs r squares every step
        let cfg = GoldschmidtConfig::new(1, 0.2, 1.8).unwrap();
        let x = 0.35;
        let xs = x * cfg.scale();
        let mut r = 1.0f64;
        let mut prev = (1.0 - xs * r).abs();
        for _ in 0..5 {
            r *= 2.0 - xs * r;
            let e = (1.0 - xs * r).abs();
            assert!(e <= prev * prev * (1.0 + 1e-12) + 1e-16);
            prev = e;
        }
    }

    #[test]
    fn domain_errors() {
        let cfg = GoldschmidtConfig::new(4, 0.5, 2.0).unwrap();
        match goldschmidt_reciprocal(2.5, &cfg) {
            Err(Error::Domain { site, value, .. }) => {
                assert_eq!(site, "goldschmidt_reciprocal");
                assert_eq!(value, 2.5);
            }
            other => panic!("{other:?}"),
        }
        assert!(goldschmidt_inv_sqrt(0.1, &cfg).is_err());
        assert!(GoldschmidtConfig::new(0, 0.5, 2.0).is_err());
        assert!(GoldschmidtConfig::new(3, 0.0, 2.0).is_err());
        assert!(GoldschmidtConfig::new(3, 2.0, 1.0).is_err());
    }

    #[test]
    fn inv_sqrt_examples() {
        let cfg = GoldschmidtConfig::new(8, 0.5, 1.5).unwrap();
        assert!((goldschmidt_inv_sqrt(1.0, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let cfg = GoldschmidtConfig::new(8, 1.0, 8.0).unwrap();
        assert!((goldschmidt_inv_sqrt(4.0, &cfg).unwrap() - 0.5).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let x = rng.random_range(1.0..8.0);
            let r = goldschmidt_inv_sqrt(x, &cfg).unwrap();
            assert!((r * r * x - 1.0).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn depths_stay_within_two_per_iteration() {
        for k in 1..8 {
            let cfg = GoldschmidtConfig::new(k, 0.5, 1.5).unwrap();
            let mut ev = TraceEvaluator::new();
            let x = ev.input(0.9);
            let r = reciprocal_circuit(&mut ev, &x, &cfg);
            assert!(r.depth <= 2 * k);
            let mut ev = TraceEvaluator::new();
            let x = ev.input(0.9);
            let r = inv_sqrt_circuit(&mut ev, &x, &cfg);
            assert!(r.depth <= 2 * k);
            assert_eq!(ev.counts().non_polynomial(), 0);
        }
    }
}
