//! Fitted polynomials in the monomial basis, with certified grid error.

use serde::{Deserialize, Serialize};

use super::circuit::{power_basis, Evaluator, PlainEvaluator};
use super::depth::{depth_of, DepthOp};
use crate::error::{Error, Result};

/// Points in the uniform grid used to measure `max_error`.
pub const GRID_POINTS: usize = 10_001;

/// Slope in `GELU(x) = x * sigmoid(1.702 x)`.
pub const GELU_SLOPE: f64 = 1.702;

/// A polynomial approximation valid on `[lo, hi]`.
///
/// `max_error` is measured against the target function when the polynomial
/// is built, so it always describes the current coefficients and domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolyRepr")]
pub struct PolyApprox {
    coefficients: Vec<f64>,
    domain: [f64; 2],
    depth: u32,
    max_error: f64,
}

#[derive(Deserialize)]
struct PolyRepr {
    coefficients: Vec<f64>,
    domain: [f64; 2],
    depth: u32,
    max_error: f64,
}

impl TryFrom<PolyRepr> for PolyApprox {
    type Error = Error;

    fn try_from(r: PolyRepr) -> Result<Self> {
        check_domain(r.domain[0], r.domain[1])?;
        if r.coefficients.is_empty() || r.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::Parse("coefficients must be nonempty and finite".into()));
        }
        if !(r.max_error >= 0.0) {
            return Err(Error::Parse(format!("max_error = {}", r.max_error)));
        }
        let depth = poly_depth(r.coefficients.len() - 1);
        if depth != r.depth {
            return Err(Error::Parse(format!(
                "depth {} does not match degree {} (expected {depth})",
                r.depth,
                r.coefficients.len() - 1
            )));
        }
        Ok(PolyApprox {
            coefficients: r.coefficients,
            domain: r.domain,
            depth,
            max_error: r.max_error,
        })
    }
}

fn check_domain(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidArgument(format!("degenerate domain [{lo}, {hi}]")));
    }
    Ok(())
}

fn poly_depth(degree: usize) -> u32 {
    depth_of(DepthOp::Poly(degree))
}

/// `GRID_POINTS` uniformly spaced points covering `[lo, hi]` including both ends.
pub fn grid(lo: f64, hi: f64) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    (0..GRID_POINTS).map(move |i| if i == GRID_POINTS - 1 { hi } else { lo + step * i as f64 })
}

impl PolyApprox {
    /// Builds a polynomial and measures its sup-error against `target`.
    pub fn new(coefficients: Vec<f64>, lo: f64, hi: f64, target: impl Fn(f64) -> f64) -> Result<Self> {
        check_domain(lo, hi)?;
        if coefficients.is_empty() {
            return Err(Error::InvalidArgument("polynomial needs at least one coefficient".into()));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("polynomial coefficient".into()));
        }
        let depth = poly_depth(coefficients.len() - 1);
        let mut p = PolyApprox {
            coefficients,
            domain: [lo, hi],
            depth,
            max_error: 0.0,
        };
        p.max_error = grid(lo, hi)
            .map(|x| (p.eval_unchecked(x) - target(x)).abs())
            .fold(0.0, f64::max);
        Ok(p)
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain[0], self.domain[1])
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn max_error(&self) -> f64 {
        self.max_error
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.domain[0] && x <= self.domain[1]
    }

    pub(crate) fn check(&self, x: f64, site: &str) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::domain(site, x, self.domain[0], self.domain[1]))
        }
    }

    fn eval_unchecked(&self, x: f64) -> f64 {
        self.eval_circuit(&mut PlainEvaluator, &x)
    }

    /// Power-basis evaluation: `x^k` by repeated squaring, then
    /// `sum_k c_k x^k`. No domain check.
    pub fn eval_circuit<E: Evaluator>(&self, ev: &mut E, x: &E::Value) -> E::Value {
        let powers = power_basis(ev, x, self.degree());
        let mut acc = ev.constant(self.coefficients[0]);
        for (c, xk) in self.coefficients.iter().zip(&powers).skip(1) {
            let term = ev.mul_plain(xk, *c);
            acc = ev.add(&acc, &term);
        }
        acc
    }
}

pub fn eval_poly(p: &PolyApprox, x: f64) -> Result<f64> {
    p.check(x, "eval_poly")?;
    Ok(p.eval_unchecked(x))
}

/// Chebyshev interpolation of `f` on `[lo, hi]` at `degree + 1` Chebyshev
/// nodes, re-expressed in the monomial basis of `x`.
pub fn fit_chebyshev(f: impl Fn(f64) -> f64, lo: f64, hi: f64, degree: usize) -> Result<PolyApprox> {
    check_domain(lo, hi)?;
    let n = degree + 1;
    let half_width = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let nodes: Vec<f64> = (0..n)
        .map(|k| (std::f64::consts::PI * (k as f64 + 0.5) / n as f64).cos())
        .collect();
    let values: Vec<f64> = nodes.iter().map(|&t| f(mid + half_width * t)).collect();

    // c_j = (2/n) sum_k f(x_k) T_j(t_k), with c_0 halved
    let mut cheb = vec![0.0; n];
    for (j, c) in cheb.iter_mut().enumerate() {
        let s: f64 = nodes
            .iter()
            .zip(&values)
            .map(|(&t, &v)| v * (j as f64 * t.acos()).cos())
            .sum();
        *c = 2.0 * s / n as f64;
    }
    cheb[0] *= 0.5;

    // sum_j c_j T_j(t) as a polynomial in t
    let mut in_t = vec![0.0; n];
    let mut t_prev = vec![1.0];
    let mut t_cur = vec![0.0, 1.0];
    in_t[0] += cheb[0];
    if n > 1 {
        in_t[1] += cheb[1];
    }
    for c in cheb.iter().skip(2) {
        let mut next = vec![0.0; t_cur.len() + 1];
        for (i, v) in t_cur.iter().enumerate() {
            next[i + 1] += 2.0 * v;
        }
        for (i, v) in t_prev.iter().enumerate() {
            next[i] -= v;
        }
        for (acc, v) in in_t.iter_mut().zip(&next) {
            *acc += c * v;
        }
        t_prev = std::mem::replace(&mut t_cur, next);
    }

    // substitute t = a x + b via Horner on polynomials
    let a = 1.0 / half_width;
    let b = -mid / half_width;
    let mut in_x = vec![0.0; n];
    for &m in in_t.iter().rev() {
        let mut next = vec![0.0; n];
        for i in 0..n {
            if i + 1 < n {
                next[i + 1] += a * in_x[i];
            }
            next[i] += b * in_x[i];
        }
        next[0] += m;
        in_x = next;
    }
    PolyApprox::new(in_x, lo, hi, f)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(1.702 x)`, the form of GELU used throughout the crate.
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(GELU_SLOPE * x)
}

pub fn fit_sigmoid(lo: f64, hi: f64, degree: usize) -> Result<PolyApprox> {
    if degree < 1 {
        return Err(Error::InvalidArgument("sigmoid fit needs degree >= 1".into()));
    }
    fit_chebyshev(sigmoid, lo, hi, degree)
}

/// `x * sig(1.702 x)` with `sig` a fitted sigmoid.
pub fn gelu_poly(x: f64, sig: &PolyApprox) -> Result<f64> {
    let arg = GELU_SLOPE * x;
    sig.check(arg, "gelu_poly")?;
    Ok(x * sig.eval_unchecked(arg))
}

pub fn gelu_circuit<E: Evaluator>(ev: &mut E, x: &E::Value, sig: &PolyApprox) -> E::Value {
    let arg = ev.mul_plain(x, GELU_SLOPE);
    let s = sig.eval_circuit(ev, &arg);
    ev.mul(x, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polyapprox::circuit::TraceEvaluator;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn horner(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
    }

    #[test]
    fn constant_and_identity() {
        let c = PolyApprox::new(vec![2.5], -1.0, 1.0, |_| 2.5).unwrap();
        assert_eq!(eval_poly(&c, 0.3).unwrap(), 2.5);
        assert_eq!(c.depth(), 0);
        assert_eq!(c.max_error(), 0.0);
        let id = PolyApprox::new(vec![0.0, 1.0], 0.0, 5.0, |x| x).unwrap();
        assert_eq!(eval_poly(&id, 3.0).unwrap(), 3.0);
        assert_eq!(id.depth(), 1);
    }

    #[test]
    fn matches_horner() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coeffs: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = PolyApprox::new(coeffs.clone(), -2.0, 2.0, |x| horner(&coeffs, x)).unwrap();
        for _ in 0..50 {
            let x = rng.random_range(-2.0..2.0);
            let a = eval_poly(&p, x).unwrap();
            assert!((a - horner(&coeffs, x)).abs() < 1e-10);
        }
        assert!(p.max_error() < 1e-10);
        assert_eq!(p.depth(), 5);
    }

    #[test]
    fn traced_depth_within_cost_model() {
        for degree in 1..=33 {
            let coeffs = vec![0.5; degree + 1];
            let p = PolyApprox::new(coeffs, -1.0, 1.0, |_| 0.0).unwrap();
            let mut ev = TraceEvaluator::new();
            let x = ev.input(0.4);
            let y = p.eval_circuit(&mut ev, &x);
            // coefficient products are plaintext; the cost model charges one extra level for them
            assert_eq!(y.depth + 1, p.depth(), "degree {degree}");
        }
    }

    #[test]
    fn domain_violation() {
        let p = PolyApprox::new(vec![0.0, 1.0], 0.0, 1.0, |x| x).unwrap();
        assert!(matches!(eval_poly(&p, 1.5), Err(Error::Domain { .. })));
        assert!(PolyApprox::new(vec![1.0], 1.0, 1.0, |_| 1.0).is_err());
        assert!(fit_sigmoid(2.0, -2.0, 7).is_err());
        assert!(fit_sigmoid(-2.0, 2.0, 0).is_err());
    }

    #[test]
    fn sigmoid_fit_examples() {
        let fit = fit_sigmoid(-8.0, 8.0, 15).unwrap();
        assert!((eval_poly(&fit, 0.0).unwrap() - 0.5).abs() <= fit.max_error());
        let at = eval_poly(&fit, GELU_SLOPE).unwrap();
        assert!((at - sigmoid(GELU_SLOPE)).abs() <= fit.max_error());
        assert!((sigmoid(GELU_SLOPE) - 0.845_795_765_9).abs() < 1e-10);
        // odd symmetry around 1/2
        for (k, c) in fit.coefficients().iter().enumerate().skip(2).step_by(2) {
            assert!(c.abs() < 1e-9, "even coefficient {k} = {c}");
        }
    }

    #[test]
    fn sigmoid_error_shrinks_with_degree() {
        let errs: Vec<f64> = [7, 15, 31]
            .iter()
            .map(|&d| fit_sigmoid(-8.0, 8.0, d).unwrap().max_error())
            .collect();
        assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
    }

    #[test]
    fn max_error_certifies_grid() {
        let fit = fit_sigmoid(-6.0, 6.0, 11).unwrap();
        for x in grid(-6.0, 6.0) {
            assert!((eval_poly(&fit, x).unwrap() - sigmoid(x)).abs() <= fit.max_error());
        }
    }

    #[test]
    fn asymmetric_domain_fit() {
        let fit = fit_chebyshev(|x| x.exp(), 1.0, 3.0, 12).unwrap();
        assert!(fit.max_error() < 1e-8, "{}", fit.max_error());
    }

    #[test]
    fn gelu_examples() {
        let sig = fit_sigmoid(-8.0, 8.0, 15).unwrap();
        assert_eq!(gelu_poly(0.0, &sig).unwrap(), 0.0);
        assert!((gelu_poly(1.0, &sig).unwrap() - sigmoid(GELU_SLOPE)).abs() <= sig.max_error());
        let wide = fit_sigmoid(-20.0, 20.0, 31).unwrap();
        let g = gelu_poly(-10.0, &wide).unwrap();
        assert!((g - gelu(-10.0)).abs() <= 10.0 * wide.max_error());
        assert!(gelu(-10.0).abs() < 1e-6);
        assert!(matches!(gelu_poly(5.0, &sig), Err(Error::Domain { .. })));
    }

    #[test]
    fn json_roundtrip_evaluates_identically() {
        let fit = fit_sigmoid(-8.0, 8.0, 15).unwrap();
        let json = serde_json::to_string(&fit).unwrap();
        let back: PolyApprox = serde_json::from_str(&json).unwrap();
        for x in [-7.9, -1.0, 0.0, 0.33, 7.5] {
            assert!((eval_poly(&back, x).unwrap() - eval_poly(&fit, x).unwrap()).abs() < 1e-12);
        }
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["coefficients", "domain", "depth", "max_error"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let tampered = json.replace("\"depth\":5", "\"depth\":2");
        assert!(serde_json::from_str::<PolyApprox>(&tampered).is_err());
    }
}
