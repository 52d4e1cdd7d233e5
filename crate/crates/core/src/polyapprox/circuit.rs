//! Arithmetic-circuit evaluators.
//!
//! Everything that must run under homomorphic encryption is written against
//! [`Evaluator`], which only offers additions and multiplications (with
//! ciphertexts or plaintext constants). [`PlainEvaluator`] runs the circuit on
//! `f64`; [`TraceEvaluator`] counts primitive ops and tracks the
//! multiplicative depth of every value.

use serde::Serialize;

pub trait Evaluator {
    type Value: Clone;

    /// A fresh input at depth zero.
    fn input(&mut self, v: f64) -> Self::Value;
    /// A constant encoded as a value at depth zero.
    fn constant(&mut self, c: f64) -> Self::Value;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn add_plain(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    fn mul_plain(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    /// Shadow value used for domain monitoring only; never feeds back into
    /// the circuit.
    fn peek(&self, a: &Self::Value) -> f64;

    fn square(&mut self, a: &Self::Value) -> Self::Value {
        self.mul(a, a)
    }

    fn sum(&mut self, values: &[Self::Value]) -> Self::Value {
        let mut acc = match values.first() {
            Some(v) => v.clone(),
            None => return self.constant(0.0),
        };
        for v in &values[1..] {
            acc = self.add(&acc, v);
        }
        acc
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PlainEvaluator;

impl Evaluator for PlainEvaluator {
    type Value = f64;

    fn input(&mut self, v: f64) -> f64 {
        v
    }
    fn constant(&mut self, c: f64) -> f64 {
        c
    }
    fn add(&mut self, a: &f64, b: &f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: &f64, b: &f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: &f64, b: &f64) -> f64 {
        a * b
    }
    fn add_plain(&mut self, a: &f64, c: f64) -> f64 {
        a + c
    }
    fn mul_plain(&mut self, a: &f64, c: f64) -> f64 {
        a * c
    }
    fn peek(&self, a: &f64) -> f64 {
        *a
    }
}

/// Value carried by [`TraceEvaluator`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Traced {
    pub value: f64,
    /// Ciphertext-ciphertext multiplications on the longest path to this value.
    pub depth: u32,
}

/// Primitive-operation histogram.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub add: u64,
    pub mul: u64,
    pub add_plain: u64,
    pub mul_plain: u64,
    pub exp: u64,
    pub div: u64,
    pub sqrt: u64,
    pub compare: u64,
}

impl OpCounts {
    /// Operations outside `{add, mul, plaintext constant}`.
    pub fn non_polynomial(&self) -> u64 {
        self.exp + self.div + self.sqrt + self.compare
    }
}

/// Records op counts and depths. Plaintext constants are free: multiplying by
/// one does not add depth, matching the convention that public scaling
/// factors cost nothing.
#[derive(Debug, Default, Clone)]
pub struct TraceEvaluator {
    counts: OpCounts,
    max_depth: u32,
}

impl TraceEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> OpCounts {
        self.counts
    }

    /// Deepest value produced so far.
    pub fn max_depth(&self) -> u32 {
        self.max_depth
    }

    fn out(&mut self, value: f64, depth: u32) -> Traced {
        self.max_depth = self.max_depth.max(depth);
        Traced { value, depth }
    }
}

impl Evaluator for TraceEvaluator {
    type Value = Traced;

    fn input(&mut self, v: f64) -> Traced {
        Traced { value: v, depth: 0 }
    }
    fn constant(&mut self, c: f64) -> Traced {
        Traced { value: c, depth: 0 }
    }
    fn add(&mut self, a: &Traced, b: &Traced) -> Traced {
        self.counts.add += 1;
        self.out(a.value + b.value, a.depth.max(b.depth))
    }
    fn sub(&mut self, a: &Traced, b: &Traced) -> Traced {
        self.counts.add += 1;
        self.out(a.value - b.value, a.depth.max(b.depth))
    }
    fn mul(&mut self, a: &Traced, b: &Traced) -> Traced {
        self.counts.mul += 1;
        self.out(a.value * b.value, a.depth.max(b.depth) + 1)
    }
    fn add_plain(&mut self, a: &Traced, c: f64) -> Traced {
        self.counts.add_plain += 1;
        self.out(a.value + c, a.depth)
    }
    fn mul_plain(&mut self, a: &Traced, c: f64) -> Traced {
        self.counts.mul_plain += 1;
        self.out(a.value * c, a.depth)
    }
    fn peek(&self, a: &Traced) -> f64 {
        a.value
    }
}

/// Operations with no polynomial circuit. Only the tracer implements them,
/// so exact reference computations can be traced for comparison.
pub trait NonPolynomial: Evaluator {
    fn exp(&mut self, a: &Self::Value) -> Self::Value;
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn sqrt(&mut self, a: &Self::Value) -> Self::Value;
    fn max(&mut self, a: &Self::Value, b: &Self::Value) -> Self::Value;
}

impl NonPolynomial for TraceEvaluator {
    fn exp(&mut self, a: &Traced) -> Traced {
        self.counts.exp += 1;
        self.out(a.value.exp(), a.depth)
    }
    fn div(&mut self, a: &Traced, b: &Traced) -> Traced {
        self.counts.div += 1;
        self.out(a.value / b.value, a.depth.max(b.depth))
    }
    fn sqrt(&mut self, a: &Traced) -> Traced {
        self.counts.sqrt += 1;
        self.out(a.value.sqrt(), a.depth)
    }
    fn max(&mut self, a: &Traced, b: &Traced) -> Traced {
        self.counts.compare += 1;
        self.out(a.value.max(b.value), a.depth.max(b.depth))
    }
}

pub(crate) fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// `[x^0, x^1, ..., x^degree]` where `x^k` has depth `ceil(log2 k)`:
/// `x^k = x^(2^m) * x^(k - 2^m)` with `2^m` the largest power of two below `k`.
pub fn power_basis<E: Evaluator>(ev: &mut E, x: &E::Value, degree: usize) -> Vec<E::Value> {
    let mut powers = Vec::with_capacity(degree + 1);
    powers.push(ev.constant(1.0));
    if degree >= 1 {
        powers.push(x.clone());
    }
    for k in 2..=degree {
        let high = 1usize << (usize::BITS - 1 - (k - 1).leading_zeros());
        let v = if high == k {
            ev.square(&powers[k / 2])
        } else {
            ev.mul(&powers[high], &powers[k - high])
        };
        powers.push(v);
    }
    powers
}

/// `x^p` at depth `ceil(log2 p)`.
pub fn power<E: Evaluator>(ev: &mut E, x: &E::Value, p: u32) -> E::Value {
    if p == 0 {
        return ev.constant(1.0);
    }
    // binary powers x, x^2, x^4, ... then multiply the needed ones as a balanced tree
    let mut squares = vec![x.clone()];
    while (1u32 << squares.len()) <= p {
        let last = squares.last().expect("nonempty").clone();
        squares.push(ev.square(&last));
    }
    // (depth, value); always merge the two shallowest so the tree stays within ceil(log2 p)
    let mut factors: Vec<(u32, E::Value)> = (0..squares.len())
        .filter(|&i| p & (1 << i) != 0)
        .map(|i| (i as u32, squares[i].clone()))
        .collect();
    while factors.len() > 1 {
        factors.sort_by(|a, b| b.0.cmp(&a.0));
        let (da, a) = factors.pop().expect("len > 1");
        let (db, b) = factors.pop().expect("len > 1");
        factors.push((da.max(db) + 1, ev.mul(&a, &b)));
    }
    factors.pop().expect("p > 0").1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(4), 2);
        assert_eq!(ceil_log2(15), 4);
        assert_eq!(ceil_log2(16), 4);
        assert_eq!(ceil_log2(17), 5);
    }

    #[test]
    fn power_basis_values_and_depths() {
        let mut ev = TraceEvaluator::new();
        let x = ev.input(1.5);
        let basis = power_basis(&mut ev, &x, 17);
        for (k, v) in basis.iter().enumerate() {
            assert!((v.value - 1.5f64.powi(k as i32)).abs() < 1e-9 * v.value.abs().max(1.0));
            assert_eq!(v.depth, ceil_log2(k as u64), "k = {k}");
        }
    }

    #[test]
    fn power_depth_is_ceil_log2() {
        for p in 1..=40u32 {
            let mut ev = TraceEvaluator::new();
            let x = ev.input(1.01);
            let y = power(&mut ev, &x, p);
            assert!((y.value - 1.01f64.powi(p as i32)).abs() < 1e-12 * y.value, "p = {p}");
            assert_eq!(y.depth, ceil_log2(p as u64), "p = {p}");
        }
    }

    #[test]
    fn tracer_sees_non_polynomial_ops() {
        // exact softmax traced through the non-polynomial extension
        let mut ev = TraceEvaluator::new();
        let xs: Vec<Traced> = [0.3, -1.0, 2.0].iter().map(|&v| ev.input(v)).collect();
        let m = xs[1..].iter().fold(xs[0], |m, x| ev.max(&m, x));
        let e: Vec<Traced> = xs
            .iter()
            .map(|x| {
                let d = ev.sub(x, &m);
                ev.exp(&d)
            })
            .collect();
        let s = ev.sum(&e);
        let _y: Vec<Traced> = e.iter().map(|v| ev.div(v, &s)).collect();
        let c = ev.counts();
        assert_eq!(c.compare, 2);
        assert_eq!(c.exp, 3);
        assert_eq!(c.div, 3);
        assert_eq!(c.non_polynomial(), 8);
    }

    #[test]
    fn plaintext_ops_are_free() {
        let mut ev = TraceEvaluator::new();
        let x = ev.input(2.0);
        let y = ev.mul_plain(&x, 3.0);
        let z = ev.add_plain(&y, 1.0);
        assert_eq!(z, Traced { value: 7.0, depth: 0 });
        let w = ev.mul(&z, &x);
        assert_eq!(w.depth, 1);
        assert_eq!(ev.counts().mul_plain, 1);
        assert_eq!(ev.counts().non_polynomial(), 0);
    }
}
