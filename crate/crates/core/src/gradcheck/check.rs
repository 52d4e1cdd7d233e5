//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::backward::{
    backward_layernorm, backward_length_agnostic_power_softmax, backward_lipschitz_power_softmax,
    backward_power_softmax, backward_softmax_from_output, backward_stable_power_softmax, block_backward,
};
use crate::attention::{
    length_agnostic_power_softmax, lipschitz_power_softmax, power_softmax, softmax, stable_power_softmax,
    AttentionConfig,
};
use crate::error::{Error, Result};
use crate::polymodel::block::{block_forward, layernorm_exact, BlockOptions};
use crate::polymodel::BlockWeights;
use crate::tensor::Matrix;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

const UPSTREAM_SEED: u64 = 0x5eed_0001;

/// A map `Matrix -> Matrix` with an analytic vector-Jacobian product.
pub trait Differentiable {
    fn name(&self) -> String;
    fn forward(&self, x: &Matrix) -> Result<Matrix>;
    /// Gradient of `<upstream, forward(x)>` with respect to `x`.
    fn vjp(&self, x: &Matrix, upstream: &Matrix) -> Result<Matrix>;
}

#[derive(Debug, Clone, Serialize)]
pub struct GradResult {
    pub analytic: Matrix,
    pub numeric: Matrix,
    /// `max |a - n| / (|a| + |n| + 1e-12)` over coordinates.
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `f.vjp` against central differences of `<u, f(x)>` with a
/// seeded Gaussian `u`.
pub fn grad_check(f: &dyn Differentiable, x: &Matrix, tolerance: f64) -> Result<GradResult> {
    let y = f.forward(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(UPSTREAM_SEED);
    let u = Matrix::random_normal(y.rows(), y.cols(), 1.0, &mut rng);
    let analytic = f.vjp(x, &u)?;
    if analytic.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "{}: gradient is {:?}, input is {:?}",
            f.name(),
            analytic.shape(),
            x.shape()
        )));
    }
    let mut numeric = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let x0 = x.get(r, c);
            probe.set(r, c, x0 + STEP);
            let plus = dot(&u, &f.forward(&probe)?);
            probe.set(r, c, x0 - STEP);
            let minus = dot(&u, &f.forward(&probe)?);
            probe.set(r, c, x0);
            let n = (plus - minus) / (2.0 * STEP);
            if !n.is_finite() {
                return Err(Error::NonFinite(format!("{}: numeric derivative at ({r}, {c})", f.name())));
            }
            numeric.set(r, c, n);
        }
    }
    let max_rel_err = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max);
    Ok(GradResult {
        analytic,
        numeric,
        max_rel_err,
        tolerance,
    })
}

/// A random input away from the kinks of the stable normalizer: entry
/// magnitudes in `[0.25, 2]` and, per row, a unique largest magnitude by a
/// margin of at least `1e-2`.
pub fn smooth_input<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        loop {
            let x: Vec<f64> = (0..cols)
                .map(|_| {
                    let m = rng.random_range(0.25..2.0);
                    if rng.random_bool(0.5) { m } else { -m }
                })
                .collect();
            let mut mags: Vec<f64> = x.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if cols < 2 || mags[0] - mags[1] > 1e-2 {
                data.extend(x);
                break;
            }
        }
    }
    Matrix::new(rows, cols, data).expect("finite by construction")
}

pub struct Identity;

impl Differentiable for Identity {
    fn name(&self) -> String {
        "identity".into()
    }
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.clone())
    }
    fn vjp(&self, _x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        Ok(upstream.clone())
    }
}

type RowFn = Box<dyn Fn(&[f64]) -> Result<Vec<f64>>>;
type RowVjp = Box<dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>>>;

/// A function applied independently to every row.
pub struct RowOp {
    name: String,
    forward: RowFn,
    vjp: RowVjp,
}

impl RowOp {
    pub fn power_softmax(p: u32) -> Self {
        RowOp {
            name: format!("power_softmax(p={p})"),
            forward: Box::new(move |x| power_softmax(x, p)),
            vjp: Box::new(move |x, u| backward_power_softmax(x, p, u)),
        }
    }

    pub fn lipschitz(p: u32, eps: f64) -> Self {
        RowOp {
            name: format!("lipschitz_power_softmax(p={p})"),
            forward: Box::new(move |x| lipschitz_power_softmax(x, p, eps)),
            vjp: Box::new(move |x, u| backward_lipschitz_power_softmax(x, p, eps, u)),
        }
    }

    pub fn stable(p: u32, eps_prime: f64, eps: f64) -> Self {
        RowOp {
            name: format!("stable_power_softmax(p={p})"),
            forward: Box::new(move |x| stable_power_softmax(x, p, eps_prime, eps)),
            vjp: Box::new(move |x, u| backward_stable_power_softmax(x, p, eps_prime, eps, u)),
        }
    }

    pub fn length_agnostic(p: u32, eps: f64) -> Self {
        RowOp {
            name: format!("length_agnostic_power_softmax(p={p})"),
            forward: Box::new(move |x| length_agnostic_power_softmax(x, p, eps)),
            vjp: Box::new(move |x, u| backward_length_agnostic_power_softmax(x, p, eps, u)),
        }
    }

    pub fn softmax() -> Self {
        RowOp {
            name: "softmax".into(),
            forward: Box::new(|x| Ok(softmax(x))),
            vjp: Box::new(|x, u| backward_softmax_from_output(&softmax(x), u)),
        }
    }

    pub fn layernorm(gain: Vec<f64>, bias: Vec<f64>) -> Self {
        let g2 = gain.clone();
        RowOp {
            name: "layernorm_exact".into(),
            forward: Box::new(move |x| layernorm_exact(x, &gain, &bias)),
            vjp: Box::new(move |x, u| backward_layernorm(x, &g2, u)),
        }
    }
}

impl Differentiable for RowOp {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let rows = (0..x.rows()).map(|r| (self.forward)(x.row(r))).collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    fn vjp(&self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        let rows = (0..x.rows())
            .map(|r| (self.vjp)(x.row(r), upstream.row(r)))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }
}

/// The exact block as a function of its input.
pub struct BlockOp {
    pub weights: BlockWeights,
    pub cfg: AttentionConfig,
}

impl Differentiable for BlockOp {
    fn name(&self) -> String {
        format!("exact_block({})", self.cfg.variant.name())
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(block_forward(x, &self.weights, &self.cfg, BlockOptions::default())?.out)
    }

    fn vjp(&self, x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        let cache = block_forward(x, &self.weights, &self.cfg, BlockOptions::default())?;
        Ok(block_backward(&cache, &self.weights, &self.cfg, 1.0, upstream)?.dx)
    }
}
