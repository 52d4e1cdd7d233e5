//! Row-wise attention normalizers and scaled dot-product attention.
//!
//! The PowerSoftmax family replaces `exp` with an even power `x^p`, so the
//! only non-polynomial step left is one division per row:
//!
//! * [`power_softmax`]: `x_j^p / sum_i x_i^p`
//! * [`lipschitz_power_softmax`]: `x_j^p / (eps + sum_i x_i^p)`
//! * [`stable_power_softmax`]: the Lipschitz form applied to `x / (max|x| + eps')`
//! * [`length_agnostic_power_softmax`]: `(x_j / L^(1/p))^p / (eps + mean_i x_i^p)`
//!
//! [`softmax`] is kept as the exponential baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

pub const DEFAULT_P: u32 = 4;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_EPSILON_PRIME: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Softmax,
    Power,
    PowerStable,
    PowerLipschitz,
    LengthAgnostic,
}

impl Variant {
    pub fn is_power_family(self) -> bool {
        !matches!(self, Variant::Softmax)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::Power => "power",
            Variant::PowerStable => "power_stable",
            Variant::PowerLipschitz => "power_lipschitz",
            Variant::LengthAgnostic => "length_agnostic",
        }
    }
}

/// Selects the normalizer and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: Variant,
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_epsilon_prime")]
    pub epsilon_prime: f64,
    pub d_k: usize,
    /// Multiplicative mask with entries in `[0, 1]`, shaped like `QK^T`.
    #[serde(default)]
    pub mask: Option<Matrix>,
}

fn default_p() -> u32 {
    DEFAULT_P
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_epsilon_prime() -> f64 {
    DEFAULT_EPSILON_PRIME
}

impl AttentionConfig {
    pub fn new(variant: Variant, d_k: usize) -> Self {
        AttentionConfig {
            variant,
            p: DEFAULT_P,
            epsilon: DEFAULT_EPSILON,
            epsilon_prime: DEFAULT_EPSILON_PRIME,
            d_k,
            mask: None,
        }
    }

    pub fn with_p(mut self, p: u32) -> Self {
        self.p = p;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_epsilon_prime(mut self, epsilon_prime: f64) -> Self {
        self.epsilon_prime = epsilon_prime;
        self
    }

    pub fn with_mask(mut self, mask: Matrix) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon = {}", self.epsilon)));
        }
        if !(self.epsilon_prime >= 0.0 && self.epsilon_prime.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_prime = {}",
                self.epsilon_prime
            )));
        }
        if self.d_k == 0 {
            return Err(Error::InvalidArgument("d_k must be positive".into()));
        }
        if let Some(m) = &self.mask {
            if m.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument("mask entries must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// One row of unnormalized attention scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow(Vec<f64>);

impl ScoreRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score row".into()));
        }
        Ok(ScoreRow(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ScoreRow {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Arithmetic format the normalizer runs in. `Half` rounds every
/// intermediate to IEEE binary16, reproducing the overflow and underflow
/// behaviour of reduced-precision training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Double,
    Half,
}

impl Precision {
    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            Precision::Double => v,
            Precision::Half => half::f16::from_f64(v).to_f64(),
        }
    }
}

pub(crate) fn check_p(p: u32) -> Result<()> {
    if p < 2 || p % 2 != 0 {
        return Err(Error::InvalidArgument(format!("p must be a positive even integer >= 2, got {p}")));
    }
    Ok(())
}

fn finite_or_err(out: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} produced a non-finite weight")));
    }
    Ok(out)
}

/// `x_j^p / (eps + sum_i x_i^p)` evaluated in `prec`.
fn proportional_core(x: &[f64], p: u32, eps: f64, prec: Precision, what: &str) -> Result<Vec<f64>> {
    let powered: Vec<f64> = x
        .iter()
        .map(|&v| prec.round(prec.round(v).powi(p as i32)))
        .collect();
    let mut sum = 0.0;
    for &v in &powered {
        sum = prec.round(sum + v);
    }
    let denom = prec.round(eps + sum);
    if denom == 0.0 {
        return Err(Error::DivisionByZero(format!("{what}: all-zero row with epsilon = 0")));
    }
    finite_or_err(powered.iter().map(|&v| prec.round(v / denom)).collect(), what)
}

fn softmax_core(x: &[f64], keep: Option<&[bool]>, prec: Precision) -> Result<Vec<f64>> {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let max = (0..x.len())
        .filter(|&j| kept(j))
        .map(|j| prec.round(x[j]))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // fully masked row
        return Ok(vec![0.0; x.len()]);
    }
    let e: Vec<f64> = (0..x.len())
        .map(|j| {
            if kept(j) {
                prec.round((prec.round(x[j]) - max).exp())
            } else {
                0.0
            }
        })
        .collect();
    let mut sum = 0.0;
    for &v in &e {
        sum = prec.round(sum + v);
    }
    finite_or_err(e.iter().map(|&v| prec.round(v / sum)).collect(), "softmax")
}

/// Exponential softmax with max subtraction.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    softmax_core(x, None, Precision::Double).expect("softmax is total on finite input")
}

/// Softmax restricted to the coordinates where `keep` is true; the rest get
/// weight zero. An all-false row yields zeros.
pub fn softmax_masked(x: &[f64], keep: &[bool]) -> Vec<f64> {
    softmax_core(x, Some(keep), Precision::Double).expect("softmax is total on finite input")
}

pub fn power_softmax(x: &[f64], p: u32) -> Result<Vec<f64>> {
    check_p(p)?;
    proportional_core(x, p, 0.0, Precision::Double, "power_softmax")
}

/// Total on every finite input when `epsilon > 0`; zero rows map to zeros.
pub fn lipschitz_power_softmax(x: &[f64], p: u32, epsilon: f64) -> Result<Vec<f64>> {
    check_p(p)?;
    proportional_core(x, p, epsilon, Precision::Double, "lipschitz_power_softmax")
}

/// Index of the entry with the largest magnitude; the lowest index wins ties.
pub fn argmax_abs(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if v.abs() > x[best].abs() {
            best = i;
        }
    }
    best
}

fn stable_core(x: &[f64], p: u32, eps_prime: f64, eps: f64, prec: Precision) -> Result<Vec<f64>> {
    let c = prec.round(x.iter().fold(0.0f64, |m, v| m.max(prec.round(*v).abs())) + eps_prime);
    let scaled: Vec<f64> = if c == 0.0 {
        vec![0.0; x.len()]
    } else {
        x.iter().map(|&v| prec.round(prec.round(v) / c)).collect()
    };
    proportional_core(&scaled, p, eps, prec, "stable_power_softmax")
}

/// Lipschitz PowerSoftmax of `x / c` with `c = max|x| + epsilon_prime`.
pub fn stable_power_softmax(x: &[f64], p: u32, epsilon_prime: f64, epsilon: f64) -> Result<Vec<f64>> {
    check_p(p)?;
    stable_core(x, p, epsilon_prime, epsilon, Precision::Double)
}

fn length_agnostic_core(x: &[f64], p: u32, eps: f64, prec: Precision) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("length-agnostic normalizer needs L >= 1".into()));
    }
    let len = x.len() as f64;
    let root = len.powf(1.0 / p as f64);
    let mut mean = 0.0;
    for &v in x {
        mean = prec.round(mean + prec.round(prec.round(v).powi(p as i32)));
    }
    mean = prec.round(mean / len);
    let denom = prec.round(eps + mean);
    if denom == 0.0 {
        return Err(Error::DivisionByZero(
            "length_agnostic_power_softmax: all-zero row with epsilon = 0".into(),
        ));
    }
    let out = x
        .iter()
        .map(|&v| {
            let num = prec.round(prec.round(prec.round(v) / root).powi(p as i32));
            prec.round(num / denom)
        })
        .collect();
    finite_or_err(out, "length_agnostic_power_softmax")
}

pub fn length_agnostic_power_softmax(x: &[f64], p: u32, epsilon: f64) -> Result<Vec<f64>> {
    check_p(p)?;
    length_agnostic_core(x, p, epsilon, Precision::Double)
}

/// Applies the configured normalizer to one row in the given precision.
/// `keep` marks unmasked coordinates and only matters for softmax, where a
/// zero score still carries weight.
pub fn normalize_row(
    x: &[f64],
    cfg: &AttentionConfig,
    keep: Option<&[bool]>,
    prec: Precision,
) -> Result<Vec<f64>> {
    match cfg.variant {
        Variant::Softmax => softmax_core(x, keep, prec),
        Variant::Power => {
            check_p(cfg.p)?;
            proportional_core(x, cfg.p, 0.0, prec, "power_softmax")
        }
        Variant::PowerLipschitz => {
            check_p(cfg.p)?;
            proportional_core(x, cfg.p, cfg.epsilon, prec, "lipschitz_power_softmax")
        }
        Variant::PowerStable => {
            check_p(cfg.p)?;
            stable_core(x, cfg.p, cfg.epsilon_prime, cfg.epsilon, prec)
        }
        Variant::LengthAgnostic => {
            check_p(cfg.p)?;
            length_agnostic_core(x, cfg.p, cfg.epsilon, prec)
        }
    }
}

/// `(Q K^T ⊙ M) / sqrt(d_k)`.
pub fn attention_scores(q: &Matrix, k: &Matrix, cfg: &AttentionConfig) -> Result<Matrix> {
    if q.cols() != cfg.d_k || k.cols() != cfg.d_k {
        return Err(Error::Shape(format!(
            "Q has {} and K has {} columns, expected d_k = {}",
            q.cols(),
            k.cols(),
            cfg.d_k
        )));
    }
    let mut s = matmul(q, &k.transpose())?;
    if let Some(m) = &cfg.mask {
        s = s.hadamard(m)?;
    }
    s.scale(1.0 / (cfg.d_k as f64).sqrt())
}

pub(crate) fn mask_keep_row(cfg: &AttentionConfig, row: usize) -> Option<Vec<bool>> {
    cfg.mask
        .as_ref()
        .map(|m| m.row(row).iter().map(|&v| v != 0.0).collect())
}

/// Row-normalized attention weights for precomputed scores.
pub fn normalize_scores(scores: &Matrix, cfg: &AttentionConfig, prec: Precision) -> Result<Matrix> {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let keep = mask_keep_row(cfg, r);
        let row = normalize_row(scores.row(r), cfg, keep.as_deref(), prec)?;
        out.set_row(r, &row)?;
    }
    Ok(out)
}

pub fn attention_weights(q: &Matrix, k: &Matrix, cfg: &AttentionConfig) -> Result<Matrix> {
    cfg.validate()?;
    normalize_scores(&attention_scores(q, k, cfg)?, cfg, Precision::Double)
}

/// `normalize((Q K^T ⊙ M) / sqrt(d_k)) V`.
pub fn attend(q: &Matrix, k: &Matrix, v: &Matrix, cfg: &AttentionConfig) -> Result<Matrix> {
    if v.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "V has {} rows but K has {}",
            v.rows(),
            k.rows()
        )));
    }
    matmul(&attention_weights(q, k, cfg)?, v)
}

/// Mean over query rows of `sum_j A[i,j] * |i - j|`, in tokens.
pub fn mean_attention_distance(a: &Matrix) -> Result<f64> {
    if a.rows() != a.cols() {
        return Err(Error::Shape(format!(
            "attention matrix must be square, got {:?}",
            a.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Shape("empty attention matrix".into()));
    }
    let n = a.rows();
    let total: f64 = (0..n)
        .map(|i| {
            a.row(i)
                .iter()
                .enumerate()
                .map(|(j, w)| w * i.abs_diff(j) as f64)
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// Lower-triangular 0/1 mask.
pub fn causal_mask(len: usize) -> Matrix {
    let mut m = Matrix::zeros(len, len);
    for i in 0..len {
        for j in 0..=i {
            m.set(i, j, 1.0);
        }
    }
    m
}
