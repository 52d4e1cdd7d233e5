//! Hand-derived vector-Jacobian products.
//!
//! Every function takes the forward input and the upstream gradient `u` of
//! the output and returns `J^T u`, the gradient with respect to the input.

use crate::attention::{argmax_abs, check_p, AttentionConfig, Variant};
use crate::error::{Error, Result};
use crate::polyapprox::{sigmoid, GELU_SLOPE};
use crate::polymodel::block::{BlockCache, LayerNormCache};
use crate::polymodel::BlockWeights;
use crate::tensor::{matmul, Matrix};

fn same_len(x: &[f64], u: &[f64]) -> Result<()> {
    if x.len() != u.len() {
        return Err(Error::Shape(format!("input has {} entries, upstream {}", x.len(), u.len())));
    }
    Ok(())
}

/// Backward of `x_j^p / (eps + sum_i x_i^p)`:
/// `g_k = p x_k^(p-1) / D * (u_k - sum_j u_j y_j)`.
fn proportional_backward(x: &[f64], p: u32, eps: f64, u: &[f64], what: &str) -> Result<Vec<f64>> {
    same_len(x, u)?;
    let pi = p as i32;
    let denom = eps + x.iter().map(|v| v.powi(pi)).sum::<f64>();
    if denom == 0.0 {
        return Err(Error::DivisionByZero(format!("{what}: all-zero row with epsilon = 0")));
    }
    let dot: f64 = x.iter().zip(u).map(|(v, w)| w * v.powi(pi) / denom).sum();
    Ok(x.iter()
        .zip(u)
        .map(|(v, w)| p as f64 * v.powi(pi - 1) / denom * (w - dot))
        .collect())
}

pub fn backward_power_softmax(x: &[f64], p: u32, upstream: &[f64]) -> Result<Vec<f64>> {
    check_p(p)?;
    proportional_backward(x, p, 0.0, upstream, "power_softmax")
}

pub fn backward_lipschitz_power_softmax(x: &[f64], p: u32, epsilon: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    check_p(p)?;
    proportional_backward(x, p, epsilon, upstream, "lipschitz_power_softmax")
}

/// Uses the subgradient of `max|x|` at the lowest-index maximizer.
pub fn backward_stable_power_softmax(
    x: &[f64],
    p: u32,
    epsilon_prime: f64,
    epsilon: f64,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check_p(p)?;
    same_len(x, upstream)?;
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let m = argmax_abs(x);
    let c = x[m].abs() + epsilon_prime;
    if c == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    let z: Vec<f64> = x.iter().map(|v| v / c).collect();
    let gz = proportional_backward(&z, p, epsilon, upstream, "stable_power_softmax")?;
    // z_j = x_j / c, dc/dx_m = sign(x_m)
    let mut gx: Vec<f64> = gz.iter().map(|g| g / c).collect();
    let through_c: f64 = gz.iter().zip(x).map(|(g, v)| g * v).sum::<f64>() / (c * c);
    gx[m] -= through_c * x[m].signum();
    Ok(gx)
}

/// Equal to the Lipschitz form with `eps * L`.
pub fn backward_length_agnostic_power_softmax(x: &[f64], p: u32, epsilon: f64, upstream: &[f64]) -> Result<Vec<f64>> {
    check_p(p)?;
    proportional_backward(x, p, epsilon * x.len() as f64, upstream, "length_agnostic_power_softmax")
}

/// `g = y * (u - sum_j u_j y_j)` from the forward output `y`.
pub fn backward_softmax_from_output(y: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    same_len(y, upstream)?;
    let dot: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum();
    Ok(y.iter().zip(upstream).map(|(a, b)| a * (b - dot)).collect())
}

/// Backward of the configured normalizer on one row. `y` is the forward
/// output, used by softmax only.
pub fn normalize_row_backward(x: &[f64], y: &[f64], cfg: &AttentionConfig, upstream: &[f64]) -> Result<Vec<f64>> {
    match cfg.variant {
        Variant::Softmax => backward_softmax_from_output(y, upstream),
        Variant::Power => backward_power_softmax(x, cfg.p, upstream),
        Variant::PowerLipschitz => backward_lipschitz_power_softmax(x, cfg.p, cfg.epsilon, upstream),
        Variant::PowerStable => backward_stable_power_softmax(x, cfg.p, cfg.epsilon_prime, cfg.epsilon, upstream),
        Variant::LengthAgnostic => backward_length_agnostic_power_softmax(x, cfg.p, cfg.epsilon, upstream),
    }
}

/// Gradients of LayerNorm given its cache and the upstream gradient of the
/// output: `(dx, dgain, dbias)`.
pub(crate) fn layernorm_backward(cache: &LayerNormCache, gain: &[f64], dy: &Matrix) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let (rows, d) = dy.shape();
    let mut dx = Matrix::zeros(rows, d);
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for r in 0..rows {
        let n = cache.normalized.row(r);
        let up = dy.row(r);
        let dn: Vec<f64> = up.iter().zip(gain).map(|(a, g)| a * g).collect();
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let inv = cache.inv_std[r];
        for c in 0..d {
            dx.set(r, c, inv * (dn[c] - mean_dn - n[c] * mean_dn_n));
            dgain[c] += up[c] * n[c];
            dbias[c] += up[c];
        }
    }
    Ok((dx, dgain, dbias))
}

/// Backward of exact LayerNorm on a single row.
pub fn backward_layernorm(x: &[f64], gain: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    same_len(x, upstream)?;
    let row = Matrix::new(1, x.len(), x.to_vec())?;
    let bias = vec![0.0; x.len()];
    let (_, cache) = crate::polymodel::block::layernorm_rows(&row, gain, &bias)?;
    let up = Matrix::new(1, x.len(), upstream.to_vec())?;
    Ok(layernorm_backward(&cache, gain, &up)?.0.into_data())
}

fn gelu_derivative(u: f64) -> f64 {
    let s = sigmoid(GELU_SLOPE * u);
    s + GELU_SLOPE * u * s * (1.0 - s)
}

/// Gradients of one block: the input gradient and a [`BlockWeights`]
/// holding the gradient of every parameter.
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub dx: Matrix,
    pub weights: BlockWeights,
}

pub fn block_backward(
    cache: &BlockCache,
    w: &BlockWeights,
    cfg: &AttentionConfig,
    score_scale: f64,
    d_out: &Matrix,
) -> Result<BlockGrads> {
    if d_out.shape() != cache.out.shape() {
        return Err(Error::Shape(format!(
            "upstream is {:?}, block output is {:?}",
            d_out.shape(),
            cache.out.shape()
        )));
    }
    let len = cache.x.rows();
    let d = w.d_model();
    let dk = w.d_k();

    // FFN
    let dw2 = matmul(&cache.g.transpose(), d_out)?;
    let dg = matmul(d_out, &w.w2.transpose())?;
    let du = dg.zip_with(&cache.u, |a, u| a * gelu_derivative(u))?;
    let dw1 = matmul(&cache.h2.transpose(), &du)?;
    let dh2 = matmul(&du, &w.w1.transpose())?;
    let (dx1_ln, dln2_gain, dln2_bias) = layernorm_backward(&cache.ln2, &w.ln2_gain, &dh2)?;
    let dx1 = d_out.add(&dx1_ln)?;

    // attention
    let dwo = matmul(&cache.concat.transpose(), &dx1)?;
    let dconcat = matmul(&dx1, &w.wo.transpose())?;
    let mut dq = Matrix::zeros(len, d);
    let mut dk_all = Matrix::zeros(len, d);
    let mut dv = Matrix::zeros(len, d);
    let coef = score_scale / (dk as f64).sqrt();
    for (c, head) in cache.heads.iter().enumerate() {
        let lo = c * dk;
        let dc = dconcat.col_slice(lo, lo + dk)?;
        let da = matmul(&dc, &head.v.transpose())?;
        dv.set_col_slice(lo, &matmul(&head.weights.transpose(), &dc)?)?;
        let mut ds = Matrix::zeros(len, len);
        for i in 0..len {
            let g = normalize_row_backward(head.scores.row(i), head.weights.row(i), cfg, da.row(i))?;
            let g: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(j, a)| a * coef * cfg.mask.as_ref().map_or(1.0, |m| m.get(i, j)))
                .collect();
            ds.set_row(i, &g)?;
        }
        dq.set_col_slice(lo, &matmul(&ds, &head.k)?)?;
        dk_all.set_col_slice(lo, &matmul(&ds.transpose(), &head.q)?)?;
    }
    let h1t = cache.h1.transpose();
    let dwq = matmul(&h1t, &dq)?;
    let dwk = matmul(&h1t, &dk_all)?;
    let dwv = matmul(&h1t, &dv)?;
    let mut dh1 = matmul(&dq, &w.wq.transpose())?;
    dh1.add_assign(&matmul(&dk_all, &w.wk.transpose())?)?;
    dh1.add_assign(&matmul(&dv, &w.wv.transpose())?)?;
    let (dx_ln, dln1_gain, dln1_bias) = layernorm_backward(&cache.ln1, &w.ln1_gain, &dh1)?;
    let dx = dx1.add(&dx_ln)?;

    Ok(BlockGrads {
        dx,
        weights: BlockWeights {
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wo: dwo,
            w1: dw1,
            w2: dw2,
            ln1_gain: dln1_gain,
            ln1_bias: dln1_bias,
            ln2_gain: dln2_gain,
            ln2_bias: dln2_bias,
            heads: w.heads,
        },
    })
}
