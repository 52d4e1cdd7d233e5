//! Exact pre-norm transformer block: `x + Attn(LN(x))`, then `+ FFN(LN(.))`.

use crate::attention::{attention_scores, normalize_scores, AttentionConfig, Precision};
use crate::error::{Error, Result};
use crate::polyapprox::gelu;
use crate::tensor::{matmul, Matrix};

use super::weights::BlockWeights;

pub const LAYERNORM_DELTA: f64 = 1e-5;

/// `(x - mean) / sqrt(var + delta) * gain + bias` with population variance.
pub fn layernorm_exact(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument("layernorm needs at least two features".into()));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape(format!(
            "layernorm row has {} features but gain/bias have {}/{}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYERNORM_DELTA).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect())
}

/// Per-row LayerNorm intermediates.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
    /// `var + delta` per row, the input of the inverse square root.
    pub shifted_var: Vec<f64>,
}

pub(crate) fn layernorm_rows(x: &Matrix, gain: &[f64], bias: &[f64]) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if d < 2 || gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!("layernorm over {d} features with gain/bias {}/{}", gain.len(), bias.len())));
    }
    let mut out = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut shifted_var = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let sv = var + LAYERNORM_DELTA;
        let inv = 1.0 / sv.sqrt();
        for c in 0..d {
            let n = (row[c] - mean) * inv;
            normalized.set(r, c, n);
            out.set(r, c, n * gain[c] + bias[c]);
        }
        inv_std.push(inv);
        shifted_var.push(sv);
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
            shifted_var,
        },
    ))
}

/// Knobs for the training forward pass. The defaults give the plain block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub precision: Precision,
    /// Fixed multiplier applied to every attention score before normalizing.
    pub score_scale: f64,
}

impl Default for BlockOptions {
    fn default() -> Self {
        BlockOptions {
            precision: Precision::Double,
            score_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Normalizer input.
    pub scores: Matrix,
    pub weights: Matrix,
}

/// Every intermediate of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x: Matrix,
    pub ln1: LayerNormCache,
    pub h1: Matrix,
    pub heads: Vec<HeadCache>,
    pub concat: Matrix,
    pub x1: Matrix,
    pub ln2: LayerNormCache,
    pub h2: Matrix,
    pub u: Matrix,
    pub g: Matrix,
    pub out: Matrix,
}

pub(crate) fn check_block_inputs(x: &Matrix, w: &BlockWeights, cfg: &AttentionConfig) -> Result<()> {
    w.validate()?;
    cfg.validate()?;
    if x.cols() != w.d_model() {
        return Err(Error::Shape(format!(
            "input has {} features, block expects d_model = {}",
            x.cols(),
            w.d_model()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::Shape("empty input sequence".into()));
    }
    if cfg.d_k != w.d_k() {
        return Err(Error::Shape(format!(
            "attention d_k = {} but block heads have d_k = {}",
            cfg.d_k,
            w.d_k()
        )));
    }
    if let Some(m) = &cfg.mask {
        if m.shape() != (x.rows(), x.rows()) {
            return Err(Error::Shape(format!(
                "mask is {:?}, sequence length is {}",
                m.shape(),
                x.rows()
            )));
        }
    }
    Ok(())
}

pub fn block_forward(x: &Matrix, w: &BlockWeights, cfg: &AttentionConfig, opts: BlockOptions) -> Result<BlockCache> {
    check_block_inputs(x, w, cfg)?;
    let dk = w.d_k();
    let (h1, ln1) = layernorm_rows(x, &w.ln1_gain, &w.ln1_bias)?;
    let q = matmul(&h1, &w.wq)?;
    let k = matmul(&h1, &w.wk)?;
    let v = matmul(&h1, &w.wv)?;
    let mut concat = Matrix::zeros(x.rows(), w.d_model());
    let mut heads = Vec::with_capacity(w.heads);
    for c in 0..w.heads {
        let (lo, hi) = (c * dk, (c + 1) * dk);
        let qc = q.col_slice(lo, hi)?;
        let kc = k.col_slice(lo, hi)?;
        let vc = v.col_slice(lo, hi)?;
        let mut scores = attention_scores(&qc, &kc, cfg)?;
        if opts.score_scale != 1.0 {
            scores = scores.scale(opts.score_scale)?;
        }
        let weights = normalize_scores(&scores, cfg, opts.precision)?;
        concat.set_col_slice(lo, &matmul(&weights, &vc)?)?;
        heads.push(HeadCache {
            q: qc,
            k: kc,
            v: vc,
            scores,
            weights,
        });
    }
    let x1 = x.add(&matmul(&concat, &w.wo)?)?;
    let (h2, ln2) = layernorm_rows(&x1, &w.ln2_gain, &w.ln2_bias)?;
    let u = matmul(&h2, &w.w1)?;
    let g = u.map(gelu)?;
    let out = x1.add(&matmul(&g, &w.w2)?)?;
    Ok(BlockCache {
        x: x.clone(),
        ln1,
        h1,
        heads,
        concat,
        x1,
        ln2,
        h2,
        u,
        g,
        out,
    })
}

/// Exact LayerNorm, exact GELU and the configured attention normalizer.
pub fn exact_block(x: &Matrix, w: &BlockWeights, cfg: &AttentionConfig) -> Result<Matrix> {
    Ok(block_forward(x, w, cfg, BlockOptions::default())?.out)
}

/// Normalizer inputs of every head, in head order.
pub fn head_scores(x: &Matrix, w: &BlockWeights, cfg: &AttentionConfig) -> Result<Vec<Matrix>> {
    Ok(block_forward(x, w, cfg, BlockOptions::default())?
        .heads
        .into_iter()
        .map(|h| h.scores)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar-loop reference block sharing nothing with the code above
    /// except the normalizer definitions.
    fn reference_block(x: &Matrix, w: &BlockWeights, cfg: &AttentionConfig) -> Vec<Vec<f64>> {
        let (l, d, dk) = (x.rows(), w.d_model(), w.d_k());
        let ln = |rows: &Vec<Vec<f64>>, g: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    let mut m = 0.0;
                    for v in r {
                        m += v;
                    }
                    m /= d as f64;
                    let mut s = 0.0;
                    for v in r {
                        s += (v - m).powi(2);
                    }
                    let sd = (s / d as f64 + 1e-5).sqrt();
                    (0..d).map(|i| (r[i] - m) / sd * g[i] + b[i]).collect()
                })
                .collect()
        };
        let mm = |a: &Vec<Vec<f64>>, b: &Matrix| -> Vec<Vec<f64>> {
            a.iter()
                .map(|r| {
                    (0..b.cols())
                        .map(|j| (0..b.rows()).map(|t| r[t] * b.get(t, j)).sum())
                        .collect()
                })
                .collect()
        };
        let xs: Vec<Vec<f64>> = (0..l).map(|i| x.row(i).to_vec()).collect();
        let h = ln(&xs, &w.ln1_gain, &w.ln1_bias);
        let (q, k, v) = (mm(&h, &w.wq), mm(&h, &w.wk), mm(&h, &w.wv));
        let mut o = vec![vec![0.0; d]; l];
        for c in 0..w.heads {
            for i in 0..l {
                let mut s = vec![0.0; l];
                for (j, sj) in s.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for t in c * dk..(c + 1) * dk {
                        dot += q[i][t] * k[j][t];
                    }
                    let m = cfg.mask.as_ref().map_or(1.0, |m| m.get(i, j));
                    *sj = dot * m / (dk as f64).sqrt();
                }
                let a = crate::attention::normalize_row(&s, cfg, None, Precision::Double).unwrap();
                for t in c * dk..(c + 1) * dk {
                    o[i][t] = (0..l).map(|j| a[j] * v[j][t]).sum();
                }
            }
        }
        let proj = mm(&o, &w.wo);
        let x1: Vec<Vec<f64>> = (0..l).map(|i| (0..d).map(|t| xs[i][t] + proj[i][t]).collect()).collect();
        let h2 = ln(&x1, &w.ln2_gain, &w.ln2_bias);
        let u = mm(&h2, &w.w1);
        let g: Vec<Vec<f64>> = u
            .iter()
            .map(|r| r.iter().map(|&z| z / (1.0 + (-1.702 * z).exp())).collect())
            .collect();
        let f = mm(&g, &w.w2);
        (0..l).map(|i| (0..d).map(|t| x1[i][t] + f[i][t]).collect()).collect()
    }

    #[test]
    fn layernorm_examples() {
        let out = layernorm_exact(&[3.0, 3.0, 3.0], &[2.0; 3], &[0.5, -1.0, 0.0]).unwrap();
        assert_eq!(out, vec![0.5, -1.0, 0.0]);
        let out = layernorm_exact(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[0] - expect).abs() < 1e-15 && (out[1] + expect).abs() < 1e-15);
        assert!(layernorm_exact(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn layernorm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let bias: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let out = layernorm_exact(&x, &vec![1.0; n], &bias).unwrap();
            let nf = n as f64;
            let bmean = bias.iter().sum::<f64>() / nf;
            let omean = out.iter().sum::<f64>() / nf;
            assert!((omean - bmean).abs() < 1e-6);
            let var = out
                .iter()
                .zip(&bias)
                .map(|(o, b)| (o - b).powi(2))
                .sum::<f64>()
                / nf;
            let xm = x.iter().sum::<f64>() / nf;
            let xv = x.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / nf;
            assert!((var - xv / (xv + 1e-5)).abs() < 1e-9);
            if xv >= 10.0 {
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_input_straight_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = BlockWeights::random(4, 2, 8, &mut rng).unwrap();
        w.ln1_gain = vec![1.0; 4];
        w.ln2_gain = vec![1.0; 4];
        w.ln1_bias = vec![0.0; 4];
        w.ln2_bias = vec![0.0; 4];
        let cfg = AttentionConfig::new(Variant::LengthAgnostic, 2);
        let out = exact_block(&Matrix::zeros(3, 4), &w, &cfg).unwrap();
        // LN of zeros is zero, so Q=K=V=0 and attention adds nothing; the
        // second LN sees zeros again and GELU(0) = 0.
        assert_eq!(out, Matrix::zeros(3, 4));
    }

    #[test]
    fn matches_reference_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (variant, heads) in [
            (Variant::Softmax, 1),
            (Variant::Power, 1),
            (Variant::PowerStable, 1),
            (Variant::PowerLipschitz, 2),
            (Variant::LengthAgnostic, 2),
        ] {
            let w = BlockWeights::random(4, heads, 8, &mut rng).unwrap();
            let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
            let mut cfg = AttentionConfig::new(variant, 4 / heads);
            if variant.is_power_family() {
                cfg = cfg.with_mask(crate::attention::causal_mask(3));
            }
            let got = exact_block(&x, &w, &cfg).unwrap();
            let want = reference_block(&x, &w, &cfg);
            for i in 0..3 {
                for t in 0..4 {
                    assert!((got.get(i, t) - want[i][t]).abs() < 1e-10, "{variant:?}");
                }
            }
        }
    }

    #[test]
    fn residual_only_when_projections_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = BlockWeights::random(8, 2, 16, &mut rng).unwrap();
        w.wo = Matrix::zeros(8, 8);
        w.w2 = Matrix::zeros(16, 8);
        let x = Matrix::random_normal(5, 8, 1.0, &mut rng);
        let cfg = AttentionConfig::new(Variant::PowerStable, 4);
        assert_eq!(exact_block(&x, &w, &cfg).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = BlockWeights::random(8, 2, 16, &mut rng).unwrap();
        let cfg = AttentionConfig::new(Variant::Power, 4);
        assert!(exact_block(&Matrix::zeros(3, 6), &w, &cfg).is_err());
        assert!(exact_block(&Matrix::zeros(3, 8), &w, &AttentionConfig::new(Variant::Power, 8)).is_err());
        let masked = cfg.clone().with_mask(Matrix::filled(4, 4, 1.0));
        assert!(exact_block(&Matrix::zeros(3, 8), &w, &masked).is_err());
    }
}
