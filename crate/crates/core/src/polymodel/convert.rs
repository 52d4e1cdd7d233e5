//! Replacing the non-polynomial steps of a block with additions and
//! multiplications.
//!
//! Four sites change: the attention reciprocal (Goldschmidt, on the
//! length-agnostic mean denominator), the inverse square root of both
//! LayerNorms (Goldschmidt), and the sigmoid inside GELU (Chebyshev fit).
//! Every site gets a domain calibrated on a probe set; a probe value leaving
//! it is reported as a domain error naming the site.

use serde::{Deserialize, Serialize};

use crate::attention::{check_p, AttentionConfig, Variant};
use crate::error::{Error, Result};
use crate::polyapprox::circuit::{power, Evaluator, OpCounts, PlainEvaluator, TraceEvaluator};
use crate::polyapprox::goldschmidt::{inv_sqrt_circuit, reciprocal_circuit, GoldschmidtConfig};
use crate::polyapprox::poly::{fit_sigmoid, gelu_circuit, PolyApprox, GELU_SLOPE};
use crate::polyapprox::{DepthLedger, DepthOp};
use crate::tensor::Matrix;

use super::block::{block_forward, check_block_inputs, exact_block, BlockOptions, LAYERNORM_DELTA};
use super::weights::BlockWeights;

pub const SITE_RECIPROCAL: &str = "attn.reciprocal";
pub const SITE_LN1: &str = "ln1.inv_sqrt";
pub const SITE_LN2: &str = "ln2.inv_sqrt";
pub const SITE_GELU: &str = "ffn.gelu";

/// Explicit `[lo, hi]` per site; unset sites are calibrated from probes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteDomains {
    #[serde(default)]
    pub reciprocal: Option<[f64; 2]>,
    #[serde(default)]
    pub ln1_inv_sqrt: Option<[f64; 2]>,
    #[serde(default)]
    pub ln2_inv_sqrt: Option<[f64; 2]>,
    /// Domain of the sigmoid argument `1.702 u`.
    #[serde(default)]
    pub gelu_sigmoid: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxConfig {
    #[serde(default = "default_iterations")]
    pub reciprocal_iterations: u32,
    #[serde(default = "default_iterations")]
    pub inv_sqrt_iterations: u32,
    #[serde(default = "default_degree")]
    pub sigmoid_degree: usize,
    /// Multiplicative margin around observed probe extremes.
    #[serde(default = "default_headroom")]
    pub headroom: f64,
    /// Lower end of the calibrated reciprocal domain.
    #[serde(default = "default_floor")]
    pub reciprocal_floor: f64,
    #[serde(default)]
    pub domains: SiteDomains,
}

fn default_iterations() -> u32 {
    16
}
fn default_degree() -> usize {
    31
}
fn default_headroom() -> f64 {
    1.5
}
fn default_floor() -> f64 {
    1e-3
}

impl Default for ApproxConfig {
    fn default() -> Self {
        ApproxConfig {
            reciprocal_iterations: default_iterations(),
            inv_sqrt_iterations: default_iterations(),
            sigmoid_degree: default_degree(),
            headroom: default_headroom(),
            reciprocal_floor: default_floor(),
            domains: SiteDomains::default(),
        }
    }
}

impl ApproxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reciprocal_iterations == 0 || self.inv_sqrt_iterations == 0 {
            return Err(Error::InvalidArgument("Goldschmidt iterations must be >= 1".into()));
        }
        if self.sigmoid_degree == 0 {
            return Err(Error::InvalidArgument("sigmoid degree must be >= 1".into()));
        }
        if !(self.headroom.is_finite() && self.headroom >= 1.0) {
            return Err(Error::InvalidArgument(format!("headroom = {} must be >= 1", self.headroom)));
        }
        if !(self.reciprocal_floor.is_finite() && self.reciprocal_floor > 0.0) {
            return Err(Error::InvalidArgument("reciprocal_floor must be positive".into()));
        }
        Ok(())
    }
}

/// What a site was replaced with.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Replacement {
    GoldschmidtReciprocal { config: GoldschmidtConfig },
    GoldschmidtInvSqrt { config: GoldschmidtConfig },
    SigmoidPolynomial { sigmoid: PolyApprox },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplacedOp {
    pub site: String,
    #[serde(flatten)]
    pub replacement: Replacement,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub counts: OpCounts,
    pub max_depth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConversionReport {
    pub variant: Variant,
    pub replaced_ops: Vec<ReplacedOp>,
    pub ledger: DepthLedger,
    pub max_block_error: f64,
    pub probes: usize,
    /// True for the stable variant, whose `max|x|` rescaling has no
    /// polynomial form and is dropped.
    pub stabilizer_omitted: bool,
    /// Op histogram of the converted block on the first probe.
    pub trace: TraceSummary,
}

/// A block built only from additions and multiplications.
#[derive(Debug, Clone)]
pub struct PolyBlock {
    weights: BlockWeights,
    cfg: AttentionConfig,
    /// Constant added to the mean of `x^p` before the reciprocal.
    shift: f64,
    reciprocal: GoldschmidtConfig,
    ln1: GoldschmidtConfig,
    ln2: GoldschmidtConfig,
    sigmoid: PolyApprox,
}

/// Shift `e` such that the variant equals `(x_j^p / L) / (e + mean_i x_i^p)`.
fn mean_shift(cfg: &AttentionConfig, len: usize) -> Result<f64> {
    match cfg.variant {
        Variant::Softmax => Err(Error::Unsupported(
            "softmax has no polynomial form; use a PowerSoftmax variant".into(),
        )),
        Variant::Power => Ok(0.0),
        Variant::PowerLipschitz | Variant::PowerStable => Ok(cfg.epsilon / len as f64),
        Variant::LengthAgnostic => Ok(cfg.epsilon),
    }
}

fn check<E: Evaluator>(ev: &E, v: &E::Value, dom: &GoldschmidtConfig, site: &str) -> Result<()> {
    dom.check(ev.peek(v), site)
}

impl PolyBlock {
    pub fn weights(&self) -> &BlockWeights {
        &self.weights
    }

    pub fn attention(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn reciprocal_domain(&self) -> (f64, f64) {
        (self.reciprocal.lo, self.reciprocal.hi)
    }

    fn layernorm<E: Evaluator>(
        &self,
        ev: &mut E,
        rows: &[Vec<E::Value>],
        gain: &[f64],
        bias: &[f64],
        dom: &GoldschmidtConfig,
        site: &str,
    ) -> Result<Vec<Vec<E::Value>>> {
        let inv_d = 1.0 / gain.len() as f64;
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            let s = ev.sum(row);
            let mean = ev.mul_plain(&s, inv_d);
            let centered: Vec<E::Value> = row.iter().map(|v| ev.sub(v, &mean)).collect();
            let squares: Vec<E::Value> = centered.iter().map(|c| ev.square(c)).collect();
            let ss = ev.sum(&squares);
            let var = ev.mul_plain(&ss, inv_d);
            let shifted = ev.add_plain(&var, LAYERNORM_DELTA);
            check(ev, &shifted, dom, site)?;
            let inv = inv_sqrt_circuit(ev, &shifted, dom);
            out.push(
                centered
                    .iter()
                    .zip(gain.iter().zip(bias))
                    .map(|(c, (&g, &b))| {
                        let n = ev.mul(c, &inv);
                        let scaled = ev.mul_plain(&n, g);
                        ev.add_plain(&scaled, b)
                    })
                    .collect(),
            );
        }
        Ok(out)
    }

    fn linear<E: Evaluator>(ev: &mut E, rows: &[Vec<E::Value>], w: &Matrix) -> Vec<Vec<E::Value>> {
        rows.iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| {
                        let terms: Vec<E::Value> =
                            row.iter().enumerate().map(|(t, v)| ev.mul_plain(v, w.get(t, j))).collect();
                        ev.sum(&terms)
                    })
                    .collect()
            })
            .collect()
    }

    fn residual<E: Evaluator>(ev: &mut E, a: &[Vec<E::Value>], b: &[Vec<E::Value>]) -> Vec<Vec<E::Value>> {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| ev.add(x, y)).collect())
            .collect()
    }

    /// The converted block as a circuit over `ev`. Domain checks read the
    /// shadow values through [`Evaluator::peek`].
    pub fn evaluate<E: Evaluator>(&self, ev: &mut E, x: &Matrix) -> Result<Vec<Vec<E::Value>>> {
        check_block_inputs(x, &self.weights, &self.cfg)?;
        let w = &self.weights;
        let (len, dk) = (x.rows(), w.d_k());
        let shift = mean_shift(&self.cfg, len)?;
        debug_assert_eq!(shift, self.shift);
        let inv_len = 1.0 / len as f64;
        let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();

        let input: Vec<Vec<E::Value>> = (0..len)
            .map(|i| x.row(i).iter().map(|&v| ev.input(v)).collect())
            .collect();
        let h1 = self.layernorm(ev, &input, &w.ln1_gain, &w.ln1_bias, &self.ln1, SITE_LN1)?;
        let q = Self::linear(ev, &h1, &w.wq);
        let k = Self::linear(ev, &h1, &w.wk);
        let v = Self::linear(ev, &h1, &w.wv);

        let mut heads_out: Vec<Vec<E::Value>> = vec![Vec::with_capacity(w.d_model()); len];
        for c in 0..w.heads {
            let cols = c * dk..(c + 1) * dk;
            for i in 0..len {
                let mut powered = Vec::with_capacity(len);
                for j in 0..len {
                    let prods: Vec<E::Value> = cols.clone().map(|t| ev.mul(&q[i][t], &k[j][t])).collect();
                    let dot = ev.sum(&prods);
                    let m = self.cfg.mask.as_ref().map_or(1.0, |m| m.get(i, j));
                    let s = ev.mul_plain(&dot, m * inv_sqrt_dk);
                    powered.push(power(ev, &s, self.cfg.p));
                }
                let total = ev.sum(&powered);
                let mean = ev.mul_plain(&total, inv_len);
                let den = ev.add_plain(&mean, shift);
                check(ev, &den, &self.reciprocal, SITE_RECIPROCAL)?;
                let r = reciprocal_circuit(ev, &den, &self.reciprocal);
                let weights: Vec<E::Value> = powered
                    .iter()
                    .map(|pw| {
                        let scaled = ev.mul_plain(pw, inv_len);
                        ev.mul(&scaled, &r)
                    })
                    .collect();
                for t in cols.clone() {
                    let terms: Vec<E::Value> = (0..len).map(|j| ev.mul(&weights[j], &v[j][t])).collect();
                    heads_out[i].push(ev.sum(&terms));
                }
            }
        }
        let attn = Self::linear(ev, &heads_out, &w.wo);
        let x1 = Self::residual(ev, &input, &attn);

        let h2 = self.layernorm(ev, &x1, &w.ln2_gain, &w.ln2_bias, &self.ln2, SITE_LN2)?;
        let u = Self::linear(ev, &h2, &w.w1);
        let (slo, shi) = self.sigmoid.domain();
        let mut g = Vec::with_capacity(len);
        for row in &u {
            let mut out = Vec::with_capacity(row.len());
            for val in row {
                let arg = GELU_SLOPE * ev.peek(val);
                if !(slo..=shi).contains(&arg) {
                    return Err(Error::domain(SITE_GELU, arg, slo, shi));
                }
                out.push(gelu_circuit(ev, val, &self.sigmoid));
            }
            g.push(out);
        }
        let f = Self::linear(ev, &g, &w.w2);
        Ok(Self::residual(ev, &x1, &f))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let rows = self.evaluate(&mut PlainEvaluator, x)?;
        Matrix::from_rows(&rows)
    }

    /// Runs the circuit under the tracing evaluator.
    pub fn trace(&self, x: &Matrix) -> Result<(Matrix, TraceSummary)> {
        let mut ev = TraceEvaluator::new();
        let rows = self.evaluate(&mut ev, x)?;
        let values: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|t| t.value).collect()).collect();
        Ok((
            Matrix::from_rows(&values)?,
            TraceSummary {
                counts: ev.counts(),
                max_depth: ev.max_depth(),
            },
        ))
    }

    /// Depth along the critical path. Plaintext weight matrices cost one
    /// level each; scalar constants are folded into neighbouring weights.
    pub fn ledger(&self) -> DepthLedger {
        let mut l = DepthLedger::new();
        layernorm_ledger(&mut l, "ln1", &self.ln1);
        l.record("attn.qkv", DepthOp::Matmul);
        l.record("attn.scores", DepthOp::Mul);
        l.record("attn.power", DepthOp::Power(self.cfg.p));
        l.record("attn.mean", DepthOp::Add);
        l.record(SITE_RECIPROCAL, DepthOp::Goldschmidt(self.reciprocal.iterations));
        l.record("attn.normalize", DepthOp::Mul);
        l.record("attn.values", DepthOp::Mul);
        l.record("attn.out_proj", DepthOp::Matmul);
        l.record("attn.residual", DepthOp::Add);
        layernorm_ledger(&mut l, "ln2", &self.ln2);
        l.record("ffn.up", DepthOp::Matmul);
        l.record("ffn.gelu.sigmoid", DepthOp::Poly(self.sigmoid.degree()));
        l.record("ffn.gelu.product", DepthOp::Mul);
        l.record("ffn.down", DepthOp::Matmul);
        l.record("ffn.residual", DepthOp::Add);
        l
    }

    pub fn replaced_ops(&self) -> Vec<ReplacedOp> {
        vec![
            ReplacedOp {
                site: SITE_LN1.into(),
                replacement: Replacement::GoldschmidtInvSqrt { config: self.ln1 },
            },
            ReplacedOp {
                site: SITE_RECIPROCAL.into(),
                replacement: Replacement::GoldschmidtReciprocal { config: self.reciprocal },
            },
            ReplacedOp {
                site: SITE_LN2.into(),
                replacement: Replacement::GoldschmidtInvSqrt { config: self.ln2 },
            },
            ReplacedOp {
                site: SITE_GELU.into(),
                replacement: Replacement::SigmoidPolynomial {
                    sigmoid: self.sigmoid.clone(),
                },
            },
        ]
    }
}

fn layernorm_ledger(l: &mut DepthLedger, name: &str, dom: &GoldschmidtConfig) {
    l.record(format!("{name}.square"), DepthOp::Mul);
    l.record(format!("{name}.inv_sqrt"), DepthOp::Goldschmidt(dom.iterations));
    l.record(format!("{name}.normalize"), DepthOp::Mul);
}

/// Observed extremes of every site's input over the probe set.
#[derive(Debug, Clone, Copy)]
struct SiteStats {
    den_max: f64,
    ln1: (f64, f64),
    ln2: (f64, f64),
    sig_abs: f64,
}

fn calibrate(w: &BlockWeights, cfg: &AttentionConfig, probes: &[Matrix]) -> Result<SiteStats> {
    let mut st = SiteStats {
        den_max: 0.0,
        ln1: (f64::INFINITY, 0.0),
        ln2: (f64::INFINITY, 0.0),
        sig_abs: 0.0,
    };
    for x in probes {
        let len = x.rows();
        let shift = mean_shift(cfg, len)?;
        let cache = block_forward(x, w, cfg, BlockOptions::default())?;
        for h in &cache.heads {
            for i in 0..len {
                let mean = h.scores.row(i).iter().map(|s| s.powi(cfg.p as i32)).sum::<f64>() / len as f64;
                st.den_max = st.den_max.max(mean + shift);
            }
        }
        for &v in &cache.ln1.shifted_var {
            st.ln1 = (st.ln1.0.min(v), st.ln1.1.max(v));
        }
        for &v in &cache.ln2.shifted_var {
            st.ln2 = (st.ln2.0.min(v), st.ln2.1.max(v));
        }
        st.sig_abs = st.sig_abs.max(GELU_SLOPE * cache.u.max_abs());
    }
    Ok(st)
}

/// Builds the polynomial block, calibrating unset domains on `probes` and
/// measuring the exact-vs-polynomial deviation on the same set.
pub fn convert_block(
    w: &BlockWeights,
    cfg: &AttentionConfig,
    approx: &ApproxConfig,
    probes: &[Matrix],
) -> Result<(PolyBlock, ConversionReport)> {
    if cfg.variant == Variant::Softmax {
        mean_shift(cfg, 1)?;
    }
    check_p(cfg.p)?;
    approx.validate()?;
    if probes.is_empty() {
        return Err(Error::InvalidArgument("conversion needs at least one probe input".into()));
    }
    let len = probes[0].rows();
    if probes.iter().any(|p| p.rows() != len) {
        return Err(Error::Shape("all probes must share one sequence length".into()));
    }
    for x in probes {
        check_block_inputs(x, w, cfg)?;
    }
    let st = calibrate(w, cfg, probes)?;
    let h = approx.headroom;
    let dom = |explicit: Option<[f64; 2]>, lo: f64, hi: f64| -> [f64; 2] {
        explicit.unwrap_or([lo, if hi > lo { hi } else { 2.0 * lo }])
    };
    let rd = dom(approx.domains.reciprocal, approx.reciprocal_floor, st.den_max * h);
    let l1 = dom(approx.domains.ln1_inv_sqrt, st.ln1.0 / h, st.ln1.1 * h);
    let l2 = dom(approx.domains.ln2_inv_sqrt, st.ln2.0 / h, st.ln2.1 * h);
    let sig_r = (st.sig_abs * h).max(1e-3);
    let sd = approx.domains.gelu_sigmoid.unwrap_or([-sig_r, sig_r]);

    let block = PolyBlock {
        weights: w.clone(),
        cfg: cfg.clone(),
        shift: mean_shift(cfg, len)?,
        reciprocal: GoldschmidtConfig::new(approx.reciprocal_iterations, rd[0], rd[1]).map_err(|e| e.at_site(SITE_RECIPROCAL))?,
        ln1: GoldschmidtConfig::new(approx.inv_sqrt_iterations, l1[0], l1[1])?,
        ln2: GoldschmidtConfig::new(approx.inv_sqrt_iterations, l2[0], l2[1])?,
        sigmoid: fit_sigmoid(sd[0], sd[1], approx.sigmoid_degree)?,
    };

    let mut max_err: f64 = 0.0;
    for x in probes {
        let poly = block.forward(x)?;
        let exact = exact_block(x, w, cfg)?;
        max_err = max_err.max(poly.max_abs_diff(&exact)?);
    }
    let (_, trace) = block.trace(&probes[0])?;
    let report = ConversionReport {
        variant: cfg.variant,
        replaced_ops: block.replaced_ops(),
        ledger: block.ledger(),
        max_block_error: max_err,
        probes: probes.len(),
        stabilizer_omitted: cfg.variant == Variant::PowerStable,
        trace,
    };
    Ok((block, report))
}
