//! A two-block toy language model trained by plain SGD on synthetic tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::block_backward;
use crate::attention::{causal_mask, AttentionConfig, Precision};
use crate::error::{Error, Result};
use crate::polymodel::block::{block_forward, BlockCache, BlockOptions};
use crate::polymodel::BlockWeights;
use crate::tensor::{matmul, Matrix};

pub const VOCAB: usize = 16;
pub const D_MODEL: usize = 32;
pub const HEADS: usize = 2;
pub const D_FF: usize = 64;
pub const LAYERS: usize = 2;

/// A loss above this multiple of the first step's loss counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Predict the current token.
    Copy,
    /// `t[i+1] = (t[i] + t[i-1]) mod V` under a causal mask; positions from 1 on are scored.
    NextTokenSynthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub attention: AttentionConfig,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub task: Task,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Arithmetic of the attention normalizer.
    #[serde(default)]
    pub precision: Precision,
    /// Fixed multiplier on every attention score.
    #[serde(default = "default_score_scale")]
    pub score_scale: f64,
}

fn default_seq_len() -> usize {
    8
}
fn default_batch() -> usize {
    8
}
fn default_score_scale() -> f64 {
    1.0
}

impl ToyTrainConfig {
    pub fn new(attention: AttentionConfig, task: Task, steps: usize, lr: f64, seed: u64) -> Self {
        ToyTrainConfig {
            attention,
            steps,
            lr,
            seed,
            task,
            seq_len: default_seq_len(),
            batch: default_batch(),
            precision: Precision::Double,
            score_scale: default_score_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.attention.d_k != D_MODEL / HEADS {
            return Err(Error::InvalidArgument(format!(
                "toy model heads have d_k = {}, config says {}",
                D_MODEL / HEADS,
                self.attention.d_k
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr = {} must be positive", self.lr)));
        }
        if self.seq_len < 2 || self.batch == 0 {
            return Err(Error::InvalidArgument("seq_len must be >= 2 and batch >= 1".into()));
        }
        if !(self.score_scale.is_finite() && self.score_scale > 0.0) {
            return Err(Error::InvalidArgument("score_scale must be positive".into()));
        }
        Ok(())
    }

    fn options(&self) -> BlockOptions {
        BlockOptions {
            precision: self.precision,
            score_scale: self.score_scale,
        }
    }

    /// Attention config with the task's mask applied.
    fn task_attention(&self) -> AttentionConfig {
        match self.task {
            Task::Copy => self.attention.clone(),
            Task::NextTokenSynthetic => self.attention.clone().with_mask(causal_mask(self.seq_len)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// First position that contributes to the loss.
    pub first_scored: usize,
}

pub fn sample_example<R: Rng + ?Sized>(task: Task, len: usize, rng: &mut R) -> Example {
    match task {
        Task::Copy => {
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..VOCAB)).collect();
            Example {
                targets: tokens.clone(),
                tokens,
                first_scored: 0,
            }
        }
        Task::NextTokenSynthetic => {
            let mut seq = vec![rng.random_range(0..VOCAB), rng.random_range(0..VOCAB)];
            while seq.len() < len + 1 {
                let n = seq.len();
                seq.push((seq[n - 1] + seq[n - 2]) % VOCAB);
            }
            Example {
                tokens: seq[..len].to_vec(),
                targets: seq[1..].to_vec(),
                first_scored: 1,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub embed: Matrix,
    pub pos: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub w_out: Matrix,
}

struct Trace {
    caches: Vec<BlockCache>,
    logits: Matrix,
}

impl ToyModel {
    pub fn init<R: Rng + ?Sized>(seq_len: usize, rng: &mut R) -> Result<Self> {
        let embed = Matrix::random_normal(VOCAB, D_MODEL, 1.0, rng);
        let pos = Matrix::random_normal(seq_len, D_MODEL, 0.1, rng);
        let blocks = (0..LAYERS)
            .map(|_| BlockWeights::random(D_MODEL, HEADS, D_FF, rng))
            .collect::<Result<Vec<_>>>()?;
        let w_out = Matrix::random_normal(D_MODEL, VOCAB, 1.0 / (D_MODEL as f64).sqrt(), rng);
        Ok(ToyModel {
            embed,
            pos,
            blocks,
            w_out,
        })
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Result<Matrix> {
        if tokens.len() != self.pos.rows() {
            return Err(Error::Shape(format!(
                "sequence of {} tokens, model built for {}",
                tokens.len(),
                self.pos.rows()
            )));
        }
        let mut x = Matrix::zeros(tokens.len(), D_MODEL);
        for (i, &t) in tokens.iter().enumerate() {
            let row: Vec<f64> = self.embed.row(t).iter().zip(self.pos.row(i)).map(|(a, b)| a + b).collect();
            x.set_row(i, &row)?;
        }
        Ok(x)
    }

    fn run(&self, tokens: &[usize], cfg: &AttentionConfig, opts: BlockOptions) -> Result<Trace> {
        let mut x = self.embed_tokens(tokens)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for w in &self.blocks {
            let cache = block_forward(&x, w, cfg, opts)?;
            x = cache.out.clone();
            caches.push(cache);
        }
        let logits = matmul(&x, &self.w_out)?;
        Ok(Trace { caches, logits })
    }

    /// Attention weights of every layer and head, layer-major.
    pub fn attention_maps(&self, tokens: &[usize], cfg: &ToyTrainConfig) -> Result<Vec<Matrix>> {
        let trace = self.run(tokens, &cfg.task_attention(), cfg.options())?;
        Ok(trace
            .caches
            .into_iter()
            .flat_map(|c| c.heads.into_iter().map(|h| h.weights))
            .collect())
    }

    /// Mean cross-entropy over the scored positions of a batch.
    pub fn loss(&self, batch: &[Example], cfg: &ToyTrainConfig) -> Result<f64> {
        let att = cfg.task_attention();
        let mut total = 0.0;
        for ex in batch {
            let trace = self.run(&ex.tokens, &att, cfg.options())?;
            total += cross_entropy(&trace.logits, ex)?.0;
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss and gradient of [`ToyModel::loss`].
    pub fn loss_and_grad(&self, batch: &[Example], cfg: &ToyTrainConfig) -> Result<(f64, ToyModel)> {
        let att = cfg.task_attention();
        let opts = cfg.options();
        let mut grad = self.zeros_like();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for ex in batch {
            let trace = self.run(&ex.tokens, &att, opts)?;
            let (loss, dlogits) = cross_entropy(&trace.logits, ex)?;
            total += loss;
            let dlogits = dlogits.scale(scale)?;
            let last = &trace.caches.last().expect("at least one block").out;
            grad.w_out.add_assign(&matmul(&last.transpose(), &dlogits)?)?;
            let mut dx = matmul(&dlogits, &self.w_out.transpose())?;
            for (l, cache) in trace.caches.iter().enumerate().rev() {
                let g = block_backward(cache, &self.blocks[l], &att, opts.score_scale, &dx)?;
                accumulate(&mut grad.blocks[l], &g.weights)?;
                dx = g.dx;
            }
            for (i, &t) in ex.tokens.iter().enumerate() {
                for c in 0..D_MODEL {
                    let d = dx.get(i, c);
                    grad.embed.set(t, c, grad.embed.get(t, c) + d);
                    grad.pos.set(i, c, grad.pos.get(i, c) + d);
                }
            }
        }
        Ok((total * scale, grad))
    }

    fn zeros_like(&self) -> ToyModel {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ToyModel {
            embed: z(&self.embed),
            pos: z(&self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    wq: z(&b.wq),
                    wk: z(&b.wk),
                    wv: z(&b.wv),
                    wo: z(&b.wo),
                    w1: z(&b.w1),
                    w2: z(&b.w2),
                    ln1_gain: vec![0.0; b.ln1_gain.len()],
                    ln1_bias: vec![0.0; b.ln1_bias.len()],
                    ln2_gain: vec![0.0; b.ln2_gain.len()],
                    ln2_bias: vec![0.0; b.ln2_bias.len()],
                    heads: b.heads,
                })
                .collect(),
            w_out: z(&self.w_out),
        }
    }

    fn sgd_step(&mut self, grad: &ToyModel, lr: f64) -> Result<()> {
        let step = |m: &Matrix, g: &Matrix| m.zip_with(g, |a, b| a - lr * b);
        let step_v = |v: &[f64], g: &[f64]| -> Result<Vec<f64>> {
            let out: Vec<f64> = v.iter().zip(g).map(|(a, b)| a - lr * b).collect();
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("parameter update".into()));
            }
            Ok(out)
        };
        self.embed = step(&self.embed, &grad.embed)?;
        self.pos = step(&self.pos, &grad.pos)?;
        self.w_out = step(&self.w_out, &grad.w_out)?;
        for (b, g) in self.blocks.iter_mut().zip(&grad.blocks) {
            b.wq = step(&b.wq, &g.wq)?;
            b.wk = step(&b.wk, &g.wk)?;
            b.wv = step(&b.wv, &g.wv)?;
            b.wo = step(&b.wo, &g.wo)?;
            b.w1 = step(&b.w1, &g.w1)?;
            b.w2 = step(&b.w2, &g.w2)?;
            b.ln1_gain = step_v(&b.ln1_gain, &g.ln1_gain)?;
            b.ln1_bias = step_v(&b.ln1_bias, &g.ln1_bias)?;
            b.ln2_gain = step_v(&b.ln2_gain, &g.ln2_gain)?;
            b.ln2_bias = step_v(&b.ln2_bias, &g.ln2_bias)?;
        }
        Ok(())
    }
}

fn accumulate(acc: &mut BlockWeights, g: &BlockWeights) -> Result<()> {
    acc.wq.add_assign(&g.wq)?;
    acc.wk.add_assign(&g.wk)?;
    acc.wv.add_assign(&g.wv)?;
    acc.wo.add_assign(&g.wo)?;
    acc.w1.add_assign(&g.w1)?;
    acc.w2.add_assign(&g.w2)?;
    for (a, b) in [
        (&mut acc.ln1_gain, &g.ln1_gain),
        (&mut acc.ln1_bias, &g.ln1_bias),
        (&mut acc.ln2_gain, &g.ln2_gain),
        (&mut acc.ln2_bias, &g.ln2_bias),
    ] {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
    Ok(())
}

/// Mean cross-entropy over scored positions and its gradient in the logits.
fn cross_entropy(logits: &Matrix, ex: &Example) -> Result<(f64, Matrix)> {
    let scored = logits.rows() - ex.first_scored;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for i in ex.first_scored..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[ex.targets[i]];
        for (c, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if c == ex.targets[i] { 1.0 } else { 0.0 };
            grad.set(i, c, (p - onehot) / scored as f64);
        }
    }
    let loss = loss / scored as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct ToyTrainResult {
    /// Loss before each completed update; truncated at divergence.
    pub losses: Vec<f64>,
    pub diverged: bool,
    pub model: ToyModel,
}

impl ToyTrainResult {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::DivisionByZero(_))
}

/// SGD on a fresh batch each step. Non-finite values anywhere, or a loss
/// above `DIVERGENCE_FACTOR` times the first loss, stop the run with the
/// divergence flag set.
pub fn toy_train(cfg: &ToyTrainConfig) -> Result<ToyTrainResult> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut model = ToyModel::init(cfg.seq_len, &mut init_rng)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut diverged = false;
    for _ in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch)
            .map(|_| sample_example(cfg.task, cfg.seq_len, &mut data_rng))
            .collect();
        let (loss, grad) = match model.loss_and_grad(&batch, cfg) {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if losses.first().is_some_and(|&l0: &f64| loss > DIVERGENCE_FACTOR * l0) {
            losses.push(loss);
            diverged = true;
            break;
        }
        losses.push(loss);
        match model.sgd_step(&grad, cfg.lr) {
            Ok(()) => {}
            Err(e) if is_divergence(&e) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ToyTrainResult {
        losses,
        diverged,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;

    fn bump(m: &mut Matrix, r: usize, c: usize, d: f64) {
        m.set(r, c, m.get(r, c) + d);
    }

    fn cfg(variant: Variant, task: Task) -> ToyTrainConfig {
        ToyTrainConfig::new(AttentionConfig::new(variant, D_MODEL / HEADS), task, 3, 0.1, 1)
    }

    #[test]
    fn synthetic_sequences_follow_the_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = sample_example(Task::NextTokenSynthetic, 8, &mut rng);
        for i in 1..8 {
            assert_eq!(ex.targets[i], (ex.tokens[i] + ex.tokens[i - 1]) % VOCAB);
        }
        assert_eq!(&ex.targets[..7], &ex.tokens[1..]);
        let ex = sample_example(Task::Copy, 5, &mut rng);
        assert_eq!(ex.tokens, ex.targets);
    }

    #[test]
    fn model_gradient_matches_finite_differences() {
        for (variant, task) in [(Variant::PowerStable, Task::NextTokenSynthetic), (Variant::Softmax, Task::Copy)] {
            let mut c = cfg(variant, task);
            c.seq_len = 4;
            c.batch = 2;
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let model = ToyModel::init(4, &mut rng).unwrap();
            let batch: Vec<Example> = (0..2).map(|_| sample_example(task, 4, &mut rng)).collect();
            let (loss, grad) = model.loss_and_grad(&batch, &c).unwrap();
            assert!((loss - model.loss(&batch, &c).unwrap()).abs() < 1e-12);
            let h = 1e-5;
            let probe = |f: &dyn Fn(&mut ToyModel, f64), analytic: f64| {
                let mut m = model.clone();
                f(&mut m, h);
                let plus = m.loss(&batch, &c).unwrap();
                let mut m = model.clone();
                f(&mut m, -h);
                let minus = m.loss(&batch, &c).unwrap();
                let numeric = (plus - minus) / (2.0 * h);
                let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
                assert!(rel < 1e-4 || (analytic - numeric).abs() < 1e-9, "{analytic} vs {numeric}");
            };
            probe(&|m, d| bump(&mut m.blocks[0].wq, 1, 2, d), grad.blocks[0].wq.get(1, 2));
            probe(&|m, d| bump(&mut m.blocks[0].wk, 3, 0, d), grad.blocks[0].wk.get(3, 0));
            probe(&|m, d| bump(&mut m.blocks[1].w1, 5, 7, d), grad.blocks[1].w1.get(5, 7));
            probe(&|m, d| m.blocks[1].ln2_gain[4] += d, grad.blocks[1].ln2_gain[4]);
            probe(&|m, d| m.blocks[0].ln1_bias[9] += d, grad.blocks[0].ln1_bias[9]);
            probe(&|m, d| bump(&mut m.blocks[1].wv, 0, 17, d), grad.blocks[1].wv.get(0, 17));
            probe(&|m, d| bump(&mut m.w_out, 2, 3, d), grad.w_out.get(2, 3));
            let t = batch[0].tokens[1];
            probe(&|m, d| bump(&mut m.embed, t, 6, d), grad.embed.get(t, 6));
            probe(&|m, d| bump(&mut m.pos, 2, 1, d), grad.pos.get(2, 1));
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let c = cfg(Variant::PowerStable, Task::Copy);
        let a = toy_train(&c).unwrap();
        let b = toy_train(&c).unwrap();
        assert_eq!(a.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn absurd_learning_rate_diverges() {
        let mut c = cfg(Variant::Softmax, Task::Copy);
        c.lr = 1e3;
        c.steps = 50;
        let r = toy_train(&c).unwrap();
        assert!(r.diverged);
        assert!(r.losses.len() < 50);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(Variant::Power, Task::Copy);
        c.steps = 0;
        assert!(toy_train(&c).is_err());
        let mut c = cfg(Variant::Power, Task::Copy);
        c.attention.d_k = 8;
        assert!(c.validate().is_err());
    }
}
