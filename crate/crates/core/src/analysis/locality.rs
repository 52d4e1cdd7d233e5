//! Mean attention distance of trained toy models as `p` varies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sweep::{SweepParameter, SweepResult, SweepSpec};
use crate::attention::mean_attention_distance;
use crate::error::{Error, Result};
use crate::gradcheck::toy::{sample_example, toy_train, ToyTrainConfig};
use crate::tensor::Matrix;

pub const METRIC_DISTANCE: &str = "mean_distance_tokens";
pub const METRIC_DIVERGED: &str = "diverged_runs";

/// Sequences per trained model used to measure attention distance.
pub const EVAL_SEQUENCES: usize = 16;

/// Average of [`mean_attention_distance`] over a set of maps.
pub fn mean_distance(maps: &[Matrix]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no attention maps".into()));
    }
    let mut total = 0.0;
    for m in maps {
        total += mean_attention_distance(m)?;
    }
    Ok(total / maps.len() as f64)
}

#[derive(Debug, Clone)]
pub struct LocalityOutcome {
    pub result: SweepResult,
    /// Set when distance does not shrink from the smallest to the largest `p`.
    pub warning: Option<String>,
}

/// Trains one model per (p, repetition) from `base` with seed
/// `spec.seed + repetition` and averages the distance over layers, heads
/// and evaluation sequences.
pub fn locality_sweep(spec: &SweepSpec, base: &ToyTrainConfig) -> Result<LocalityOutcome> {
    spec.expect(SweepParameter::P)?;
    let mut out = SweepResult::new(spec.clone());
    for &pv in &spec.values {
        if pv.fract() != 0.0 || pv < 2.0 {
            return Err(Error::InvalidArgument(format!("p = {pv} is not an even integer >= 2")));
        }
        let mut distances = Vec::with_capacity(spec.repetitions);
        let mut diverged = 0usize;
        for rep in 0..spec.repetitions {
            let mut cfg = base.clone();
            cfg.attention.p = pv as u32;
            cfg.seed = spec.seed.wrapping_add(rep as u64);
            let run = toy_train(&cfg)?;
            if run.diverged {
                diverged += 1;
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x10ca1);
            let mut maps = Vec::new();
            for _ in 0..EVAL_SEQUENCES {
                let ex = sample_example(cfg.task, cfg.seq_len, &mut rng);
                maps.extend(run.model.attention_maps(&ex.tokens, &cfg)?);
            }
            distances.push(mean_distance(&maps)?);
        }
        out.push(pv, METRIC_DISTANCE, &distances);
        out.push(pv, METRIC_DIVERGED, &[diverged as f64]);
    }
    let d = out.metric(METRIC_DISTANCE);
    let warning = match (d.first(), d.last()) {
        (Some(a), Some(b)) if d.len() > 1 && !(b.mean < a.mean) => Some(format!(
            "WARN: mean attention distance did not shrink with p ({} at p={}, {} at p={})",
            a.mean, a.value, b.mean, b.value
        )),
        _ => None,
    };
    Ok(LocalityOutcome { result: out, warning })
}
