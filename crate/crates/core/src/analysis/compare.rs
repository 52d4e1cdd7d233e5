//! Softmax versus PowerSoftmax on one sampled score vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{power_softmax, softmax};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Standard normal.
    Normal,
    /// Uniform on `[-2, 2]`.
    Uniform,
    /// `4k / n` for `k = 1..=n`.
    EvenlySpaced,
}

impl Distribution {
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Distribution::Normal => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            Distribution::Uniform => (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect(),
            Distribution::EvenlySpaced => (1..=n).map(|k| 4.0 * k as f64 / n as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalizerComparison {
    /// Sorted ascending.
    pub input: Vec<f64>,
    pub softmax: Vec<f64>,
    pub power_softmax: Vec<f64>,
    pub rank_correlation: f64,
    /// Rank correlation restricted to positive inputs.
    pub positive_rank_correlation: f64,
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation. Two constant vectors count as perfectly
/// correlated; a constant against a varying one as uncorrelated.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    Ok(match (va == 0.0, vb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => cov / (va * vb).sqrt(),
    })
}

/// Both normalizers on an explicit vector.
pub fn compare_vectors(x: &[f64], p: u32) -> Result<NormalizerComparison> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument("comparison needs n >= 2".into()));
    }
    let mut input = x.to_vec();
    input.sort_by(f64::total_cmp);
    let sm = softmax(&input);
    let pw = power_softmax(&input, p)?;
    let pos: Vec<usize> = (0..input.len()).filter(|&i| input[i] > 0.0).collect();
    let pick = |v: &[f64]| pos.iter().map(|&i| v[i]).collect::<Vec<_>>();
    Ok(NormalizerComparison {
        rank_correlation: spearman(&sm, &pw)?,
        positive_rank_correlation: spearman(&pick(&sm), &pick(&pw))?,
        input,
        softmax: sm,
        power_softmax: pw,
    })
}

pub fn compare_normalizers(dist: Distribution, n: usize, p: u32, seed: u64) -> Result<NormalizerComparison> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    compare_vectors(&dist.sample(n, &mut rng), p)
}
