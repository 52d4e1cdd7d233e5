//! Sum versus mean denominators as the sequence grows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::compare::Distribution;
use super::sweep::{SweepParameter, SweepResult, SweepSpec};
use crate::attention::check_p;
use crate::error::{Error, Result};

pub const METRIC_SUM: &str = "sum_denominator";
pub const METRIC_MEAN: &str = "mean_denominator";

/// Allowed relative gap between consecutive sum ratios and length ratios.
pub const RATIO_TOLERANCE: f64 = 0.2;

/// For each length, the sum and the mean of `x^p` over `repetitions`
/// sampled score rows.
pub fn length_growth_contrast(spec: &SweepSpec, dist: Distribution, p: u32) -> Result<SweepResult> {
    spec.expect(SweepParameter::Length)?;
    check_p(p)?;
    if spec.values.iter().any(|&l| l < 1.0 || l.fract() != 0.0) {
        return Err(Error::InvalidArgument("lengths must be positive integers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SweepResult::new(spec.clone());
    for &l in &spec.values {
        let len = l as usize;
        let mut sums = Vec::with_capacity(spec.repetitions);
        let mut means = Vec::with_capacity(spec.repetitions);
        for _ in 0..spec.repetitions {
            let s: f64 = dist.sample(len, &mut rng).iter().map(|v| v.powi(p as i32)).sum();
            sums.push(s);
            means.push(s / l);
        }
        out.push(l, METRIC_SUM, &sums);
        out.push(l, METRIC_MEAN, &means);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthCheck {
    /// `(L ratio, sum ratio)` for consecutive lengths.
    pub ratios: Vec<(f64, f64)>,
    pub sum_scales_with_length: bool,
    pub mean_std_first: f64,
    pub mean_std_last: f64,
}

impl GrowthCheck {
    pub fn mean_std_shrinks(&self) -> bool {
        self.mean_std_last < self.mean_std_first
    }
}

pub fn check_growth(result: &SweepResult) -> GrowthCheck {
    let sums = result.metric(METRIC_SUM);
    let means = result.metric(METRIC_MEAN);
    let ratios: Vec<(f64, f64)> = sums
        .windows(2)
        .map(|w| (w[1].value / w[0].value, w[1].mean / w[0].mean))
        .collect();
    GrowthCheck {
        sum_scales_with_length: ratios
            .iter()
            .all(|(lr, sr)| ((sr - lr) / lr).abs() <= RATIO_TOLERANCE),
        ratios,
        mean_std_first: means.first().map_or(f64::NAN, |r| r.std),
        mean_std_last: means.last().map_or(f64::NAN, |r| r.std),
    }
}
