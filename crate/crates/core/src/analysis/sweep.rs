//! Sweep specifications, results and their CSV/JSON forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Epsilon,
    P,
    Length,
    Degree,
    Iterations,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Epsilon => "epsilon",
            SweepParameter::P => "p",
            SweepParameter::Length => "length",
            SweepParameter::Degree => "degree",
            SweepParameter::Iterations => "iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_REPETITIONS: usize = 32;

fn default_repetitions() -> usize {
    DEFAULT_REPETITIONS
}

impl SweepSpec {
    pub fn new(parameter: SweepParameter, values: Vec<f64>, repetitions: usize, seed: u64) -> Result<Self> {
        let s = SweepSpec {
            parameter,
            values,
            repetitions,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidArgument("sweep needs at least one value".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("sweep values must be finite".into()));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("sweep values must be strictly increasing".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn expect(&self, parameter: SweepParameter) -> Result<()> {
        self.validate()?;
        if self.parameter != parameter {
            return Err(Error::InvalidArgument(format!(
                "this sweep varies {}, spec varies {}",
                parameter.name(),
                self.parameter.name()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub provenance: SweepSpec,
}

/// Mean and sample standard deviation (zero for a single sample), summed
/// in input order.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepResult {
    pub fn new(provenance: SweepSpec) -> Self {
        SweepResult {
            rows: Vec::new(),
            provenance,
        }
    }

    pub(crate) fn push(&mut self, value: f64, metric: &str, samples: &[f64]) {
        let (mean, std) = mean_std(samples);
        self.rows.push(SweepRow {
            value,
            metric: metric.to_string(),
            mean,
            std,
        });
    }

    /// Rows of one metric in spec order.
    pub fn metric(&self, name: &str) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.metric == name).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,metric,mean,std\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.value, r.metric, r.mean, r.std));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(SweepSpec::new(SweepParameter::Epsilon, vec![], 1, 0).is_err());
        assert!(SweepSpec::new(SweepParameter::Epsilon, vec![1.0, 1.0], 1, 0).is_err());
        assert!(SweepSpec::new(SweepParameter::Epsilon, vec![2.0, 1.0], 1, 0).is_err());
        assert!(SweepSpec::new(SweepParameter::Epsilon, vec![1.0], 0, 0).is_err());
        assert!(SweepSpec::new(SweepParameter::P, vec![2.0, 4.0], 3, 0).is_ok());
        let s: SweepSpec = serde_json::from_str(r#"{"parameter":"length","values":[64,128]}"#).unwrap();
        assert_eq!(s.repetitions, DEFAULT_REPETITIONS);
    }

    #[test]
    fn csv_and_json() {
        let spec = SweepSpec::new(SweepParameter::Epsilon, vec![0.1, 1.0], 1, 7).unwrap();
        let mut r = SweepResult::new(spec.clone());
        r.push(0.1, "sup_error", &[2.0]);
        r.push(1.0, "sup_error", &[1.0, 3.0]);
        assert_eq!(r.to_csv(), "parameter,metric,mean,std\n0.1,sup_error,2,0\n1,sup_error,2,1.4142135623730951\n");
        let back: SweepResult = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.provenance, spec);
    }

    #[test]
    fn moments() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
