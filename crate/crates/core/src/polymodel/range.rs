//! Range penalty over normalizer inputs.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `sum over layers of (max over heads of max |z|)`.
///
/// `layers[n][c]` holds the scores entering the normalizer of head `c` in
/// layer `n`. Stacking several examples' rows into one matrix makes the
/// penalty a batch maximum.
pub fn range_penalty(layers: &[Vec<Matrix>]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("range penalty needs at least one layer".into()));
    }
    let mut total = 0.0;
    for (n, heads) in layers.iter().enumerate() {
        if heads.is_empty() {
            return Err(Error::InvalidArgument(format!("layer {n} has no heads")));
        }
        total += heads.iter().map(Matrix::max_abs).fold(0.0, f64::max);
    }
    Ok(total)
}
