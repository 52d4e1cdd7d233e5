//! HE-friendly attention: the PowerSoftmax normalizer family, polynomial
//! replacements for division, inverse square root and GELU, a
//! multiplicative-depth cost model, gradient verification and desk-scale
//! experiment runners.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod polyapprox;
pub mod polymodel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
