//! Desk-scale experiment runners.

pub mod compare;
pub mod epsilon;
pub mod length;
pub mod locality;
pub mod sweep;

pub use compare::{compare_normalizers, compare_vectors, spearman, Distribution, NormalizerComparison};
pub use epsilon::{epsilon_error_sweep, shifted_reciprocal_error};
pub use length::{check_growth, length_growth_contrast, GrowthCheck};
pub use locality::{locality_sweep, mean_distance, LocalityOutcome};
pub use sweep::{mean_std, SweepParameter, SweepResult, SweepRow, SweepSpec};
