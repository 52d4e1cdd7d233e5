//! Exact and polynomial transformer blocks.

pub mod block;
pub mod convert;
pub mod range;
pub mod weights;

pub use block::{block_forward, exact_block, head_scores, layernorm_exact, BlockCache, BlockOptions, LAYERNORM_DELTA};
pub use convert::{convert_block, ApproxConfig, ConversionReport, PolyBlock, ReplacedOp, Replacement, SiteDomains};
pub use range::range_penalty;
pub use weights::BlockWeights;
