//! Polynomial building blocks for replacing non-polynomial layers.

pub mod circuit;
pub mod depth;
pub mod goldschmidt;
pub mod poly;

pub use circuit::{Evaluator, OpCounts, PlainEvaluator, TraceEvaluator, Traced};
pub use depth::{depth_of, DepthLedger, DepthOp, LedgerEntry};
pub use goldschmidt::{
    goldschmidt_inv_sqrt, goldschmidt_reciprocal, reciprocal_error_bound, GoldschmidtConfig,
};
pub use poly::{eval_poly, fit_chebyshev, fit_sigmoid, gelu, gelu_poly, sigmoid, PolyApprox, GELU_SLOPE, GRID_POINTS};
