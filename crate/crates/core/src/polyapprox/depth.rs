//! Multiplicative-depth cost model.

use serde::{Deserialize, Serialize};

use super::circuit::ceil_log2;

/// Operation descriptors understood by [`depth_of`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op", content = "arg")]
pub enum DepthOp {
    /// `x^p` by repeated squaring.
    Power(u32),
    /// `k` Goldschmidt iterations, two multiplications each.
    Goldschmidt(u32),
    /// Degree-`d` polynomial: power basis plus coefficient products.
    Poly(usize),
    /// Plaintext weights times ciphertext.
    Matmul,
    /// Elementwise ciphertext product.
    Mul,
    Add,
}

pub fn depth_of(op: DepthOp) -> u32 {
    match op {
        DepthOp::Power(p) => ceil_log2(p as u64),
        DepthOp::Goldschmidt(k) => 2 * k,
        DepthOp::Poly(0) => 0,
        DepthOp::Poly(d) => ceil_log2(d as u64) + 1,
        DepthOp::Matmul | DepthOp::Mul => 1,
        DepthOp::Add => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub op: String,
    pub depth: u32,
}

/// Append-only record of depths along a sequential pipeline.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthLedger {
    entries: Vec<LedgerEntry>,
    total: u32,
}

impl DepthLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: impl Into<String>, op: DepthOp) -> u32 {
        let depth = depth_of(op);
        self.record_depth(name, depth);
        depth
    }

    pub fn record_depth(&mut self, name: impl Into<String>, depth: u32) {
        self.entries.push(LedgerEntry {
            op: name.into(),
            depth,
        });
        self.total += depth;
    }

    /// Sequential composition: `other` runs after everything recorded so far.
    pub fn then(&mut self, other: &DepthLedger) {
        for e in &other.entries {
            self.record_depth(e.op.clone(), e.depth);
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> u32 {
        self.total
    }
}
