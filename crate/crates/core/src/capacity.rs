//! Effective sample capacity and the inverse-capacity landmark weights.
//!
//! A unified landmark annotated by `n` datasets is seen `n` times per mixed
//! batch, but overlapping annotations carry diminishing new information. Its
//! effective capacity is `E_n = (1 - β^n) / (1 - β) = Σ_{k<n} β^k`, and its
//! loss is scaled by `1 / E_n`.

use thiserror::Error;

use crate::protocol::{ProtocolTable, UnifiedLandmarkId};

/// β at or above this threshold is treated as the `β → 1` limit.
pub const LIMIT_THRESHOLD: f64 = 1.0 - 1e-9;

/// Counts above this use the closed form directly instead of the recurrence.
const RECURRENCE_MAX_N: u32 = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum CapacityError {
    #[error("beta must lie in [0, 1], got {0}")]
    BetaOutOfRange(f64),
    #[error("effective capacity needs at least one sample")]
    ZeroCount,
}

/// Redundancy ratio shared by all landmarks.
///
/// Values in `[0, 1)` use the closed form; exactly `1` (or anything within
/// `1e-9` of it) selects the analytic limit `E_n = n`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Beta(f64);

impl Beta {
    pub const ZERO: Beta = Beta(0.0);
    pub const LIMIT: Beta = Beta(1.0);

    pub fn new(value: f64) -> Result<Self, CapacityError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(CapacityError::BetaOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_limit(self) -> bool {
        self.0 >= LIMIT_THRESHOLD
    }
}

impl Default for Beta {
    fn default() -> Self {
        Beta(0.9)
    }
}

/// `E_n` for `n ≥ 1`.
///
/// Evaluated with the recurrence `E_1 = 1`, `E_k = 1 + β E_{k-1}` (which is
/// how the closed form is derived), so the recurrence holds bit-exactly for
/// every count a protocol can produce.
pub fn effective_capacity(beta: Beta, n: u32) -> Result<f64, CapacityError> {
    if n == 0 {
        return Err(CapacityError::ZeroCount);
    }
    if beta.is_limit() {
        return Ok(capacity_limit(n));
    }
    let b = beta.value();
    if n > RECURRENCE_MAX_N {
        return Ok((1.0 - b.powf(n as f64)) / (1.0 - b));
    }
    let mut e = 1.0;
    for _ in 1..n {
        e = 1.0 + b * e;
    }
    Ok(e)
}

/// The `β → 1` limit of [`effective_capacity`], which is simply `n`.
pub fn capacity_limit(n: u32) -> f64 {
    n as f64
}

/// Per-unified-landmark capacities and weights for a fixed β.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    beta: Beta,
    counts: Vec<usize>,
    capacity: Vec<f64>,
    weight: Vec<f64>,
}

impl WeightTable {
    pub fn build(table: &ProtocolTable, beta: Beta) -> Self {
        let counts = table.counts();
        let capacity: Vec<f64> = counts
            .iter()
            .map(|&c| effective_capacity(beta, c as u32).expect("protocol counts are at least 1"))
            .collect();
        let weight = capacity.iter().map(|e| 1.0 / e).collect();
        Self { beta, counts, capacity, weight }
    }

    /// Weights of 1 everywhere, i.e. the unbalanced baseline.
    pub fn uniform(table: &ProtocolTable) -> Self {
        Self::build(table, Beta::ZERO)
    }

    pub fn beta(&self) -> Beta {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn count(&self, p: UnifiedLandmarkId) -> usize {
        self.counts[p.index()]
    }

    pub fn capacity(&self, p: UnifiedLandmarkId) -> f64 {
        self.capacity[p.index()]
    }

    pub fn weight(&self, p: UnifiedLandmarkId) -> f64 {
        self.weight[p.index()]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// CSV rows `unified_id,count,capacity,weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("unified_id,count,capacity,weight\n");
        for (i, ((c, e), w)) in self.counts.iter().zip(&self.capacity).zip(&self.weight).enumerate() {
            out.push_str(&format!("{i},{c},{e},{w}\n"));
        }
        out
    }
}

/// Convenience wrapper matching the protocol-level operation name.
pub fn build_weight_table(table: &ProtocolTable, beta: Beta) -> WeightTable {
    WeightTable::build(table, beta)
}
