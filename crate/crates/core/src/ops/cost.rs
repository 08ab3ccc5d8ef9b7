//! Analytic parameter and multiply-accumulate accounting.
//!
//! Only convolutions, fully connected layers and the attention matrix
//! products of the non-local block are charged MACs. Normalization,
//! activations, pooling, resizing and elementwise products are free, which is
//! the usual convention of layer-level FLOP counters.

use std::cell::Cell;
use std::ops::{Add, AddAssign};

use serde::Serialize;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCost {
    pub params: u64,
    pub macs: u64,
}

impl OpCost {
    pub const ZERO: OpCost = OpCost { params: 0, macs: 0 };

    pub fn new(params: u64, macs: u64) -> Self {
        OpCost { params, macs }
    }

    pub fn params_only(params: u64) -> Self {
        OpCost { params, macs: 0 }
    }

    /// Floating-point operations, counted as two per MAC.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

impl Add for OpCost {
    type Output = OpCost;
    fn add(self, rhs: OpCost) -> OpCost {
        OpCost {
            params: self.params + rhs.params,
            macs: self.macs + rhs.macs,
        }
    }
}

impl AddAssign for OpCost {
    fn add_assign(&mut self, rhs: OpCost) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for OpCost {
    fn sum<I: Iterator<Item = OpCost>>(iter: I) -> OpCost {
        iter.fold(OpCost::ZERO, Add::add)
    }
}

thread_local! {
    static TALLY: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns the MACs executed by the primitives it called on this
/// thread.
pub fn tally_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let saved = TALLY.with(|t| t.replace(Some(0)));
    let out = f();
    let counted = TALLY.with(|t| t.replace(saved)).unwrap_or(0);
    if let Some(outer) = saved {
        TALLY.with(|t| t.set(Some(outer + counted)));
    }
    (out, counted)
}

#[inline]
pub(crate) fn record_macs(macs: u64) {
    TALLY.with(|t| {
        if let Some(v) = t.get() {
            t.set(Some(v + macs));
        }
    });
}
