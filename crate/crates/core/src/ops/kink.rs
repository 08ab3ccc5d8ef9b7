//! Tracking of non-differentiable points.
//!
//! While a [`track_kinks`] scope is active on the current thread, `relu6`,
//! `channel_max_pool` and `elementwise_max` report which branch every element
//! took, and `relu6` also how close its inputs sit to a kink. Two evaluations
//! with equal branch fingerprints lie on the same smooth piece, which is what
//! finite-difference probes need.

use std::cell::Cell;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct KinkTrace {
    /// Smallest distance of a relu6 pre-activation from 0 or 6; infinite when
    /// no relu6 ran. The max operations contribute only to `pattern`.
    pub margin: f64,
    /// FNV-1a hash over the branch taken by every piecewise element.
    pub pattern: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl KinkTrace {
    const EMPTY: KinkTrace = KinkTrace {
        margin: f64::INFINITY,
        pattern: FNV_OFFSET,
    };
}

thread_local! {
    static TRACE: Cell<Option<KinkTrace>> = const { Cell::new(None) };
}

/// Runs `f` and returns the kink trace of the piecewise ops it called.
/// Nested scopes also contribute their margin to the enclosing one.
pub fn track_kinks<R>(f: impl FnOnce() -> R) -> (R, KinkTrace) {
    let saved = TRACE.with(|m| m.replace(Some(KinkTrace::EMPTY)));
    let out = f();
    let trace = TRACE.with(|m| m.replace(saved)).unwrap_or(KinkTrace::EMPTY);
    if let Some(outer) = saved {
        TRACE.with(|m| {
            m.set(Some(KinkTrace {
                margin: outer.margin.min(trace.margin),
                pattern: outer.pattern ^ trace.pattern.rotate_left(17),
            }))
        });
    }
    (out, trace)
}

pub(crate) fn tracking() -> bool {
    TRACE.with(|m| m.get().is_some())
}

/// Folds one piecewise op's margin and branch choices into the trace.
pub(crate) fn record_kink(margin: f64, branches: impl IntoIterator<Item = u64>) {
    TRACE.with(|m| {
        if let Some(mut t) = m.get() {
            t.margin = t.margin.min(margin);
            for b in branches {
                t.pattern = (t.pattern ^ b).wrapping_mul(FNV_PRIME);
            }
            m.set(Some(t));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::relu6;
    use crate::tensor::Tensor;

    #[test]
    fn relu6_reports_distance_and_branches() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-0.5f64, 2.0, 5.9]).unwrap();
        let (_, t) = track_kinks(|| relu6(&x));
        assert!((t.margin - 0.1).abs() < 1e-12);
        let nudged = Tensor::from_vec([1, 1, 1, 3], vec![-0.4f64, 2.5, 5.95]).unwrap();
        assert_eq!(track_kinks(|| relu6(&nudged)).1.pattern, t.pattern);
        let crossed = Tensor::from_vec([1, 1, 1, 3], vec![-0.5f64, 2.0, 6.1]).unwrap();
        assert_ne!(track_kinks(|| relu6(&crossed)).1.pattern, t.pattern);
        let (_, none) = track_kinks(|| ());
        assert!(none.margin.is_infinite());
        assert!(!tracking());
    }
}
