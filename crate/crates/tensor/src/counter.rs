//! Multiply-accumulate accounting for matrix products.
//!
//! Every forward matrix product adds `batch * m * k * n` to a per-thread
//! counter under the currently active [`MacKind`]. Backward products are
//! not counted. Counters are thread-local, so concurrent graphs never mix.

use std::cell::{Cell, RefCell};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacKind {
    /// Score (`QK^T`) and aggregation (`AV`) products of an attention op.
    Attention,
    /// Token projections (`W_q`, `W_k`, `W_v`, output, patch embedding).
    Projection,
    Other,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub attention: u64,
    pub projection: u64,
    pub other: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.attention + self.projection + self.other
    }
}

thread_local! {
    static COUNTS: RefCell<MacCounts> = RefCell::new(MacCounts::default());
    static KIND: Cell<MacKind> = const { Cell::new(MacKind::Other) };
}

pub(crate) fn record(macs: u64) {
    let kind = KIND.with(Cell::get);
    COUNTS.with(|c| {
        let mut c = c.borrow_mut();
        match kind {
            MacKind::Attention => c.attention += macs,
            MacKind::Projection => c.projection += macs,
            MacKind::Other => c.other += macs,
        }
    });
}

/// Runs `f` with matrix products attributed to `kind`.
pub fn with_mac_kind<R>(kind: MacKind, f: impl FnOnce() -> R) -> R {
    let prev = KIND.with(|k| k.replace(kind));
    let out = f();
    KIND.with(|k| k.set(prev));
    out
}

/// Runs `f` and returns the products it performed. Nested measurements are
/// also charged to the enclosing one.
pub fn measure_macs<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let before = COUNTS.with(|c| *c.borrow());
    let out = f();
    let after = COUNTS.with(|c| *c.borrow());
    let delta = MacCounts {
        attention: after.attention - before.attention,
        projection: after.projection - before.projection,
        other: after.other - before.other,
    };
    (out, delta)
}
