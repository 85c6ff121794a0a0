//! Multiply-accumulate instrumentation.
//!
//! When a counter is active on the current thread, every matrix product and
//! convolution adds its MAC count. One MAC counts as one FLOP; bias adds,
//! activations, normalizations, softmax, pooling and rearrangements are free.
//!
//! Attention modules additionally publish the two terms of the attention cost
//! model under [`ATTN_AFFINITY`] and [`ATTN_MIXING`]: the query-key affinity
//! MACs they actually execute, and one `width x width` token-mixing pass per
//! token stream that enters the attention (`tokens * width^2`, where `width` is
//! the full token width of the module input).

use std::cell::RefCell;
use std::collections::BTreeMap;

/// Tag for measured query-key affinity MACs inside attention cores.
pub const ATTN_AFFINITY: &str = "attention.affinity";
/// Tag for the per-stream token-mixing term of the attention cost model.
pub const ATTN_MIXING: &str = "attention.mixing";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    /// Every executed MAC.
    pub total: u64,
    /// Tagged side tallies; not part of `total` unless the tag was also executed work.
    pub tags: BTreeMap<&'static str, u64>,
}

impl MacCounter {
    pub fn tag(&self, name: &str) -> u64 {
        self.tags.get(name).copied().unwrap_or(0)
    }
}

thread_local! {
    static COUNTER: RefCell<Option<MacCounter>> = const { RefCell::new(None) };
}

/// Runs `f` with a fresh counter installed on this thread and returns the tally.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, MacCounter) {
    let previous = COUNTER.with(|c| c.borrow_mut().replace(MacCounter::default()));
    let out = f();
    let counted = COUNTER.with(|c| {
        let mut slot = c.borrow_mut();
        let counted = slot.take().unwrap_or_default();
        *slot = previous;
        counted
    });
    (out, counted)
}

pub(crate) fn record(macs: u64) {
    COUNTER.with(|c| {
        if let Some(counter) = c.borrow_mut().as_mut() {
            counter.total += macs;
        }
    });
}

pub(crate) fn note(tag: &'static str, value: u64) {
    COUNTER.with(|c| {
        if let Some(counter) = c.borrow_mut().as_mut() {
            *counter.tags.entry(tag).or_insert(0) += value;
        }
    });
}

#[cfg(test)]
pub(crate) fn active() -> bool {
    COUNTER.with(|c| c.borrow().is_some())
}
