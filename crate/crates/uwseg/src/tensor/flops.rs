//! Analytic FLOP accounting.
//!
//! Ops report their cost (2 FLOPs per multiply-accumulate for matmul/conv,
//! 1 op per output element for elementwise/norm/resize) to a thread-local
//! collector when one is installed. Costs are attributed to the innermost
//! active scope label, so a forward pass instrumented with module scopes
//! yields a per-module breakdown that sums exactly to the total.

use std::cell::RefCell;
use std::collections::BTreeMap;

thread_local! {
    static COLLECTOR: RefCell<Option<Collector>> = const { RefCell::new(None) };
}

struct Collector {
    stack: Vec<&'static str>,
    total: u64,
    by_scope: BTreeMap<String, u64>,
}

/// Add `n` FLOPs to the active collector, if any. No-op otherwise.
#[inline]
pub fn add(n: u64) {
    COLLECTOR.with(|c| {
        if let Some(col) = c.borrow_mut().as_mut() {
            col.total += n;
            let key = col.stack.last().copied().unwrap_or("other").to_string();
            *col.by_scope.entry(key).or_insert(0) += n;
        }
    });
}

/// Run `f` with costs attributed to `label` (restores the previous scope on exit).
pub fn scope<T>(label: &'static str, f: impl FnOnce() -> T) -> T {
    COLLECTOR.with(|c| {
        if let Some(col) = c.borrow_mut().as_mut() {
            col.stack.push(label);
        }
    });
    let out = f();
    COLLECTOR.with(|c| {
        if let Some(col) = c.borrow_mut().as_mut() {
            col.stack.pop();
        }
    });
    out
}

/// Run `f` while counting FLOPs; returns the result, the total and the
/// per-scope breakdown.
pub fn count<T>(f: impl FnOnce() -> T) -> (T, u64, BTreeMap<String, u64>) {
    COLLECTOR.with(|c| {
        *c.borrow_mut() = Some(Collector {
            stack: Vec::new(),
            total: 0,
            by_scope: BTreeMap::new(),
        });
    });
    let out = f();
    let col = COLLECTOR.with(|c| c.borrow_mut().take()).unwrap();
    (out, col.total, col.by_scope)
}
