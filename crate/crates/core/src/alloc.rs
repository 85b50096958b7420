//! Heap accounting used by the benchmark harness.
//!
//! A counting global allocator tracks live and peak bytes for the current
//! thread, so concurrent test threads do not pollute each other's numbers.
//! Bytes freed on a different thread than the one that allocated them are
//! charged to the freeing thread; the benchmark runs single-threaded by
//! default so its numbers are exact.
//!
//! A soft budget can be installed for the current thread. Fallible tensor
//! allocation ([`try_alloc`]) reports [`Error::OutOfMemory`] when a request
//! would exceed it; ordinary allocations are never refused.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use crate::error::{Error, Result};

pub struct CountingAlloc;

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    static LIMIT: Cell<usize> = const { Cell::new(usize::MAX) };
}

#[inline]
fn charge(bytes: usize) {
    let _ = LIVE.try_with(|live| {
        let next = live.get() + bytes as isize;
        live.set(next);
        let _ = PEAK.try_with(|peak| {
            if next > peak.get() {
                peak.set(next);
            }
        });
    });
}

#[inline]
fn release(bytes: usize) {
    let _ = LIVE.try_with(|live| live.set(live.get() - bytes as isize));
}

// SAFETY: all calls forward to `System`; the bookkeeping touches only
// const-initialised, drop-free thread locals and never allocates.
unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        charge(layout.size());
        let ptr = System.alloc(layout);
        if ptr.is_null() {
            release(layout.size());
        }
        ptr
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        charge(layout.size());
        let ptr = System.alloc_zeroed(layout);
        if ptr.is_null() {
            release(layout.size());
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        release(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let old = layout.size();
        if new_size > old {
            charge(new_size - old);
        }
        let out = System.realloc(ptr, layout, new_size);
        if out.is_null() {
            if new_size > old {
                release(new_size - old);
            }
        } else if new_size < old {
            release(old - new_size);
        }
        out
    }
}

/// Bytes currently live on this thread (may be negative if this thread
/// freed memory allocated elsewhere).
pub fn live_bytes() -> isize {
    LIVE.with(Cell::get)
}

/// Resets the peak watermark to the current live count and returns it.
pub fn reset_peak() -> isize {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
    live
}

pub fn peak_bytes() -> isize {
    PEAK.with(Cell::get)
}

/// Runs `f` and returns its result with the peak number of bytes allocated
/// above the live level at entry.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = reset_peak();
    let out = f();
    let peak = peak_bytes();
    (out, (peak - base).max(0) as usize)
}

/// Runs `f` with a soft budget of `bytes` above the current live level.
pub fn with_budget<R>(bytes: usize, f: impl FnOnce() -> R) -> R {
    let base = live_bytes().max(0) as usize;
    let prev = LIMIT.with(|l| l.replace(base.saturating_add(bytes)));
    let out = f();
    LIMIT.with(|l| l.set(prev));
    out
}

/// Allocates a zeroed buffer, reporting failure instead of aborting.
pub fn try_alloc<T: Copy + Default>(len: usize) -> Result<Vec<T>> {
    let bytes = len.saturating_mul(std::mem::size_of::<T>());
    let limit = LIMIT.with(Cell::get);
    if (live_bytes().max(0) as usize).saturating_add(bytes) > limit {
        return Err(Error::OutOfMemory { bytes });
    }
    let mut v = Vec::new();
    v.try_reserve_exact(len).map_err(|_| Error::OutOfMemory { bytes })?;
    v.resize(len, T::default());
    Ok(v)
}

/// Best-effort estimate of physical memory available to this process.
pub fn available_memory() -> Option<usize> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    text.lines()
        .find(|l| l.starts_with("MemAvailable:"))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|kb| kb.parse::<usize>().ok())
        .map(|kb| kb * 1024)
}
