//! Per-thread allocation accounting, used to verify memory profiles (for
//! example that tile generation keeps its transient footprint flat as the
//! output grows).
//!
//! Register [`TrackingAllocator`] as the global allocator in a test binary,
//! then bracket the code under scrutiny with [`reset_peak`] and
//! [`peak_bytes`]. Counters are per thread, so parallel test threads do not
//! disturb each other's measurements.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn record(delta: isize) {
    // try_with: allocations during thread teardown must not panic.
    let _ = CURRENT.try_with(|cur| {
        let now = cur.get() + delta;
        cur.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

/// System allocator wrapper that tracks live bytes and their high-water mark
/// per thread.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            // Count the new block before releasing the old one: a moving
            // realloc briefly holds both, and the high-water mark should see
            // that.
            record(new_size as isize);
            record(-(layout.size() as isize));
        }
        p
    }
}

/// Live bytes currently allocated on this thread (only meaningful when
/// [`TrackingAllocator`] is the global allocator).
pub fn current_bytes() -> isize {
    CURRENT.with(Cell::get)
}

/// High-water mark of live bytes on this thread since the last
/// [`reset_peak`].
pub fn peak_bytes() -> isize {
    PEAK.with(Cell::get)
}

/// Restarts peak tracking from the current live-byte level.
pub fn reset_peak() {
    CURRENT.with(|c| PEAK.with(|p| p.set(c.get())));
}
