//! Error-bounded search primitives over small sorted windows.
//!
//! All functions return a lower bound: the smallest index `i` with
//! `window[i] >= key`, or `window.len()` when every element is smaller.

use std::hint::select_unpredictable;

use crate::error::{Error, Result};

/// Window length at or below which [`hybrid_lower_bound`] falls back to a
/// linear scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct SearchThreshold(usize);

impl SearchThreshold {
    pub const MIN: usize = 4;
    pub const MAX: usize = 64;

    pub fn new(delta: usize) -> Result<Self> {
        if delta == 0 {
            return Err(Error::InvalidArgument(
                "search threshold must be at least 1".into(),
            ));
        }
        Ok(Self(delta))
    }

    /// Clamps a measured crossover into the supported range.
    pub fn clamped(delta: usize) -> Self {
        Self(delta.clamp(Self::MIN, Self::MAX))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for SearchThreshold {
    fn default() -> Self {
        Self(8)
    }
}

/// Which concrete search [`hybrid_lower_bound`] dispatches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchPath {
    Linear,
    Branchless,
}

#[inline]
pub fn hybrid_path(len: usize, delta: SearchThreshold) -> SearchPath {
    if len <= delta.0 {
        SearchPath::Linear
    } else {
        SearchPath::Branchless
    }
}

#[inline]
pub fn linear_lower_bound(window: &[u64], key: u64) -> usize {
    // Counting instead of early exit keeps the loop free of a
    // data-dependent exit and lets it vectorize.
    window.iter().map(|&x| (x < key) as usize).sum()
}

/// Binary search whose loop body selects the next base with arithmetic
/// instead of a conditional jump; the trip count depends only on the length.
#[inline]
pub fn branchless_lower_bound(window: &[u64], key: u64) -> usize {
    let mut len = window.len();
    if len == 0 {
        return 0;
    }
    let mut base = 0usize;
    while len > 1 {
        let half = len / 2;
        // SAFETY: base + half < base + len <= window.len()
        let probe = unsafe { *window.get_unchecked(base + half) };
        base = select_unpredictable(probe < key, base + half, base);
        len -= half;
    }
    // SAFETY: base < window.len()
    base + (unsafe { *window.get_unchecked(base) } < key) as usize
}

/// Textbook branchy binary search, the `std::lower_bound` shape. Kept as the
/// baseline the branch-free variants are measured against.
#[inline(never)]
pub fn branchy_lower_bound(window: &[u64], key: u64) -> usize {
    let mut lo = 0usize;
    let mut hi = window.len();
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if window[mid] < key {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

#[inline]
pub fn hybrid_lower_bound(window: &[u64], key: u64, delta: SearchThreshold) -> usize {
    match hybrid_path(window.len(), delta) {
        SearchPath::Linear => linear_lower_bound(window, key),
        SearchPath::Branchless => branchless_lower_bound(window, key),
    }
}

/// Clamped window `[center - radius, center + radius]` (inclusive) over a
/// level of `len` elements.
#[inline]
pub fn clamp_window(len: usize, center: usize, radius: usize) -> (usize, usize) {
    debug_assert!(len > 0);
    let center = center.min(len - 1);
    (center.saturating_sub(radius), (center + radius).min(len - 1))
}

/// Largest index `j` in the clamped window with `level_keys[j] <= key`, or the
/// window's left edge when every window key exceeds `key`.
pub fn predecessor_in_window(
    level_keys: &[u64],
    center: usize,
    radius: usize,
    key: u64,
) -> Result<usize> {
    if level_keys.is_empty() {
        return Err(Error::InvalidState("empty level".into()));
    }
    Ok(predecessor_unchecked(
        level_keys,
        center,
        radius,
        key,
        SearchThreshold::default(),
    ))
}

#[inline]
pub(crate) fn predecessor_unchecked(
    level_keys: &[u64],
    center: usize,
    radius: usize,
    key: u64,
    delta: SearchThreshold,
) -> usize {
    let (lo, hi) = clamp_window(level_keys.len(), center, radius);
    let window = &level_keys[lo..=hi];
    let lb = hybrid_lower_bound(window, key, delta);
    let hit = lb < window.len() && window[lb] == key;
    lo + if hit { lb } else { lb.saturating_sub(1) }
}

#[inline]
pub(crate) fn predecessor_branchy(level_keys: &[u64], center: usize, radius: usize, key: u64) -> usize {
    let (lo, hi) = clamp_window(level_keys.len(), center, radius);
    let window = &level_keys[lo..=hi];
    let lb = branchy_lower_bound(window, key);
    let hit = lb < window.len() && window[lb] == key;
    lo + if hit { lb } else { lb.saturating_sub(1) }
}
