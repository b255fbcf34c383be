//! The `(eps_internal, eps_leaf)` PGM index.
//!
//! Level 0 is an `eps_leaf`-PLA over `(key, rank)`. Every level above is an
//! `eps_internal`-PLA over the start keys of the level below, until a level
//! holds a single segment. Lookups start at `entry_level`, the highest level
//! whose child level is dense (more than `delta` segments); the near-empty
//! levels above it are never touched.

use std::sync::Arc;

use crate::error::{invalid_arg, Error, Result};
use crate::pla::{fit_keys, Segment};
use crate::search::{
    branchy_lower_bound, clamp_window, hybrid_lower_bound, predecessor_branchy,
    predecessor_unchecked, SearchThreshold,
};

/// Bytes per `(start, slope, intercept)` triple with 64-bit keys and doubles.
pub const DEFAULT_SEGMENT_BYTES: u64 = 24;

const MAGIC: &[u8; 8] = b"PGMPPIDX";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub segments: Vec<Segment>,
    /// `start_keys[i] == segments[i].start`, kept contiguous for scanning.
    pub start_keys: Vec<u64>,
}

impl Level {
    fn from_segments(segments: Vec<Segment>) -> Self {
        let start_keys = segments.iter().map(|s| s.start).collect();
        Self {
            segments,
            start_keys,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Prediction of segment `i` for `key`, capped at the next segment's
    /// intercept so queries falling between segments cannot overshoot.
    #[inline]
    fn predict(&self, i: usize, key: u64) -> f64 {
        let p = self.segments[i].eval(key);
        match self.segments.get(i + 1) {
            Some(next) => p.min(next.intercept),
            None => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildParams {
    pub eps_internal: u64,
    pub eps_leaf: u64,
    pub delta: SearchThreshold,
}

impl BuildParams {
    pub fn new(eps_internal: u64, eps_leaf: u64) -> Self {
        Self {
            eps_internal,
            eps_leaf,
            delta: SearchThreshold::default(),
        }
    }

    pub fn with_delta(mut self, delta: SearchThreshold) -> Self {
        self.delta = delta;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IndexStats {
    pub height: usize,
    pub leaf_segments: usize,
    pub internal_segments: usize,
    pub size_bytes: u64,
}

impl IndexStats {
    pub fn total_segments(&self) -> usize {
        self.leaf_segments + self.internal_segments
    }

    pub fn leaf_share(&self) -> f64 {
        self.leaf_segments as f64 / self.total_segments() as f64
    }
}

/// Worst observed prediction error per level, measured over the points each
/// level was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelErrors {
    /// `max_error[l]` for level `l` (0 = leaf).
    pub max_error: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PgmIndex {
    keys: Arc<[u64]>,
    levels: Vec<Level>,
    eps_internal: u64,
    eps_leaf: u64,
    delta: SearchThreshold,
    entry_level: usize,
}

impl PgmIndex {
    pub fn build(keys: impl Into<Arc<[u64]>>, eps_internal: u64, eps_leaf: u64) -> Result<Self> {
        Self::build_with(keys, BuildParams::new(eps_internal, eps_leaf))
    }

    pub fn build_with(keys: impl Into<Arc<[u64]>>, params: BuildParams) -> Result<Self> {
        let keys = keys.into();
        if params.eps_internal == 0 || params.eps_leaf == 0 {
            return Err(invalid_arg("error bounds must be at least 1"));
        }
        if keys.is_empty() {
            return Err(invalid_arg("cannot index an empty key set"));
        }
        let mut levels = vec![Level::from_segments(
            fit_keys(&keys, params.eps_leaf)
                .map_err(|e| invalid_arg(format!("leaf level: {e}")))?
                .segments,
        )];
        while levels.last().map_or(false, |l| l.len() > 1) {
            let below = &levels.last().unwrap().start_keys;
            let model = fit_keys(below, params.eps_internal)?;
            debug_assert!(model.len() < below.len());
            levels.push(Level::from_segments(model.segments));
        }
        Ok(Self::assemble(
            keys,
            levels,
            params.eps_internal,
            params.eps_leaf,
            params.delta,
        ))
    }

    fn assemble(
        keys: Arc<[u64]>,
        levels: Vec<Level>,
        eps_internal: u64,
        eps_leaf: u64,
        delta: SearchThreshold,
    ) -> Self {
        let entry_level = entry_level_for(&levels, delta);
        Self {
            keys,
            levels,
            eps_internal,
            eps_leaf,
            delta,
            entry_level,
        }
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn shared_keys(&self) -> Arc<[u64]> {
        Arc::clone(&self.keys)
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn eps_internal(&self) -> u64 {
        self.eps_internal
    }

    pub fn eps_leaf(&self) -> u64 {
        self.eps_leaf
    }

    pub fn delta(&self) -> SearchThreshold {
        self.delta
    }

    pub fn entry_level(&self) -> usize {
        self.entry_level
    }

    pub fn key_count(&self) -> usize {
        self.keys.len()
    }

    pub fn height(&self) -> usize {
        self.levels.len()
    }

    /// Lower-bound rank of `key`: the smallest `r` with `keys[r] >= key`, or
    /// `N` when `key` exceeds every stored key.
    #[inline]
    pub fn lookup(&self, key: u64) -> usize {
        let leaf = self.leaf_segment(key);
        self.last_mile(key, leaf)
    }

    /// Internal traversal: index of the leaf segment governing `key`.
    #[inline]
    pub fn leaf_segment(&self, key: u64) -> usize {
        let entry = &self.levels[self.entry_level];
        // The entry level holds at most `delta` segments (or is the root).
        let mut idx = entry
            .start_keys
            .iter()
            .map(|&s| (s <= key) as usize)
            .sum::<usize>()
            .saturating_sub(1);
        let radius = self.eps_internal as usize + 1;
        for l in (1..=self.entry_level).rev() {
            let pred = self.levels[l].predict(idx, key);
            let below = &self.levels[l - 1].start_keys;
            idx = predecessor_unchecked(below, floor_index(pred), radius, key, self.delta);
        }
        idx
    }

    /// Last-mile search over the raw keys around the leaf prediction.
    #[inline]
    pub fn last_mile(&self, key: u64, leaf: usize) -> usize {
        let pred = self.levels[0].predict(leaf, key);
        let (lo, hi) = self.leaf_window(pred);
        lo + hybrid_lower_bound(&self.keys[lo..=hi], key, self.delta)
    }

    #[inline]
    fn leaf_window(&self, pred: f64) -> (usize, usize) {
        let n = self.keys.len();
        let eps = self.eps_leaf as usize;
        let pos = floor_index(pred).min(n - 1);
        // One extra slot on the right absorbs the floor of a fractional
        // prediction for keys that fall between training points.
        (pos.saturating_sub(eps), (pos + eps + 1).min(n - 1))
    }

    /// The same structure searched the way the original index does it: from
    /// the root, with a branchy binary search at every level.
    #[inline]
    pub fn lookup_branchy(&self, key: u64) -> usize {
        let leaf = self.leaf_segment_branchy(key);
        self.last_mile_branchy(key, leaf)
    }

    #[inline]
    pub fn leaf_segment_branchy(&self, key: u64) -> usize {
        let mut idx = 0usize;
        let radius = self.eps_internal as usize + 1;
        for l in (1..self.levels.len()).rev() {
            let pred = self.levels[l].predict(idx, key);
            let below = &self.levels[l - 1].start_keys;
            idx = predecessor_branchy(below, floor_index(pred), radius, key);
        }
        idx
    }

    #[inline]
    pub fn last_mile_branchy(&self, key: u64, leaf: usize) -> usize {
        let pred = self.levels[0].predict(leaf, key);
        let (lo, hi) = self.leaf_window(pred);
        lo + branchy_lower_bound(&self.keys[lo..=hi], key)
    }

    /// Re-evaluates every level on the points it was trained on.
    pub fn level_errors(&self) -> LevelErrors {
        let mut max_error = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let points: &[u64] = if l == 0 {
                &self.keys
            } else {
                &self.levels[l - 1].start_keys
            };
            let mut seg = 0;
            let mut worst = 0.0f64;
            for (rank, &k) in points.iter().enumerate() {
                while seg + 1 < level.len() && level.start_keys[seg + 1] <= k {
                    seg += 1;
                }
                worst = worst.max((level.segments[seg].eval(k) - rank as f64).abs());
            }
            max_error.push(worst);
        }
        LevelErrors { max_error }
    }

    pub fn stats(&self) -> IndexStats {
        self.stats_with_segment_bytes(DEFAULT_SEGMENT_BYTES)
    }

    pub fn stats_with_segment_bytes(&self, seg_bytes: u64) -> IndexStats {
        let leaf_segments = self.levels[0].len();
        let internal_segments: usize = self.levels[1..].iter().map(Level::len).sum();
        IndexStats {
            height: self.levels.len(),
            leaf_segments,
            internal_segments,
            size_bytes: (leaf_segments + internal_segments) as u64 * seg_bytes,
        }
    }

    /// Serializes the structure (not the keys) into the versioned blob format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let total: usize = self.levels.iter().map(Level::len).sum();
        let mut out = Vec::with_capacity(60 + self.levels.len() * 8 + total * 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            self.keys.len() as u64,
            self.eps_internal,
            self.eps_leaf,
            self.levels.len() as u64,
            self.delta.get() as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for level in &self.levels {
            out.extend_from_slice(&(level.len() as u64).to_le_bytes());
            for s in &level.segments {
                out.extend_from_slice(&s.start.to_le_bytes());
                out.extend_from_slice(&s.slope.to_le_bytes());
                out.extend_from_slice(&s.intercept.to_le_bytes());
            }
        }
        out
    }

    /// Restores an index from [`Self::to_bytes`] output and the key set it was
    /// built over.
    pub fn from_bytes(bytes: &[u8], keys: impl Into<Arc<[u64]>>) -> Result<Self> {
        let keys = keys.into();
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad index magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported index format version {version}"
            )));
        }
        let n = r.u64()?;
        let eps_internal = r.u64()?;
        let eps_leaf = r.u64()?;
        let level_count = r.u64()?;
        let delta = SearchThreshold::new(r.u64()? as usize)
            .map_err(|_| Error::Format("zero search threshold".into()))?;
        if n != keys.len() as u64 || n == 0 {
            return Err(Error::Format(format!(
                "index was built over {n} keys, {} supplied",
                keys.len()
            )));
        }
        if eps_internal == 0 || eps_leaf == 0 || level_count == 0 {
            return Err(Error::Format("zero error bound or level count".into()));
        }
        let mut levels = Vec::new();
        for l in 0..level_count {
            let count = r.u64()? as usize;
            if count == 0 || count.saturating_mul(24) > r.remaining() {
                return Err(Error::Format(format!("level {l} declares {count} segments")));
            }
            let mut segments = Vec::with_capacity(count);
            for _ in 0..count {
                segments.push(Segment {
                    start: r.u64()?,
                    slope: f64::from_bits(r.u64()?),
                    intercept: f64::from_bits(r.u64()?),
                });
            }
            let level = Level::from_segments(segments);
            if level.start_keys.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!(
                    "level {l} start keys are not increasing"
                )));
            }
            levels.push(level);
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        if levels.last().unwrap().len() != 1 {
            return Err(Error::Format("top level must hold exactly one segment".into()));
        }
        Ok(Self::assemble(keys, levels, eps_internal, eps_leaf, delta))
    }
}

/// Free-function forms matching the operation names used elsewhere.
pub fn build(keys: &[u64], eps_internal: u64, eps_leaf: u64) -> Result<PgmIndex> {
    PgmIndex::build(keys.to_vec(), eps_internal, eps_leaf)
}

pub fn lookup(index: &PgmIndex, key: u64) -> usize {
    index.lookup(key)
}

pub fn stats_of(index: &PgmIndex) -> IndexStats {
    index.stats()
}

/// Highest level whose child level holds more than `delta` segments, or the
/// root when no level qualifies.
fn entry_level_for(levels: &[Level], delta: SearchThreshold) -> usize {
    (1..levels.len())
        .rev()
        .find(|&l| levels[l - 1].len() > delta.get())
        .unwrap_or(levels.len() - 1)
}

#[inline]
fn floor_index(pred: f64) -> usize {
    // Saturating float-to-int cast: negatives and NaN map to 0.
    pred.floor() as usize
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format("truncated index blob".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Clamped window helper re-exported for callers that emulate traversal.
pub fn traversal_window(len: usize, pred: f64, radius: usize) -> (usize, usize) {
    clamp_window(len, floor_index(pred), radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_keys(n: usize, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys: Vec<u64> = (0..n).map(|_| rng.random_range(0..1u64 << 50)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys
    }

    fn oracle(keys: &[u64], q: u64) -> usize {
        keys.partition_point(|&k| k < q)
    }

    #[test]
    fn two_eps_plus_one_keys_is_a_single_segment() {
        for eps in [1u64, 4, 16] {
            let keys = uniform_keys((2 * eps + 1) as usize, eps);
            let idx = PgmIndex::build(keys.clone(), eps, eps).unwrap();
            assert_eq!(idx.height(), 1);
            assert_eq!(idx.levels()[0].len(), 1);
            let s = idx.stats();
            assert_eq!((s.height, s.leaf_segments, s.internal_segments), (1, 1, 0));
            for (r, &k) in keys.iter().enumerate() {
                assert_eq!(idx.lookup(k), r);
            }
        }
    }

    #[test]
    fn boundary_semantics() {
        let keys = uniform_keys(10_000, 1);
        let idx = PgmIndex::build(keys.clone(), 4, 8).unwrap();
        assert_eq!(idx.lookup(keys[0]), 0);
        assert_eq!(idx.lookup(0), oracle(&keys, 0));
        assert_eq!(idx.lookup(keys[keys.len() - 1] + 1), keys.len());
        assert_eq!(idx.lookup(u64::MAX), keys.len());
        assert_eq!(idx.lookup_branchy(u64::MAX), keys.len());
        assert_eq!(idx.lookup_branchy(0), 0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(PgmIndex::build(Vec::<u64>::new(), 4, 4).is_err());
        assert!(PgmIndex::build(vec![1, 1, 2], 4, 4).is_err());
        assert!(PgmIndex::build(vec![1, 2, 3], 0, 4).is_err());
    }

    #[test]
    fn present_and_absent_keys_match_oracle() {
        let keys = uniform_keys(200_000, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (ei, el) in [(4, 4), (8, 64), (64, 8), (1, 1), (1024, 2)] {
            let idx = PgmIndex::build(keys.clone(), ei, el).unwrap();
            for (r, &k) in keys.iter().enumerate().step_by(7) {
                assert_eq!(idx.lookup(k), r);
                assert_eq!(idx.lookup_branchy(k), r);
            }
            for _ in 0..20_000 {
                let q = rng.random_range(0..1u64 << 50);
                assert_eq!(idx.lookup(q), oracle(&keys, q), "q={q} ei={ei} el={el}");
                assert_eq!(idx.lookup_branchy(q), oracle(&keys, q));
            }
        }
    }

    #[test]
    fn structure_invariants() {
        let keys = uniform_keys(100_000, 3);
        for delta in [1usize, 8, 64] {
            let params = BuildParams::new(2, 4).with_delta(SearchThreshold::new(delta).unwrap());
            let idx = PgmIndex::build_with(keys.clone(), params).unwrap();
            let levels = idx.levels();
            assert_eq!(levels.last().unwrap().len(), 1);
            assert!(levels.windows(2).all(|w| w[0].len() >= w[1].len()));
            for l in levels {
                assert!(l.start_keys.windows(2).all(|w| w[0] < w[1]));
                assert!(l.segments.iter().zip(&l.start_keys).all(|(s, &k)| s.start == k));
            }
            let e = idx.entry_level();
            if e + 1 < levels.len() {
                assert!(levels[e].len() <= delta);
            }
            if e > 0 {
                assert!(levels[e - 1].len() > delta || e == levels.len() - 1);
            }
        }
    }

    #[test]
    fn entry_level_rules() {
        let seg = |start| Segment {
            start,
            slope: 0.0,
            intercept: 0.0,
        };
        let level = |n: u64| Level::from_segments((0..n).map(seg).collect());
        let d8 = SearchThreshold::new(8).unwrap();
        assert_eq!(entry_level_for(&[level(20_000), level(7), level(1)], d8), 1);
        assert_eq!(entry_level_for(&[level(20_000), level(14), level(1)], d8), 2);
        assert_eq!(entry_level_for(&[level(5), level(1)], d8), 1);
        assert_eq!(entry_level_for(&[level(1)], d8), 0);
    }

    #[test]
    fn level_errors_within_bounds() {
        let keys = uniform_keys(300_000, 4);
        let idx = PgmIndex::build(keys, 3, 16).unwrap();
        let errs = idx.level_errors();
        assert!(errs.max_error[0] <= 16.0 + 1e-6);
        for &e in &errs.max_error[1..] {
            assert!(e <= 3.0 + 1e-6);
        }
    }

    #[test]
    fn blob_round_trip_and_corruption() {
        let keys = uniform_keys(50_000, 5);
        let idx = PgmIndex::build(keys.clone(), 4, 16).unwrap();
        let blob = idx.to_bytes();
        let back = PgmIndex::from_bytes(&blob, keys.clone()).unwrap();
        assert_eq!(back.levels(), idx.levels());
        assert_eq!(back.entry_level(), idx.entry_level());
        assert_eq!(back.lookup(keys[123]), 123);

        assert!(PgmIndex::from_bytes(&blob[..blob.len() - 1], keys.clone()).is_err());
        assert!(PgmIndex::from_bytes(&blob, keys[1..].to_vec()).is_err());
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(PgmIndex::from_bytes(&bad, keys.clone()).is_err());
        let mut bad = blob;
        bad.push(0);
        assert!(PgmIndex::from_bytes(&bad, keys).is_err());
    }

    #[test]
    fn blob_header_layout() {
        let keys: Vec<u64> = (0..100).map(|i| i * 3).collect();
        let idx = PgmIndex::build(keys, 2, 4).unwrap();
        let blob = idx.to_bytes();
        assert_eq!(&blob[..8], b"PGMPPIDX");
        assert_eq!(u32::from_le_bytes(blob[8..12].try_into().unwrap()), 1);
        let word = |i: usize| u64::from_le_bytes(blob[12 + 8 * i..20 + 8 * i].try_into().unwrap());
        assert_eq!((word(0), word(1), word(2), word(3), word(4)), (100, 2, 4, 1, 8));
        assert_eq!(word(5), 1);
        assert_eq!(word(6), 0);
        assert_eq!(blob.len(), 12 + 5 * 8 + 8 + 24);
    }

    #[test]
    fn segment_counts_match_recount() {
        let keys = uniform_keys(100_000, 6);
        let idx = PgmIndex::build(keys, 8, 8).unwrap();
        let s = stats_of(&idx);
        let recount: usize = idx.levels().iter().map(|l| l.segments.len()).sum();
        assert_eq!(s.total_segments(), recount);
        assert_eq!(s.leaf_segments, idx.levels()[0].segments.len());
        assert_eq!(s.size_bytes, recount as u64 * 24);
        assert_eq!(idx.stats_with_segment_bytes(16).size_bytes, recount as u64 * 16);
    }
}
