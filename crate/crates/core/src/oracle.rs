//! Brute-force references for differential tests. Nothing here calls the
//! fitter or the search routines it is used to check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{time_round_robin, PassMode, Strategy};
use crate::index::{BuildParams, PgmIndex};
use crate::search::SearchThreshold;

/// Textbook lower bound: smallest `i` with `keys[i] >= query`.
pub fn exact_rank(keys: &[u64], query: u64) -> usize {
    let (mut lo, mut hi) = (0usize, keys.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if keys[mid] < query {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

pub const MAX_OPTIMAL_PLA_POINTS: usize = 4096;

/// Exact rational `num / den` with `den > 0`.
#[derive(Clone, Copy)]
struct Ratio {
    num: i128,
    den: i128,
}

impl Ratio {
    fn le(self, o: Ratio) -> bool {
        self.num * o.den <= o.num * self.den
    }
}

/// Minimum number of segments in any `epsilon`-PLA of `points` (`x` strictly
/// increasing), by dynamic programming over split points.
///
/// A span is feasible when some line passes within `epsilon` of every point:
/// for every pair `i < j` the slope must lie in
/// `[(y_j - y_i - 2e) / (x_j - x_i), (y_j - y_i + 2e) / (x_j - x_i)]`, and the
/// span is feasible exactly when all those intervals intersect.
pub fn optimal_pla_count(points: &[(u64, u64)], epsilon: u64) -> Result<usize> {
    if points.len() > MAX_OPTIMAL_PLA_POINTS {
        return Err(Error::Refused(format!(
            "{} points exceed the oracle limit of {MAX_OPTIMAL_PLA_POINTS}",
            points.len()
        )));
    }
    if epsilon == 0 {
        return Err(Error::InvalidArgument("epsilon must be at least 1".into()));
    }
    if points.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::InvalidArgument("x must be strictly increasing".into()));
    }
    let n = points.len();
    if n == 0 {
        return Ok(0);
    }
    let two_e = 2 * epsilon as i128;
    // reach[i]: exclusive end of the longest feasible span starting at i.
    let mut reach = vec![0usize; n];
    for i in 0..n {
        let mut lo: Option<Ratio> = None;
        let mut hi: Option<Ratio> = None;
        let mut j = i + 1;
        'extend: while j < n {
            let (xj, yj) = (points[j].0 as i128, points[j].1 as i128);
            let (mut new_lo, mut new_hi) = (lo, hi);
            for &(x, y) in &points[i..j] {
                let dx = xj - x as i128;
                let dy = yj - y as i128;
                let l = Ratio { num: dy - two_e, den: dx };
                let h = Ratio { num: dy + two_e, den: dx };
                if new_lo.is_none_or(|c| c.le(l)) {
                    new_lo = Some(l);
                }
                if new_hi.is_none_or(|c| h.le(c)) {
                    new_hi = Some(h);
                }
                if let (Some(a), Some(b)) = (new_lo, new_hi) {
                    if !a.le(b) {
                        break 'extend;
                    }
                }
            }
            lo = new_lo;
            hi = new_hi;
            j += 1;
        }
        reach[i] = j;
    }
    // best[j]: fewest segments covering points[..j].
    let mut best = vec![usize::MAX; n + 1];
    best[0] = 0;
    for j in 1..=n {
        for i in 0..j {
            if reach[i] >= j && best[i] != usize::MAX {
                best[j] = best[j].min(best[i] + 1);
            }
        }
    }
    Ok(best[n])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCoverage {
    pub level: usize,
    pub mean: f64,
    pub min: usize,
    /// Smallest coverage among all but the last segment; `None` for a
    /// single-segment level.
    pub min_non_final: Option<usize>,
    pub segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_level: Vec<LevelCoverage>,
}

impl CoverageReport {
    pub fn leaf(&self) -> &LevelCoverage {
        &self.per_level[0]
    }
}

/// Points of the level below served by each segment, found by walking each
/// level's start keys against the sorted points beneath it.
pub fn measure_coverage(index: &PgmIndex) -> CoverageReport {
    let levels = index.levels();
    let per_level = (0..levels.len())
        .map(|l| {
            let below: &[u64] = if l == 0 {
                index.keys()
            } else {
                &levels[l - 1].start_keys
            };
            let starts = &levels[l].start_keys;
            let mut counts = vec![0usize; starts.len()];
            let mut s = 0;
            for &k in below {
                while s + 1 < starts.len() && starts[s + 1] <= k {
                    s += 1;
                }
                counts[s] += 1;
            }
            LevelCoverage {
                level: l,
                mean: below.len() as f64 / starts.len() as f64,
                min: counts.iter().copied().min().unwrap_or(0),
                min_non_final: counts[..counts.len() - 1].iter().copied().min(),
                segments: starts.len(),
            }
        })
        .collect();
    CoverageReport { per_level }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveResult {
    pub eps_leaf: u64,
    pub best_eps_internal: u64,
    /// `(eps_internal, mean lookup ns)` for every candidate, in input order.
    pub measured: Vec<(u64, f64)>,
}

impl ExhaustiveResult {
    pub fn time_of(&self, eps_internal: u64) -> Option<f64> {
        self.measured.iter().find(|m| m.0 == eps_internal).map(|m| m.1)
    }

    pub fn best_time(&self) -> f64 {
        self.time_of(self.best_eps_internal).unwrap()
    }
}

/// Builds one index per candidate `eps_internal` at the given `eps_leaf` and
/// returns the candidate with the lowest measured mean lookup time. All
/// candidates are timed round-robin under `mode`.
pub fn exhaustive_tune(
    keys: &[u64],
    eps_leaf: u64,
    candidates: &[u64],
    queries: &[u64],
    delta: SearchThreshold,
    reps: usize,
    mode: PassMode,
) -> Result<ExhaustiveResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    let shared: std::sync::Arc<[u64]> = keys.into();
    let indexes = candidates
        .iter()
        .map(|&ei| PgmIndex::build_with(shared.clone(), BuildParams::new(ei, eps_leaf).with_delta(delta)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PgmIndex> = indexes.iter().collect();
    let times = time_round_robin(&refs, Strategy::Hybrid, queries, reps, mode);
    let measured: Vec<(u64, f64)> = candidates.iter().copied().zip(times).collect();
    let best = measured
        .iter()
        .fold(measured[0], |b, &m| if m.1 < b.1 { m } else { b });
    Ok(ExhaustiveResult {
        eps_leaf,
        best_eps_internal: best.0,
        measured,
    })
}
