//! Host latency constants, the space/time cost models and the two-step
//! `(eps_internal, eps_leaf)` tuner.

use std::fmt;
use std::hint::black_box;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::pla::Segment;
use crate::search::{branchless_lower_bound, linear_lower_bound, SearchThreshold};
use crate::index::{BuildParams, PgmIndex};
use crate::stats::{
    calibrated_estimator, fit_height_scale, CalibrationConfig, Estimator, EstimatorKind,
    HeightObservation,
};
use crate::timing::{median, timer_resolution_ns};

/// Candidate internal error bounds `{2^2, ..., 2^10}`.
pub const CANDIDATES: [u64; 9] = [4, 8, 16, 32, 64, 128, 256, 512, 1024];
pub const MIN_EPS_LEAF: u64 = 4;
pub const MAX_EPS_LEAF: u64 = 4096;

/// Latency constants in nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    pub c_miss: f64,
    pub c_hit: f64,
    pub c_segment: f64,
    /// `c_linear(len) = c_linear_fixed + c_linear_per_element * len`.
    pub c_linear_fixed: f64,
    pub c_linear_per_element: f64,
    pub delta: SearchThreshold,
}

impl CostConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.c_miss,
            self.c_hit,
            self.c_segment,
            self.c_linear_fixed,
            self.c_linear_per_element,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("cost constants must be finite"));
        }
        if !(self.c_hit > 0.0 && self.c_miss > self.c_hit) {
            return Err(invalid_arg(format!(
                "need c_miss > c_hit > 0, got {} and {}",
                self.c_miss, self.c_hit
            )));
        }
        if !(self.c_segment > 0.0) || self.c_linear_fixed < 0.0 || self.c_linear_per_element < 0.0 {
            return Err(invalid_arg("c_segment must be positive, c_linear non-negative"));
        }
        Ok(())
    }

    pub fn c_linear(&self, len: u64) -> f64 {
        self.c_linear_fixed + self.c_linear_per_element * len as f64
    }

    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for CostConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# host cost constants, nanoseconds")?;
        writeln!(f, "c_miss = {}", self.c_miss)?;
        writeln!(f, "c_hit = {}", self.c_hit)?;
        writeln!(f, "c_segment = {}", self.c_segment)?;
        writeln!(f, "c_linear_fixed = {}", self.c_linear_fixed)?;
        writeln!(f, "c_linear_per_element = {}", self.c_linear_per_element)?;
        writeln!(f, "delta = {}", self.delta.get())
    }
}

impl FromStr for CostConstants {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut vals: [Option<f64>; 6] = [None; 6];
        const NAMES: [&str; 6] = [
            "c_miss",
            "c_hit",
            "c_segment",
            "c_linear_fixed",
            "c_linear_per_element",
            "delta",
        ];
        for (lineno, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let slot = NAMES
                .iter()
                .position(|&n| n == k)
                .ok_or_else(|| Error::Format(format!("line {}: unknown key {k:?}", lineno + 1)))?;
            let parsed: f64 = v
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad number {v:?}", lineno + 1)))?;
            vals[slot] = Some(parsed);
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::Format(format!("missing {}", NAMES[i])));
        let delta = get(5)?;
        if delta.fract() != 0.0 || delta < 1.0 {
            return Err(Error::Format(format!("delta must be a positive integer, got {delta}")));
        }
        let c = Self {
            c_miss: get(0)?,
            c_hit: get(1)?,
            c_segment: get(2)?,
            c_linear_fixed: get(3)?,
            c_linear_per_element: get(4)?,
            delta: SearchThreshold::new(delta as usize)?,
        };
        c.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(c)
    }
}

/// Sizes and repetition counts for the calibration probes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Repetitions per probe (the median is kept); at least 9.
    pub reps: usize,
    /// Pointer-chase footprint; `None` means four times the last-level cache.
    pub chase_bytes: Option<usize>,
    pub chase_steps: usize,
    /// Dependent operations per timed run of the in-cache probes.
    pub search_ops: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            reps: 25,
            chase_bytes: None,
            chase_steps: 1 << 20,
            search_ops: 1 << 16,
            seed: 0xC0FFEE,
        }
    }
}

impl ProbeConfig {
    /// Smaller chase footprint for smoke tests; `c_miss` then reflects
    /// whatever level of the hierarchy 64 MiB lands in.
    pub fn quick() -> Self {
        Self {
            chase_bytes: Some(64 << 20),
            chase_steps: 1 << 18,
            search_ops: 1 << 14,
            ..Self::default()
        }
    }

    pub fn chase_footprint(&self) -> usize {
        self.chase_bytes
            .unwrap_or_else(|| 4 * last_level_cache_bytes().unwrap_or(32 << 20))
    }
}

/// Largest cache reported under `/sys/devices/system/cpu/cpu0/cache`.
pub fn last_level_cache_bytes() -> Option<usize> {
    let dir = std::fs::read_dir("/sys/devices/system/cpu/cpu0/cache").ok()?;
    dir.filter_map(|e| {
        let size = std::fs::read_to_string(e.ok()?.path().join("size")).ok()?;
        parse_cache_size(size.trim())
    })
    .max()
}

fn parse_cache_size(s: &str) -> Option<usize> {
    let (num, mult) = match s.chars().last()? {
        'K' => (&s[..s.len() - 1], 1 << 10),
        'M' => (&s[..s.len() - 1], 1 << 20),
        'G' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<usize>().ok().map(|n| n * mult)
}

/// Measures every constant on this host. Run on an otherwise idle core.
pub fn calibrate_constants() -> Result<CostConstants> {
    calibrate_with(&ProbeConfig::default())
}

pub fn calibrate_with(cfg: &ProbeConfig) -> Result<CostConstants> {
    if cfg.reps < 9 {
        return Err(invalid_arg("calibration needs at least 9 repetitions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ops = cfg.search_ops;

    let hit_sizes = [2048usize, 65536];
    let hit_arrays: Vec<Vec<u64>> = hit_sizes.iter().map(|&n| sorted_array(&mut rng, n)).collect();
    let lengths: Vec<usize> = (2..=SearchThreshold::MAX).collect();
    let short_arrays: Vec<Vec<u64>> = lengths.iter().map(|&n| sorted_array(&mut rng, n)).collect();
    let segs: Vec<Segment> = (0..64)
        .map(|i| Segment {
            start: i * 1_000,
            slope: rng.random_range(0.001..1.0),
            intercept: rng.random_range(0.0..1e6),
        })
        .collect();
    let seg_keys: Vec<u64> = (0..4096).map(|_| rng.random_range(0..1u64 << 40)).collect();
    let chase = chase_ring(&mut rng, cfg.chase_footprint())?;

    let mut tasks: Vec<Task> = Vec::new();
    for arr in &hit_arrays {
        tasks.push(chain_task(&mut rng, arr, ops, |w, q| branchless_lower_bound(w, q)));
    }
    for arr in &short_arrays {
        tasks.push(chain_task(&mut rng, arr, ops, linear_lower_bound));
        tasks.push(chain_task(&mut rng, arr, ops, |w, q| branchless_lower_bound(w, q)));
    }
    tasks.push(Task {
        ops,
        // Each evaluation feeds the next key through an opaque zero mask, so
        // the loop times latency like a lookup's critical path. Throughput
        // loops swing with SMT contention on shared cores.
        run: Box::new(move || {
            let mask = black_box(0u64);
            let mut p = 0.0f64;
            for i in 0..ops {
                p = segs[i & 63].eval(seg_keys[i & 4095] | (p.to_bits() & mask));
            }
            black_box(p);
        }),
        warm: true,
    });
    let steps = cfg.chase_steps;
    let mut p = 0usize;
    tasks.push(Task {
        ops: steps,
        run: Box::new(move || {
            for _ in 0..steps {
                p = chase[p] as usize;
            }
            black_box(p);
        }),
        warm: false,
    });

    let t = run_round_robin(&mut tasks, cfg.reps, timer_resolution_ns())?;
    let c_hit = hit_sizes
        .iter()
        .zip(&t)
        .map(|(&n, &ns)| ns / (n as f64).log2().ceil())
        .sum::<f64>()
        / hit_sizes.len() as f64;
    let short = &t[hit_sizes.len()..hit_sizes.len() + 2 * lengths.len()];
    let lin: Vec<(f64, f64)> = lengths.iter().zip(short.chunks(2)).map(|(&l, c)| (l as f64, c[0])).collect();
    let bl: Vec<(f64, f64)> = lengths
        .iter()
        .zip(short.chunks(2))
        .map(|(&l, c)| ((l as f64).log2().ceil(), c[1]))
        .collect();
    let (c_linear_fixed, c_linear_per_element) = affine_fit(&lin);
    let (bl_fixed, bl_per_step) = affine_fit(&bl);
    // Crossover of the fitted curves; the raw points are too flat near the
    // crossing to locate it reliably.
    let crossover = (2..=SearchThreshold::MAX)
        .take_while(|&len| {
            let l = c_linear_fixed + c_linear_per_element * len as f64;
            l <= bl_fixed + bl_per_step * (len as f64).log2().ceil()
        })
        .last()
        .unwrap_or(SearchThreshold::MIN);
    let n = t.len();

    let c = CostConstants {
        c_miss: t[n - 1],
        c_hit,
        c_segment: t[n - 2],
        c_linear_fixed: c_linear_fixed.max(0.0),
        c_linear_per_element: c_linear_per_element.max(1e-3),
        delta: SearchThreshold::clamped(crossover),
    };
    c.validate().map_err(|e| Error::Calibration(e.to_string()))?;
    Ok(c)
}

struct Task<'a> {
    ops: usize,
    run: Box<dyn FnMut() + 'a>,
    /// Run once untimed right before each timed run, so the probe is not
    /// measured against caches the previous task flushed.
    warm: bool,
}

/// Times every task once per round so slow host drift spreads over all
/// probes instead of skewing whichever ran during it. Returns the median ns
/// per op of each task.
fn run_round_robin(tasks: &mut [Task], reps: usize, resolution: f64) -> Result<Vec<f64>> {
    for t in tasks.iter_mut() {
        (t.run)();
    }
    let mut samples = vec![Vec::with_capacity(reps); tasks.len()];
    for _ in 0..reps {
        for (t, s) in tasks.iter_mut().zip(&mut samples) {
            if t.warm {
                (t.run)();
            }
            let start = Instant::now();
            (t.run)();
            s.push(start.elapsed().as_nanos() as f64);
        }
    }
    tasks
        .iter()
        .zip(&mut samples)
        .map(|(t, s)| {
            let total = median(s);
            if total < 1000.0 * resolution {
                return Err(Error::Calibration(format!(
                    "probe run of {total:.0} ns is under 1000x the {resolution:.0} ns timer resolution"
                )));
            }
            Ok(total / t.ops as f64)
        })
        .collect()
}

/// Latency of `search` over `arr`, each query depending on the previous
/// result so calls cannot overlap.
fn chain_task<'a>(
    rng: &mut ChaCha8Rng,
    arr: &'a [u64],
    ops: usize,
    search: impl Fn(&[u64], u64) -> usize + 'a,
) -> Task<'a> {
    let top = arr.last().copied().unwrap_or(0) + 1;
    let queries: Vec<u64> = (0..4096).map(|_| rng.random_range(0..=top)).collect();
    Task {
        ops,
        run: Box::new(move || {
            let mut r = 0usize;
            for i in 0..ops {
                r = search(arr, queries[(i + r) & 4095]);
            }
            black_box(r);
        }),
        warm: true,
    }
}

/// A single random cycle through `bytes / 64` cache lines, one `u32` slot
/// per line, so every hop of a chase touches a fresh line.
fn chase_ring(rng: &mut ChaCha8Rng, bytes: usize) -> Result<Vec<u32>> {
    const STRIDE: usize = 16;
    let lines = (bytes / 64).max(2);
    if lines.saturating_mul(STRIDE) > u32::MAX as usize {
        return Err(invalid_arg("pointer-chase footprint too large"));
    }
    let mut order: Vec<u32> = (0..lines as u32).collect();
    // Sattolo's shuffle yields one cycle through every line.
    for i in (1..lines).rev() {
        let j = rng.random_range(0..i);
        order.swap(i, j);
    }
    let mut next = vec![0u32; lines * STRIDE];
    for (i, &o) in order.iter().enumerate() {
        next[i * STRIDE] = o * STRIDE as u32;
    }
    Ok(next)
}

fn sorted_array(rng: &mut ChaCha8Rng, n: usize) -> Vec<u64> {
    let mut k = 0u64;
    (0..n)
        .map(|_| {
            k += rng.random_range(1..64u64);
            k
        })
        .collect()
}

/// Least-squares `(intercept, slope)`.
fn affine_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Runs [`calibrate_with`] `runs` times and keeps the per-constant median.
pub fn calibrate_median_of(runs: usize, cfg: &ProbeConfig) -> Result<CostConstants> {
    let all: Vec<CostConstants> = (0..runs.max(1)).map(|_| calibrate_with(cfg)).collect::<Result<_>>()?;
    let pick = |f: fn(&CostConstants) -> f64| median(&mut all.iter().map(f).collect::<Vec<_>>());
    let mut deltas: Vec<f64> = all.iter().map(|c| c.delta.get() as f64).collect();
    Ok(CostConstants {
        c_miss: pick(|c| c.c_miss),
        c_hit: pick(|c| c.c_hit),
        c_segment: pick(|c| c.c_segment),
        c_linear_fixed: pick(|c| c.c_linear_fixed),
        c_linear_per_element: pick(|c| c.c_linear_per_element),
        delta: SearchThreshold::clamped(median(&mut deltas).round() as usize),
    })
}

/// Fits the height scale `c_h` against real builds: for each size in
/// `sizes`, a random subsample of `keys` is indexed at every
/// `(eps_internal, eps_leaf)` in `candidates x candidates` and the built
/// heights are compared with the estimator's prediction on that subsample.
/// A strided sample would sum neighbouring gaps and flatten the gap
/// distribution.
pub fn fit_height_scale_from_builds(
    keys: &[u64],
    cfg: &CalibrationConfig,
    sizes: &[usize],
    candidates: &[u64],
) -> Result<f64> {
    let mut obs = Vec::new();
    for &size in sizes {
        let sub = random_subsample(keys, size, cfg.seed);
        let est = calibrated_estimator(&sub, EstimatorKind::Adap, cfg)?;
        let shared: std::sync::Arc<[u64]> = sub.into();
        for &el in candidates {
            let leaves = est.estimate_leaf_segments(el)?;
            for &ei in candidates {
                let growth = est.growth(ei);
                if !(growth > 1.0) {
                    continue;
                }
                let index = PgmIndex::build_with(shared.clone(), BuildParams::new(ei, el))?;
                obs.push(HeightObservation {
                    leaves,
                    growth,
                    height: index.height(),
                });
            }
        }
    }
    if obs.is_empty() {
        return Err(Error::NotApplicable("no candidate gives G > 1 on this data".into()));
    }
    Ok(fit_height_scale(&obs))
}

fn random_subsample(keys: &[u64], size: usize, seed: u64) -> Vec<u64> {
    if size >= keys.len() {
        return keys.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, keys.len(), size.max(2)).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| keys[i]).collect()
}

/// Predicted index bytes: estimated leaf segments times bytes per segment.
pub fn space_cost(estimator: &Estimator, eps_leaf: u64, seg_bytes: u64) -> Result<f64> {
    if seg_bytes == 0 {
        return Err(invalid_arg("segment size must be positive"));
    }
    Ok(estimator.estimate_leaf_segments(eps_leaf)? * seg_bytes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub height: usize,
    pub internal_ns: f64,
    pub last_mile_ns: f64,
}

impl CostBreakdown {
    pub fn total_ns(&self) -> f64 {
        self.internal_ns + self.last_mile_ns
    }
}

fn ceil_log2_window(eps: u64) -> f64 {
    ((2 * eps + 1) as f64).log2().ceil()
}

/// Per-level internal search cost `C_S(eps_internal)`.
pub fn search_cost(constants: &CostConstants, eps_internal: u64) -> f64 {
    let window = 2 * eps_internal + 1;
    if window <= constants.delta.get() as u64 {
        constants.c_linear(window)
    } else {
        ceil_log2_window(eps_internal) * constants.c_hit
    }
}

pub fn last_mile_cost(constants: &CostConstants, eps_leaf: u64) -> f64 {
    ceil_log2_window(eps_leaf) * constants.c_miss
}

pub fn time_cost_breakdown(
    constants: &CostConstants,
    estimator: &Estimator,
    eps_internal: u64,
    eps_leaf: u64,
) -> Result<CostBreakdown> {
    if eps_internal == 0 || eps_leaf == 0 {
        return Err(invalid_arg("error bounds must be at least 1"));
    }
    let height = estimator.estimate_height(eps_internal, eps_leaf)?;
    Ok(CostBreakdown {
        height,
        internal_ns: (height - 1) as f64 * (search_cost(constants, eps_internal) + constants.c_segment),
        last_mile_ns: last_mile_cost(constants, eps_leaf),
    })
}

pub fn time_cost(
    constants: &CostConstants,
    estimator: &Estimator,
    eps_internal: u64,
    eps_leaf: u64,
) -> Result<f64> {
    Ok(time_cost_breakdown(constants, estimator, eps_internal, eps_leaf)?.total_ns())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningBudget {
    pub bytes: u64,
}

impl TuningBudget {
    pub fn new(bytes: u64, seg_bytes: u64) -> Result<Self> {
        if bytes < seg_bytes.max(1) {
            return Err(invalid_arg(format!(
                "budget of {bytes} bytes cannot hold a single {seg_bytes}-byte segment"
            )));
        }
        Ok(Self { bytes })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub eps_internal: u64,
    pub eps_leaf: u64,
    pub predicted_cost_ns: f64,
    pub predicted_bytes: f64,
}

/// Smallest leaf error whose predicted index fits the budget:
/// `ceil(sqrt(seg_bytes / B * scale * sum_P N_P sigma_P^2 / mu_P^2))`,
/// clamped to `[4, 4096]`.
pub fn leaf_epsilon_for_budget(
    estimator: &Estimator,
    budget: TuningBudget,
    seg_bytes: u64,
) -> Result<u64> {
    let mass = estimator.scale()? * estimator.hardness_mass();
    let raw = (seg_bytes as f64 / budget.bytes as f64 * mass).sqrt();
    // Shave float noise so exact squares do not round up a step.
    let eps = (raw * (1.0 - 1e-12)).ceil().max(1.0) as u64;
    let eps = eps.clamp(MIN_EPS_LEAF, MAX_EPS_LEAF);
    let needed = space_cost(estimator, eps, seg_bytes)?;
    if eps == MAX_EPS_LEAF && needed > budget.bytes as f64 * (1.0 + 1e-9) {
        return Err(Error::BudgetTooSmall {
            budget: budget.bytes,
            required: needed,
        });
    }
    Ok(eps)
}

/// Cheapest `eps_internal` among `candidates` at a fixed `eps_leaf`, ties to
/// the smaller value. Candidates where the height model does not apply are
/// skipped.
pub fn best_internal_epsilon(
    estimator: &Estimator,
    constants: &CostConstants,
    candidates: &[u64],
    eps_leaf: u64,
) -> Result<(u64, f64)> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(u64, f64)> = None;
    for &ei in &sorted {
        let cost = match time_cost(constants, estimator, ei, eps_leaf) {
            Ok(c) => c,
            Err(Error::NotApplicable(_)) => continue,
            Err(e) => return Err(e),
        };
        if best.is_none_or(|(_, b)| cost < b) {
            best = Some((ei, cost));
        }
    }
    best.ok_or_else(|| {
        Error::NotApplicable("no candidate eps_internal gives G > 1 on this data".into())
    })
}

/// Step 1 sizes `eps_leaf` from the budget; step 2 picks the cheapest
/// `eps_internal` with [`best_internal_epsilon`].
pub fn tune_parameters(
    estimator: &Estimator,
    budget: TuningBudget,
    constants: &CostConstants,
    candidates: &[u64],
    seg_bytes: u64,
) -> Result<TuningResult> {
    let eps_leaf = leaf_epsilon_for_budget(estimator, budget, seg_bytes)?;
    let (eps_internal, predicted_cost_ns) =
        best_internal_epsilon(estimator, constants, candidates, eps_leaf)?;
    Ok(TuningResult {
        eps_internal,
        eps_leaf,
        predicted_cost_ns,
        predicted_bytes: space_cost(estimator, eps_leaf, seg_bytes)?,
    })
}
