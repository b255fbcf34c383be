//! Timed lookups, grid sweeps and report serialization.

use std::hint::black_box;
use std::io::{Read, Write};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::CostConstants;
use crate::error::{invalid_arg, Error, Result};
use crate::index::{BuildParams, PgmIndex};
use crate::search::SearchThreshold;
use crate::timing::{median, percentile};

pub const DEFAULT_REPS: usize = 9;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Layer skipping plus hybrid linear/branchless search.
    Hybrid,
    /// Root-to-leaf traversal with branchy binary search everywhere.
    Branchy,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Hybrid => "hybrid",
            Self::Branchy => "branchy",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Self::Hybrid),
            "branchy" => Ok(Self::Branchy),
            _ => Err(invalid_arg(format!("unknown strategy {s:?}"))),
        }
    }
}

#[inline]
fn lookup(index: &PgmIndex, strategy: Strategy, q: u64) -> usize {
    match strategy {
        Strategy::Hybrid => index.lookup(q),
        Strategy::Branchy => index.lookup_branchy(q),
    }
}

fn pass(index: &PgmIndex, strategy: Strategy, queries: &[u64]) -> usize {
    let mut acc = 0usize;
    for &q in queries {
        acc = acc.wrapping_add(lookup(index, strategy, q));
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupTiming {
    /// Median over repetitions of the per-pass mean.
    pub mean_ns: f64,
    /// Per-query latency distribution from an individually timed pass.
    pub median_ns: f64,
    pub p99_ns: f64,
}

pub fn time_lookups(index: &PgmIndex, queries: &[u64], reps: usize) -> LookupTiming {
    time_lookups_with(index, Strategy::Hybrid, queries, reps)
}

pub fn time_lookups_with(
    index: &PgmIndex,
    strategy: Strategy,
    queries: &[u64],
    reps: usize,
) -> LookupTiming {
    assert!(!queries.is_empty(), "empty workload");
    black_box(pass(index, strategy, queries));
    let mut means: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            black_box(pass(index, strategy, queries));
            t.elapsed().as_nanos() as f64 / queries.len() as f64
        })
        .collect();
    let overhead = clock_overhead_ns();
    let mut each: Vec<f64> = queries
        .iter()
        .map(|&q| {
            let t = Instant::now();
            black_box(lookup(index, strategy, q));
            (t.elapsed().as_nanos() as f64 - overhead).max(0.0)
        })
        .collect();
    LookupTiming {
        mean_ns: median(&mut means),
        median_ns: median(&mut each),
        p99_ns: percentile(&mut each, 0.99),
    }
}

/// Which queries each timed pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PassMode {
    /// Every pass replays the whole query list, so after the warm-up the
    /// touched lines are cache-resident.
    Repeat,
    /// Every pass (warm-up included) takes the next `n` queries of the list,
    /// wrapping around, so timed passes mostly meet cold lines.
    Fresh(usize),
}

/// Mean ns per lookup for each index, timed round-robin so slow drifts of
/// the host hit every index alike: each repetition runs one warm-up and one
/// timed pass per index, starting at a rotating offset. Returns the median
/// over repetitions.
pub fn time_round_robin(
    indexes: &[&PgmIndex],
    strategy: Strategy,
    queries: &[u64],
    reps: usize,
    mode: PassMode,
) -> Vec<f64> {
    assert!(!queries.is_empty(), "empty workload");
    let per_pass = match mode {
        PassMode::Repeat => queries.len(),
        PassMode::Fresh(n) => n.clamp(1, queries.len()),
    };
    let chunks = queries.len() / per_pass;
    let mut next = 0usize;
    let mut take = || {
        let c = &queries[(next % chunks) * per_pass..][..per_pass];
        next += 1;
        c
    };
    let k = indexes.len();
    let mut samples = vec![Vec::with_capacity(reps.max(1)); k];
    for r in 0..reps.max(1) {
        for j in 0..k {
            let i = (j + r) % k;
            black_box(pass(indexes[i], strategy, take()));
            let qs = take();
            let t = Instant::now();
            black_box(pass(indexes[i], strategy, qs));
            samples[i].push(t.elapsed().as_nanos() as f64 / qs.len() as f64);
        }
    }
    samples.iter_mut().map(|s| median(s)).collect()
}

fn clock_overhead_ns() -> f64 {
    let mut s: Vec<f64> = (0..1001)
        .map(|_| {
            let t = Instant::now();
            t.elapsed().as_nanos() as f64
        })
        .collect();
    median(&mut s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSplit {
    pub internal_ns: f64,
    pub last_mile_ns: f64,
}

/// Times the internal traversal and the last-mile search separately on every
/// tenth query.
pub fn phase_split(index: &PgmIndex, strategy: Strategy, queries: &[u64], reps: usize) -> PhaseSplit {
    let sub: Vec<u64> = queries.iter().step_by(10).copied().collect();
    let internal = |q| match strategy {
        Strategy::Hybrid => index.leaf_segment(q),
        Strategy::Branchy => index.leaf_segment_branchy(q),
    };
    let leaves: Vec<usize> = sub.iter().map(|&q| internal(q)).collect();
    let time = |f: &dyn Fn() -> usize| {
        black_box(f());
        let mut s: Vec<f64> = (0..reps.max(1))
            .map(|_| {
                let t = Instant::now();
                black_box(f());
                t.elapsed().as_nanos() as f64 / sub.len() as f64
            })
            .collect();
        median(&mut s)
    };
    let internal_ns = time(&|| sub.iter().fold(0usize, |a, &q| a.wrapping_add(internal(q))));
    let last_mile_ns = time(&|| {
        sub.iter().zip(&leaves).fold(0usize, |a, (&q, &leaf)| {
            a.wrapping_add(match strategy {
                Strategy::Hybrid => index.last_mile(q, leaf),
                Strategy::Branchy => index.last_mile_branchy(q, leaf),
            })
        })
    });
    PhaseSplit {
        internal_ns,
        last_mile_ns,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub n: usize,
    pub eps_internal: u64,
    pub eps_leaf: u64,
    pub delta: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub workload: String,
    pub reps: usize,
    pub constants: Option<CostConstants>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mean_ns: f64,
    pub median_ns: f64,
    pub p99_ns: f64,
    pub build_ms: f64,
    pub height: usize,
    pub leaf_segments: usize,
    pub internal_segments: usize,
    pub size_bytes: u64,
    pub internal_ns: f64,
    pub last_mile_ns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub metrics: RunMetrics,
}

/// What stays fixed across the cells of a sweep.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub dataset: String,
    pub seed: u64,
    pub workload: String,
    pub reps: usize,
    pub delta: SearchThreshold,
    pub constants: Option<CostConstants>,
}

pub fn run_cell(
    keys: &Arc<[u64]>,
    eps_internal: u64,
    eps_leaf: u64,
    strategy: Strategy,
    queries: &[u64],
    spec: &SweepSpec,
) -> Result<RunReport> {
    let t = Instant::now();
    let params = BuildParams::new(eps_internal, eps_leaf).with_delta(spec.delta);
    let index = PgmIndex::build_with(Arc::clone(keys), params)?;
    let build_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(measure_index(&index, strategy, queries, spec, build_ms))
}

pub fn measure_index(
    index: &PgmIndex,
    strategy: Strategy,
    queries: &[u64],
    spec: &SweepSpec,
    build_ms: f64,
) -> RunReport {
    let timing = time_lookups_with(index, strategy, queries, spec.reps);
    let split = phase_split(index, strategy, queries, spec.reps);
    let stats = index.stats();
    RunReport {
        config: RunConfig {
            dataset: spec.dataset.clone(),
            n: index.key_count(),
            eps_internal: index.eps_internal(),
            eps_leaf: index.eps_leaf(),
            delta: index.delta().get(),
            seed: spec.seed,
            strategy,
            workload: spec.workload.clone(),
            reps: spec.reps,
            constants: spec.constants,
        },
        metrics: RunMetrics {
            mean_ns: timing.mean_ns,
            median_ns: timing.median_ns,
            p99_ns: timing.p99_ns,
            build_ms,
            height: stats.height,
            leaf_segments: stats.leaf_segments,
            internal_segments: stats.internal_segments,
            size_bytes: stats.size_bytes,
            internal_ns: split.internal_ns,
            last_mile_ns: split.last_mile_ns,
        },
    }
}

/// One report per `(eps_internal, eps_leaf, strategy)`, eps_leaf outermost.
pub fn sweep(
    keys: &Arc<[u64]>,
    eps_internal: &[u64],
    eps_leaf: &[u64],
    strategies: &[Strategy],
    queries: &[u64],
    spec: &SweepSpec,
) -> Result<Vec<RunReport>> {
    check_memory(keys.len())?;
    let mut out = Vec::with_capacity(eps_internal.len() * eps_leaf.len() * strategies.len());
    for &el in eps_leaf {
        for &ei in eps_internal {
            let params = BuildParams::new(ei, el).with_delta(spec.delta);
            let t = Instant::now();
            let index = PgmIndex::build_with(Arc::clone(keys), params)?;
            let build_ms = t.elapsed().as_secs_f64() * 1e3;
            for &s in strategies {
                out.push(measure_index(&index, s, queries, spec, build_ms));
            }
        }
    }
    Ok(out)
}

/// Bytes a build over `n` keys may touch: the keys, one transient copy and
/// a worst-case index of one segment per key.
pub fn memory_estimate(n: usize) -> u64 {
    n as u64 * (8 + 8 + 24 + 8)
}

pub fn check_memory(n: usize) -> Result<()> {
    let need = memory_estimate(n);
    if let Some(avail) = available_memory() {
        if need > avail {
            return Err(Error::Refused(format!(
                "{n} keys need up to {:.1} GiB but only {:.1} GiB is available",
                need as f64 / (1u64 << 30) as f64,
                avail as f64 / (1u64 << 30) as f64
            )));
        }
    }
    Ok(())
}

fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Flat CSV row; column order is part of the report format.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CsvRow {
    dataset: String,
    n: usize,
    eps_internal: u64,
    eps_leaf: u64,
    delta: usize,
    seed: u64,
    strategy: Strategy,
    workload: String,
    reps: usize,
    c_miss: Option<f64>,
    c_hit: Option<f64>,
    c_segment: Option<f64>,
    c_linear_fixed: Option<f64>,
    c_linear_per_element: Option<f64>,
    mean_ns: f64,
    median_ns: f64,
    p99_ns: f64,
    build_ms: f64,
    height: usize,
    leaf_segments: usize,
    internal_segments: usize,
    size_bytes: u64,
    internal_ns: f64,
    last_mile_ns: f64,
}

pub const CSV_COLUMNS: [&str; 24] = [
    "dataset",
    "n",
    "eps_internal",
    "eps_leaf",
    "delta",
    "seed",
    "strategy",
    "workload",
    "reps",
    "c_miss",
    "c_hit",
    "c_segment",
    "c_linear_fixed",
    "c_linear_per_element",
    "mean_ns",
    "median_ns",
    "p99_ns",
    "build_ms",
    "height",
    "leaf_segments",
    "internal_segments",
    "size_bytes",
    "internal_ns",
    "last_mile_ns",
];

impl From<&RunReport> for CsvRow {
    fn from(r: &RunReport) -> Self {
        let c = &r.config;
        let m = &r.metrics;
        Self {
            dataset: c.dataset.clone(),
            n: c.n,
            eps_internal: c.eps_internal,
            eps_leaf: c.eps_leaf,
            delta: c.delta,
            seed: c.seed,
            strategy: c.strategy,
            workload: c.workload.clone(),
            reps: c.reps,
            c_miss: c.constants.map(|k| k.c_miss),
            c_hit: c.constants.map(|k| k.c_hit),
            c_segment: c.constants.map(|k| k.c_segment),
            c_linear_fixed: c.constants.map(|k| k.c_linear_fixed),
            c_linear_per_element: c.constants.map(|k| k.c_linear_per_element),
            mean_ns: m.mean_ns,
            median_ns: m.median_ns,
            p99_ns: m.p99_ns,
            build_ms: m.build_ms,
            height: m.height,
            leaf_segments: m.leaf_segments,
            internal_segments: m.internal_segments,
            size_bytes: m.size_bytes,
            internal_ns: m.internal_ns,
            last_mile_ns: m.last_mile_ns,
        }
    }
}

pub fn write_csv(reports: &[RunReport], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in reports {
        w.serialize(CsvRow::from(r)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonEnvelope {
    schema_version: u32,
    reports: Vec<RunReport>,
}

pub fn write_json(reports: &[RunReport], out: impl Write) -> Result<()> {
    let env = JsonEnvelope {
        schema_version: REPORT_SCHEMA_VERSION,
        reports: reports.to_vec(),
    };
    serde_json::to_writer_pretty(out, &env).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_json(input: impl Read) -> Result<Vec<RunReport>> {
    let env: JsonEnvelope = serde_json::from_reader(input).map_err(|e| Error::Format(e.to_string()))?;
    if env.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "report schema version {} is not {REPORT_SCHEMA_VERSION}",
            env.schema_version
        )));
    }
    Ok(env.reports)
}
