use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use pgmpp::cost::{self, ProbeConfig, CANDIDATES};
use pgmpp::harness::{self, Strategy, SweepSpec};
use pgmpp::index::DEFAULT_SEGMENT_BYTES;
use pgmpp::oracle::measure_coverage;
use pgmpp::search::{branchless_lower_bound, branchy_lower_bound, linear_lower_bound, SearchThreshold};
use pgmpp::stats::{calibrated_estimator, fit_calibration_scale};
use pgmpp::timing::median_per_op;
use pgmpp::{
    data, fit_keys, generate_synthetic, generate_workload, read_keyset, write_keyset, BuildParams,
    CalibrationConfig, CostConstants, Distribution, Estimator, EstimatorKind, PgmIndex, TuningBudget,
    WorkloadKind,
};

const CALIBRATION_ENV: &str = "PGMPP_CALIBRATION";

#[derive(Parser)]
#[command(name = "pgmpp", version, about = "Two-parameter PGM learned index toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic key file.
    Gen(GenArgs),
    /// Sort and deduplicate a raw key file.
    Ingest(IngestArgs),
    /// Measure the cost-model constants of this host.
    Calibrate(CalibrateArgs),
    /// Build an index and write it next to its key file.
    Build(BuildArgs),
    /// Look up keys in an index.
    Lookup(LookupArgs),
    /// Time every (eps_internal, eps_leaf) cell of a grid.
    Sweep(SweepArgs),
    /// Estimate leaf-segment counts from gap statistics.
    Estimate(EstimateArgs),
    /// Pick (eps_internal, eps_leaf) for a storage budget.
    Tune(TuneArgs),
    /// Per-level segment coverage of a built index.
    Coverage(CoverageArgs),
    /// Time linear, branchless and branchy search on in-cache windows.
    SearchBench(SearchBenchArgs),
    /// Convert a JSON report into CSV or re-emit it as JSON.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Uniform,
    Normal,
    Lognormal,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    distribution: DistArg,
    #[arg(long)]
    n: usize,
    /// Inclusive lower end for uniform keys.
    #[arg(long, default_value_t = 0)]
    lo: u64,
    /// Exclusive upper end for uniform keys.
    #[arg(long, default_value_t = 1 << 48)]
    hi: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrationPath {
    /// Cost-constant file; defaults to $PGMPP_CALIBRATION.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

impl CalibrationPath {
    fn path(&self) -> Option<PathBuf> {
        self.calibration
            .clone()
            .or_else(|| std::env::var_os(CALIBRATION_ENV).map(PathBuf::from))
    }

    /// Loads the constants file, calibrating (and caching) when it is absent.
    fn load_or_calibrate(&self) -> Result<CostConstants> {
        match self.path() {
            Some(p) if p.exists() => {
                CostConstants::load(&p).with_context(|| format!("reading {}", p.display()))
            }
            Some(p) => {
                eprintln!("calibrating; caching constants in {}", p.display());
                let c = cost::calibrate_constants()?;
                c.save(&p)?;
                Ok(c)
            }
            None => {
                eprintln!("no calibration file given; calibrating");
                Ok(cost::calibrate_constants()?)
            }
        }
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    target: CalibrationPath,
    /// Small probes for a fast smoke run.
    #[arg(long)]
    quick: bool,
    /// Calibrate this many times and keep per-constant medians.
    #[arg(long, default_value_t = 1)]
    runs: usize,
}

#[derive(Args)]
struct Epsilons {
    #[arg(long, default_value_t = 16)]
    epsilon_internal: u64,
    #[arg(long, default_value_t = 16)]
    epsilon_leaf: u64,
    #[arg(long, default_value_t = SearchThreshold::default().get())]
    delta: usize,
}

impl Epsilons {
    fn params(&self) -> Result<BuildParams> {
        Ok(BuildParams::new(self.epsilon_internal, self.epsilon_leaf)
            .with_delta(SearchThreshold::new(self.delta)?))
    }
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    keys: PathBuf,
    #[command(flatten)]
    eps: Epsilons,
    /// Index file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LookupArgs {
    #[arg(long)]
    keys: PathBuf,
    /// Prebuilt index; built from the epsilon flags when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    #[command(flatten)]
    eps: Epsilons,
    /// Keys to look up.
    #[arg(long = "query", num_args = 1..)]
    queries: Vec<u64>,
    /// Workload file in the key-file format.
    #[arg(long)]
    queries_file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkloadArg {
    Uniform,
    Zipf,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum StrategyArg {
    Hybrid,
    Branchy,
    Both,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    keys: PathBuf,
    /// Comma-separated error bounds used for both axes.
    #[arg(long, value_delimiter = ',', default_values_t = CANDIDATES)]
    grid: Vec<u64>,
    #[arg(long, value_enum, default_value = "uniform")]
    workload: WorkloadArg,
    #[arg(long, default_value_t = data::DEFAULT_WORKLOAD_SIZE)]
    workload_size: usize,
    #[arg(long, default_value_t = data::DEFAULT_ZIPF_ALPHA)]
    zipf_alpha: f64,
    #[arg(long, default_value_t = harness::DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "both")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = SearchThreshold::default().get())]
    delta: usize,
    #[command(flatten)]
    calibration: CalibrationPath,
    /// Echo host constants into the report (calibrating if needed).
    #[arg(long)]
    with_constants: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Simple,
    Clip,
    Adap,
    All,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    estimator: EstimatorArg,
    #[arg(long = "epsilon-leaf", value_delimiter = ',', default_values_t = CANDIDATES)]
    epsilon_leaf: Vec<u64>,
    /// Fit the true segment counts as well.
    #[arg(long)]
    verify: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long)]
    budget_bytes: u64,
    #[command(flatten)]
    calibration: CalibrationPath,
    /// Fit the height scale against builds at two sample sizes.
    #[arg(long)]
    fit_height: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct CoverageArgs {
    #[arg(long)]
    keys: PathBuf,
    #[command(flatten)]
    eps: Epsilons,
}

#[derive(Args)]
struct SearchBenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64, 128, 256, 512, 1024])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = harness::DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 1 << 16)]
    queries: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report written by `sweep --json`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Ingest(a) => ingest(a),
        Cmd::Calibrate(a) => calibrate(a),
        Cmd::Build(a) => build(a),
        Cmd::Lookup(a) => lookup(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Estimate(a) => estimate(a),
        Cmd::Tune(a) => tune(a),
        Cmd::Coverage(a) => coverage(a),
        Cmd::SearchBench(a) => search_bench(a),
        Cmd::Report(a) => report(a),
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_keys(path: &Path) -> Result<Arc<[u64]>> {
    let ing = read_keyset(path).with_context(|| format!("reading {}", path.display()))?;
    if ing.duplicates_removed > 0 {
        eprintln!("{}: dropped {} duplicate keys", path.display(), ing.duplicates_removed);
    }
    Ok(ing.keyset.keys.into())
}

fn gen(a: GenArgs) -> Result<()> {
    let d = match a.distribution {
        DistArg::Uniform => Distribution::uniform(a.lo, a.hi),
        DistArg::Normal => Distribution::normal(),
        DistArg::Lognormal => Distribution::lognormal(),
    };
    let ks = generate_synthetic(d, a.n, a.seed)?;
    write_keyset(&a.out, &ks.keys)?;
    eprintln!("wrote {} {} keys to {}", ks.len(), d.name(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let ing = read_keyset(&a.input)?;
    write_keyset(&a.out, &ing.keyset.keys)?;
    print_json(&serde_json::json!({
        "keys": ing.keyset.len(),
        "duplicates_removed": ing.duplicates_removed,
    }))
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg = if a.quick { ProbeConfig::quick() } else { ProbeConfig::default() };
    let c = cost::calibrate_median_of(a.runs, &cfg)?;
    match a.target.path() {
        Some(p) => {
            c.save(&p)?;
            eprintln!("saved to {}", p.display());
        }
        None => print!("{c}"),
    }
    Ok(())
}

fn index_path(keys: &Path) -> PathBuf {
    let mut p = keys.as_os_str().to_owned();
    p.push(".pgm");
    PathBuf::from(p)
}

fn build(a: BuildArgs) -> Result<()> {
    let keys = load_keys(&a.keys)?;
    let t = Instant::now();
    let idx = PgmIndex::build_with(keys, a.eps.params()?)?;
    let build_ms = t.elapsed().as_secs_f64() * 1e3;
    let out = a.out.unwrap_or_else(|| index_path(&a.keys));
    std::fs::write(&out, idx.to_bytes())?;
    print_json(&serde_json::json!({
        "index": out,
        "build_ms": build_ms,
        "stats": idx.stats(),
        "entry_level": idx.entry_level(),
    }))
}

fn lookup(a: LookupArgs) -> Result<()> {
    let keys = load_keys(&a.keys)?;
    let idx = match &a.index {
        Some(p) => PgmIndex::from_bytes(&std::fs::read(p)?, keys)?,
        None => PgmIndex::build_with(keys, a.eps.params()?)?,
    };
    let mut queries = a.queries;
    if let Some(p) = &a.queries_file {
        queries.extend(data::read_raw(p)?);
    }
    if queries.is_empty() {
        bail!("give --query or --queries-file");
    }
    let out = std::io::stdout();
    let mut w = BufWriter::new(out.lock());
    for q in queries {
        writeln!(w, "{q}\t{}", idx.lookup(q))?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let keys = load_keys(&a.keys)?;
    let kind = match a.workload {
        WorkloadArg::Uniform => WorkloadKind::Uniform,
        WorkloadArg::Zipf => WorkloadKind::Zipf { alpha: a.zipf_alpha },
    };
    let queries = generate_workload(&keys, kind, a.workload_size, a.seed)?.queries;
    let constants = if a.with_constants {
        Some(a.calibration.load_or_calibrate()?)
    } else {
        a.calibration
            .path()
            .filter(|p| p.exists())
            .map(|p| CostConstants::load(&p))
            .transpose()?
    };
    let spec = SweepSpec {
        dataset: a.keys.display().to_string(),
        seed: a.seed,
        workload: match a.workload {
            WorkloadArg::Uniform => "uniform".into(),
            WorkloadArg::Zipf => format!("zipf({})", a.zipf_alpha),
        },
        reps: a.reps,
        delta: SearchThreshold::new(a.delta)?,
        constants,
    };
    let strategies: &[Strategy] = match a.strategy {
        StrategyArg::Hybrid => &[Strategy::Hybrid],
        StrategyArg::Branchy => &[Strategy::Branchy],
        StrategyArg::Both => &[Strategy::Hybrid, Strategy::Branchy],
    };
    let reports = harness::sweep(&keys, &a.grid, &a.grid, strategies, &queries, &spec)?;
    if let Some(p) = &a.csv {
        harness::write_csv(&reports, BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.json {
        harness::write_json(&reports, BufWriter::new(File::create(p)?))?;
    }
    if a.csv.is_none() && a.json.is_none() {
        harness::write_csv(&reports, std::io::stdout().lock())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateRow {
    estimator: &'static str,
    eps_leaf: u64,
    estimate: f64,
    actual: Option<usize>,
    rel_error: Option<f64>,
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let keys = load_keys(&a.keys)?;
    let cfg = CalibrationConfig {
        seed: a.seed,
        ..CalibrationConfig::default()
    };
    let scale = fit_calibration_scale(&keys, &cfg)?;
    let kinds: Vec<EstimatorKind> = match a.estimator {
        EstimatorArg::Simple => vec![EstimatorKind::Simple],
        EstimatorArg::Clip => vec![EstimatorKind::Clip],
        EstimatorArg::Adap => vec![EstimatorKind::Adap],
        EstimatorArg::All => EstimatorKind::ALL.to_vec(),
    };
    let actual: Vec<Option<usize>> = a
        .epsilon_leaf
        .iter()
        .map(|&e| a.verify.then(|| fit_keys(&keys, e).map(|m| m.len())).transpose())
        .collect::<pgmpp::Result<_>>()?;
    let mut rows = Vec::new();
    for kind in kinds {
        let est = Estimator::new(&keys, kind)?.with_scale(scale)?;
        for (&e, &act) in a.epsilon_leaf.iter().zip(&actual) {
            let estimate = est.estimate_leaf_segments(e)?;
            rows.push(EstimateRow {
                estimator: kind.name(),
                eps_leaf: e,
                estimate,
                actual: act,
                rel_error: act.map(|t| (estimate - t as f64) / t as f64),
            });
        }
    }
    print_json(&serde_json::json!({ "calibration_scale": scale, "rows": rows }))
}

fn tune(a: TuneArgs) -> Result<()> {
    let keys = load_keys(&a.keys)?;
    let constants = a.calibration.load_or_calibrate()?;
    let cfg = CalibrationConfig {
        seed: a.seed,
        ..CalibrationConfig::default()
    };
    let mut est = calibrated_estimator(&keys, EstimatorKind::Adap, &cfg)?;
    if a.fit_height {
        let c_h = cost::fit_height_scale_from_builds(&keys, &cfg, &[100_000, 1_000_000], &CANDIDATES)?;
        est = est.with_height_scale(c_h)?;
    }
    let budget = TuningBudget::new(a.budget_bytes, DEFAULT_SEGMENT_BYTES)?;
    let t = Instant::now();
    let r = cost::tune_parameters(&est, budget, &constants, &CANDIDATES, DEFAULT_SEGMENT_BYTES)?;
    let tune_us = t.elapsed().as_secs_f64() * 1e6;
    print_json(&serde_json::json!({
        "result": r,
        "tune_us": tune_us,
        "height_scale": est.height_scale,
        "constants": constants,
    }))
}

fn coverage(a: CoverageArgs) -> Result<()> {
    let keys = load_keys(&a.keys)?;
    let idx = PgmIndex::build_with(keys, a.eps.params()?)?;
    print_json(&measure_coverage(&idx))
}

fn search_bench(a: SearchBenchArgs) -> Result<()> {
    let mut rng = StdRng::seed_from_u64(a.seed);
    println!("len\tlinear_ns\tbranchless_ns\tbranchy_ns");
    for &len in &a.lengths {
        if len == 0 {
            bail!("window length must be positive");
        }
        let mut w: Vec<u64> = (0..len).map(|_| rng.random_range(0..1u64 << 40)).collect();
        w.sort_unstable();
        let qs: Vec<u64> = (0..a.queries).map(|_| rng.random_range(0..1u64 << 40)).collect();
        let time = |f: fn(&[u64], u64) -> usize| {
            median_per_op(a.reps, qs.len(), || {
                let acc = qs
                    .iter()
                    .fold(0usize, |s, &q| s.wrapping_add(f(std::hint::black_box(&w), q)));
                std::hint::black_box(acc);
            })
        };
        println!(
            "{len}\t{:.2}\t{:.2}\t{:.2}",
            time(linear_lower_bound),
            time(branchless_lower_bound),
            time(branchy_lower_bound)
        );
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let reports = harness::read_json(BufReader::new(File::open(&a.input)?))?;
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    match a.format {
        FormatArg::Csv => harness::write_csv(&reports, sink)?,
        FormatArg::Json => harness::write_json(&reports, sink)?,
    }
    Ok(())
}
