//! Synthetic key generation, SOSD-style key files and query workloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

pub const DEFAULT_WORKLOAD_SIZE: usize = 5_000;
pub const DEFAULT_ZIPF_ALPHA: f64 = 1.3;

/// Upper end of the integer range real-valued draws are mapped into.
const REAL_RANGE_TOP: f64 = 9_223_372_036_854_775_807.0; // 2^63 - 1

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    /// Integers drawn uniformly from `[lo, hi)`.
    Uniform { lo: u64, hi: u64 },
    Normal { mu: f64, sd: f64 },
    LogNormal { mu: f64, sd: f64 },
}

impl Distribution {
    pub fn uniform(lo: u64, hi: u64) -> Self {
        Self::Uniform { lo, hi }
    }

    pub fn normal() -> Self {
        Self::Normal { mu: 0.0, sd: 1.0 }
    }

    pub fn lognormal() -> Self {
        Self::LogNormal { mu: 0.0, sd: 2.0 }
    }

    pub fn name(&self) -> String {
        match *self {
            Self::Uniform { lo, hi } => format!("uniform[{lo},{hi})"),
            Self::Normal { mu, sd } => format!("normal({mu},{sd})"),
            Self::LogNormal { mu, sd } => format!("lognormal({mu},{sd})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KeySource {
    Synthetic { distribution: Distribution, seed: u64 },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeySet {
    /// Strictly increasing.
    pub keys: Vec<u64>,
    pub source: KeySource,
}

impl KeySet {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// `n` distinct sorted keys, deterministic per `(distribution, n, seed)`.
pub fn generate_synthetic(distribution: Distribution, n: usize, seed: u64) -> Result<KeySet> {
    if n < 2 {
        return Err(invalid_arg("need at least 2 keys"));
    }
    if let Distribution::Normal { mu, sd } | Distribution::LogNormal { mu, sd } = distribution {
        if !(mu.is_finite() && sd.is_finite() && sd > 0.0) {
            return Err(invalid_arg(format!("need finite mu and sd > 0, got ({mu}, {sd})")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = match distribution {
        Distribution::Uniform { lo, hi } => {
            if hi <= lo {
                return Err(invalid_arg("uniform range needs hi > lo"));
            }
            let span = hi - lo;
            if span < n as u64 {
                return Err(invalid_arg(format!(
                    "range of {span} values cannot hold {n} distinct keys"
                )));
            }
            if span / 4 < n as u64 {
                // Dense: rejection would crawl, sample indices without replacement.
                let mut k: Vec<u64> = sample(&mut rng, span as usize, n)
                    .into_iter()
                    .map(|i| lo + i as u64)
                    .collect();
                k.sort_unstable();
                k
            } else {
                draw_distinct(n, || rng.random_range(lo..hi))
            }
        }
        Distribution::Normal { mu, sd } => {
            let d = Normal::new(mu, sd).map_err(|e| invalid_arg(format!("normal: {e}")))?;
            real_keys(n, &mut rng, |r| d.sample(r))?
        }
        Distribution::LogNormal { mu, sd } => {
            let d = LogNormal::new(mu, sd).map_err(|e| invalid_arg(format!("lognormal: {e}")))?;
            real_keys(n, &mut rng, |r| d.sample(r))?
        }
    };
    Ok(KeySet {
        keys,
        source: KeySource::Synthetic { distribution, seed },
    })
}

/// Draws until `n` distinct values exist, topping up only the deficit.
fn draw_distinct(n: usize, mut draw: impl FnMut() -> u64) -> Vec<u64> {
    let mut keys: Vec<u64> = Vec::with_capacity(n);
    while keys.len() < n {
        let deficit = n - keys.len();
        keys.extend((0..deficit).map(|_| draw()));
        keys.sort_unstable();
        keys.dedup();
    }
    keys
}

/// Real draws mapped affinely from the first batch's `[min, max]` onto
/// `[0, 2^63)`; later top-up draws outside that span are redrawn.
fn real_keys(
    n: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<Vec<u64>> {
    let first: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let (lo, hi) = first
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(hi > lo && lo.is_finite() && hi.is_finite()) {
        return Err(invalid_arg("degenerate real-valued draws"));
    }
    let scale = REAL_RANGE_TOP / (hi - lo);
    let map = |x: f64| ((x - lo) * scale) as u64;
    let mut pending = first.into_iter();
    Ok(draw_distinct(n, || {
        if let Some(x) = pending.next() {
            return map(x);
        }
        loop {
            let x = draw(rng);
            if (lo..=hi).contains(&x) {
                return map(x);
            }
        }
    }))
}

/// Reads the raw `u64` payload of a key/workload file without reordering.
pub fn read_raw(path: &Path) -> Result<Vec<u64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 8];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format(format!("{}: missing count header", path.display())))?;
    let count = u64::from_le_bytes(head);
    let actual = std::fs::metadata(path)?.len().saturating_sub(8);
    if count.checked_mul(8) != Some(actual) {
        return Err(Error::Format(format!(
            "{}: header declares {count} keys but payload holds {actual} bytes",
            path.display()
        )));
    }
    let mut bytes = vec![0u8; actual as usize];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("{}: truncated payload", path.display())))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_raw(path: &Path, values: &[u64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub keyset: KeySet,
    pub duplicates_removed: usize,
}

/// Reads a key file, sorting and deduplicating its contents.
pub fn read_keyset(path: &Path) -> Result<Ingested> {
    let mut keys = read_raw(path)?;
    let before = keys.len();
    keys.sort_unstable();
    keys.dedup();
    Ok(Ingested {
        duplicates_removed: before - keys.len(),
        keyset: KeySet {
            keys,
            source: KeySource::File(path.to_path_buf()),
        },
    })
}

pub fn write_keyset(path: &Path, keys: &[u64]) -> Result<()> {
    write_raw(path, keys)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WorkloadKind {
    Uniform,
    /// Rank `i` (1 = smallest key) drawn with probability proportional to `i^-alpha`.
    Zipf { alpha: f64 },
}

impl WorkloadKind {
    pub fn zipf() -> Self {
        Self::Zipf {
            alpha: DEFAULT_ZIPF_ALPHA,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Workload {
    pub queries: Vec<u64>,
    pub kind: WorkloadKind,
}

pub fn generate_workload(keys: &[u64], kind: WorkloadKind, s: usize, seed: u64) -> Result<Workload> {
    if keys.is_empty() {
        return Err(invalid_arg("cannot sample queries from an empty key set"));
    }
    if s == 0 {
        return Err(invalid_arg("workload size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = match kind {
        WorkloadKind::Uniform => (0..s).map(|_| keys[rng.random_range(0..keys.len())]).collect(),
        WorkloadKind::Zipf { alpha } => {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(invalid_arg("zipf exponent must be positive"));
            }
            let cdf = zipf_cdf(keys.len(), alpha);
            let total = *cdf.last().unwrap();
            (0..s)
                .map(|_| {
                    let u = rng.random::<f64>() * total;
                    let i = cdf.partition_point(|&c| c <= u).min(keys.len() - 1);
                    keys[i]
                })
                .collect()
        }
    };
    Ok(Workload { queries, kind })
}

/// Unnormalised cumulative weights: `cdf[i] = sum_{j <= i+1} j^-alpha`.
pub fn zipf_cdf(n: usize, alpha: f64) -> Vec<f64> {
    let mut acc = 0.0;
    (1..=n)
        .map(|i| {
            acc += (i as f64).powf(-alpha);
            acc
        })
        .collect()
}

/// Probability mass on ranks `1..=k` out of `n` under `i^-alpha`.
pub fn zipf_head_mass(n: usize, k: usize, alpha: f64) -> f64 {
    let cdf = zipf_cdf(n, alpha);
    cdf[k.min(n) - 1] / cdf[n - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::hardness_ratio;

    #[test]
    fn synthetic_is_sorted_distinct_deterministic() {
        for d in [Distribution::uniform(0, 1 << 40), Distribution::normal(), Distribution::lognormal()] {
            let a = generate_synthetic(d, 100_000, 7).unwrap();
            assert_eq!(a.len(), 100_000);
            assert!(a.keys.windows(2).all(|w| w[0] < w[1]), "{}", d.name());
            let b = generate_synthetic(d, 100_000, 7).unwrap();
            assert_eq!(a, b);
            let c = generate_synthetic(d, 100_000, 8).unwrap();
            assert_ne!(a.keys, c.keys);
        }
    }

    #[test]
    fn dense_uniform_fills_range() {
        let k = generate_synthetic(Distribution::uniform(10, 110), 100, 1).unwrap();
        assert_eq!(k.keys, (10..110).collect::<Vec<_>>());
        assert!(generate_synthetic(Distribution::uniform(0, 99), 100, 1).is_err());
        assert!(generate_synthetic(Distribution::uniform(5, 5), 2, 1).is_err());
        assert!(generate_synthetic(Distribution::Normal { mu: 0.0, sd: -1.0 }, 10, 1).is_err());
        assert!(generate_synthetic(Distribution::uniform(0, 10), 1, 1).is_err());
    }

    #[test]
    fn uniform_gap_ratio_near_one() {
        let k = generate_synthetic(Distribution::uniform(0, 100_000_000), 1_000_000, 3).unwrap();
        let h = hardness_ratio(&k.keys, false).unwrap();
        assert!((0.9..=1.1).contains(&h), "{h}");
    }

    #[test]
    fn file_round_trip_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.bin");
        let keys = vec![3u64, 9, 27, u64::MAX];
        write_keyset(&p, &keys).unwrap();
        let back = read_keyset(&p).unwrap();
        assert_eq!(back.keyset.keys, keys);
        assert_eq!(back.duplicates_removed, 0);

        write_raw(&p, &[5, 1, 5, 3, 1]).unwrap();
        let back = read_keyset(&p).unwrap();
        assert_eq!(back.keyset.keys, vec![1, 3, 5]);
        assert_eq!(back.duplicates_removed, 2);
        assert_eq!(read_raw(&p).unwrap(), vec![5, 1, 5, 3, 1]);
    }

    #[test]
    fn header_bounds_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.bin");
        let mut bytes = 1u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(&42u64.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(read_keyset(&p).unwrap().keyset.keys, vec![42]);

        bytes[..8].copy_from_slice(&2u64.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_keyset(&p), Err(Error::Format(_))));

        std::fs::write(&p, [1u8, 2, 3]).unwrap();
        assert!(matches!(read_keyset(&p), Err(Error::Format(_))));
        assert!(matches!(read_keyset(&dir.path().join("missing")), Err(Error::Io(_))));
    }

    #[test]
    fn uniform_workload_deciles() {
        let keys: Vec<u64> = (0..1_000_000u64).map(|i| i * 2).collect();
        let w = generate_workload(&keys, WorkloadKind::Uniform, 1_000_000, 4).unwrap();
        let mut bins = [0usize; 10];
        for q in &w.queries {
            bins[(q / 2 / 100_000) as usize] += 1;
        }
        for b in bins {
            assert!((b as f64 / 1e6 - 0.1).abs() <= 0.01, "{bins:?}");
        }
        // chi-square with 9 dof; 27.9 is the 0.1% critical value
        let chi: f64 = bins.iter().map(|&b| (b as f64 - 1e5).powi(2) / 1e5).sum();
        assert!(chi < 27.9, "chi2 {chi}");
    }

    #[test]
    fn zipf_workload_concentrates_on_small_ranks() {
        let keys: Vec<u64> = (0..1_000_000u64).map(|i| i * 3 + 1).collect();
        let w = generate_workload(&keys, WorkloadKind::zipf(), 200_000, 5).unwrap();
        let head = w.queries.iter().filter(|&&q| (q - 1) / 3 < 1000).count();
        assert!(head as f64 / 2e5 >= 0.9);
        let analytic = zipf_head_mass(1_000_000, 1000, 1.3);
        assert!((0.9..0.92).contains(&analytic), "{analytic}");
        assert!(w.queries.iter().all(|q| keys.binary_search(q).is_ok()));
    }

    #[test]
    fn workload_is_deterministic_and_validated() {
        let keys = vec![1u64, 2, 3];
        let a = generate_workload(&keys, WorkloadKind::zipf(), 50, 1).unwrap();
        assert_eq!(a, generate_workload(&keys, WorkloadKind::zipf(), 50, 1).unwrap());
        assert_eq!(a.queries.len(), 50);
        assert!(generate_workload(&[], WorkloadKind::Uniform, 5, 1).is_err());
        assert!(generate_workload(&keys, WorkloadKind::Uniform, 0, 1).is_err());
    }
}
