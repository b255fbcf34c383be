//! Gap-distribution analytics and the segment-count / height estimators.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::pla::fit_keys;

/// Population moments of a run of gaps `g_i = k_i - k_{i-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub count: u64,
    pub mean: f64,
    pub variance: f64,
}

impl GapStats {
    /// `sigma^2 / mu^2`.
    pub fn hardness(&self) -> f64 {
        self.variance / (self.mean * self.mean)
    }

    fn of_gaps(gaps: impl Iterator<Item = u64> + Clone) -> Option<Self> {
        let mut count = 0u64;
        let mut sum = 0u128;
        for g in gaps.clone() {
            count += 1;
            sum += g as u128;
        }
        if count == 0 {
            return None;
        }
        let mean = sum as f64 / count as f64;
        let ss: f64 = gaps.map(|g| (g as f64 - mean).powi(2)).sum();
        Some(Self {
            count,
            mean,
            variance: ss / count as f64,
        })
    }
}

fn gaps(keys: &[u64]) -> impl Iterator<Item = u64> + Clone + '_ {
    keys.windows(2).map(|w| w[1] - w[0])
}

fn check_keys(keys: &[u64]) -> Result<()> {
    if keys.len() < 2 {
        return Err(invalid_arg("need at least 2 keys for gap statistics"));
    }
    if keys.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid_arg("keys must be strictly increasing"));
    }
    Ok(())
}

pub fn gap_statistics(keys: &[u64]) -> Result<GapStats> {
    check_keys(keys)?;
    Ok(GapStats::of_gaps(gaps(keys)).expect("non-empty"))
}

/// Moments of the gaps that survive nearest-rank clipping at the 1% and 99%
/// quantiles. `count` still reports all `N - 1` gaps, since the clipped
/// moments stand in for the whole sequence.
pub fn clipped_gap_statistics(keys: &[u64]) -> Result<GapStats> {
    check_keys(keys)?;
    let mut sorted: Vec<u64> = gaps(keys).collect();
    let n = sorted.len();
    let lo = nearest_rank(&mut sorted, 0.01);
    let hi = nearest_rank(&mut sorted, 0.99);
    let kept = GapStats::of_gaps(gaps(keys).filter(|&g| (lo..=hi).contains(&g)))
        .expect("quantiles are observed values");
    Ok(GapStats {
        count: n as u64,
        ..kept
    })
}

/// Nearest-rank quantile: the element at 1-based rank `ceil(p * n)`.
fn nearest_rank(values: &mut [u64], p: f64) -> u64 {
    let rank = ((p * values.len() as f64).ceil() as usize).clamp(1, values.len());
    *values.select_nth_unstable(rank - 1).1
}

pub fn hardness_ratio(keys: &[u64], clip: bool) -> Result<f64> {
    let s = if clip {
        clipped_gap_statistics(keys)?
    } else {
        gap_statistics(keys)?
    };
    Ok(s.hardness())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coverage {
    Finite(f64),
    /// Zero gap variance: a single segment covers every key.
    Infinite,
}

/// Expected keys covered by one segment, `mu^2 eps^2 / sigma^2`.
pub fn expected_coverage(stats: &GapStats, epsilon: u64) -> Coverage {
    if stats.variance == 0.0 {
        return Coverage::Infinite;
    }
    let e = epsilon as f64;
    Coverage::Finite(stats.mean * stats.mean * e * e / stats.variance)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapPartition {
    /// Index of the first gap (gap `i` is `keys[i + 1] - keys[i]`).
    pub offset: usize,
    pub stats: GapStats,
}

pub const DEFAULT_MAX_PARTITIONS: usize = 64;

/// Smallest partition the change-point search may produce, in gaps.
pub fn min_partition_len(gap_count: usize) -> usize {
    (gap_count / 1024).max(1024)
}

/// Splits the gap sequence into moment-homogeneous runs by binary
/// segmentation.
///
/// Gaps are grouped into fixed windows and each window is summarised by the
/// log of its raw second moment, which moves with both the local mean and the
/// local variance. A split is accepted when it lowers the within-segment sum
/// of squares by more than a BIC-style penalty `3 s^2 ln m` (`s` estimated
/// from first differences, `m` the window count).
pub fn partition_gaps(keys: &[u64], max_partitions: usize) -> Result<Vec<GapPartition>> {
    check_keys(keys)?;
    if max_partitions == 0 {
        return Err(invalid_arg("max_partitions must be positive"));
    }
    let n_gaps = keys.len() - 1;
    let min_len = min_partition_len(n_gaps);
    let bounds = if max_partitions == 1 || n_gaps < 2 * min_len {
        vec![0, n_gaps]
    } else {
        change_points(keys, n_gaps, min_len, max_partitions)
    };
    Ok(bounds
        .windows(2)
        .map(|b| GapPartition {
            offset: b[0],
            stats: GapStats::of_gaps(gaps(&keys[b[0]..=b[1]])).expect("non-empty partition"),
        })
        .collect())
}

fn change_points(keys: &[u64], n_gaps: usize, min_len: usize, max_parts: usize) -> Vec<usize> {
    let w = (min_len / 4).max(1);
    let m = n_gaps / w;
    let min_w = min_len.div_ceil(w);
    // Window j spans gaps [j*w, (j+1)*w), the last one absorbing the tail.
    let gap_start = |j: usize| if j >= m { n_gaps } else { j * w };
    let mut x: Vec<f64> = (0..m)
        .map(|j| {
            let seg = &keys[gap_start(j)..=gap_start(j + 1)];
            let n = (seg.len() - 1) as f64;
            let m2 = gaps(seg).map(|g| (g as f64).powi(2)).sum::<f64>() / n;
            m2.ln()
        })
        .collect();
    let centre = x.iter().sum::<f64>() / m as f64;
    x.iter_mut().for_each(|v| *v -= centre);

    let mut diffs: Vec<f64> = x.windows(2).map(|d| (d[1] - d[0]).abs()).collect();
    let noise = if diffs.is_empty() {
        0.0
    } else {
        let mid = diffs.len() / 2;
        *diffs.select_nth_unstable_by(mid, f64::total_cmp).1 / (0.6745 * 2f64.sqrt())
    };
    // Variation below 0.1% in log scale is irrelevant to the estimators.
    let noise = noise.max(1e-3);
    let penalty = 3.0 * noise * noise * (m as f64).ln();

    let mut s1 = vec![0.0f64; m + 1];
    let mut s2 = vec![0.0f64; m + 1];
    for (j, &v) in x.iter().enumerate() {
        s1[j + 1] = s1[j] + v;
        s2[j + 1] = s2[j] + v * v;
    }
    let cost = |a: usize, b: usize| {
        let n = (b - a) as f64;
        let t = s1[b] - s1[a];
        (s2[b] - s2[a] - t * t / n).max(0.0)
    };
    let best_split = |a: usize, b: usize| -> Option<(f64, usize)> {
        if b - a < 2 * min_w {
            return None;
        }
        let whole = cost(a, b);
        (a + min_w..=b - min_w)
            .map(|k| (whole - cost(a, k) - cost(k, b), k))
            .max_by(|l, r| l.0.total_cmp(&r.0).then(r.1.cmp(&l.1)))
    };

    let mut segments = vec![(0usize, m, best_split(0, m))];
    while segments.len() < max_parts {
        let Some((i, gain, k)) = segments
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.2.map(|(g, k)| (i, g, k)))
            .max_by(|l, r| l.1.total_cmp(&r.1))
        else {
            break;
        };
        if gain <= penalty {
            break;
        }
        let (a, b, _) = segments[i];
        segments[i] = (a, k, best_split(a, k));
        segments.insert(i + 1, (k, b, best_split(k, b)));
    }
    let mut bounds: Vec<usize> = segments.iter().map(|s| gap_start(s.0)).collect();
    bounds.push(n_gaps);
    bounds
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// Global gap moments.
    Simple,
    /// Moments of the 1%..99% clipped gaps.
    Clip,
    /// Per-partition moments from change-point detection.
    Adap,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [Self::Simple, Self::Clip, Self::Adap];

    pub fn name(self) -> &'static str {
        match self {
            Self::Simple => "simple",
            Self::Clip => "clip",
            Self::Adap => "adap",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(Self::Simple),
            "clip" => Ok(Self::Clip),
            "adap" => Ok(Self::Adap),
            _ => Err(invalid_arg(format!("unknown estimator kind {s:?}"))),
        }
    }
}

/// How the proportionality constant of the leaf estimator is fitted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub reference_eps: u64,
    pub sample_fraction: f64,
    /// Floor on the sample size so the reference fit yields enough segments
    /// for a stable ratio.
    pub min_sample: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            reference_eps: 64,
            sample_fraction: 0.01,
            min_sample: 1 << 20,
            seed: 0x5eed,
        }
    }
}

/// Precomputed gap moments for one estimator kind plus its fitted scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub kind: EstimatorKind,
    pub partitions: Vec<GapPartition>,
    pub calibration_scale: Option<f64>,
    /// Height scale `c_h`.
    pub height_scale: f64,
}

impl Estimator {
    pub fn new(keys: &[u64], kind: EstimatorKind) -> Result<Self> {
        let partitions = match kind {
            EstimatorKind::Simple => vec![GapPartition {
                offset: 0,
                stats: gap_statistics(keys)?,
            }],
            EstimatorKind::Clip => vec![GapPartition {
                offset: 0,
                stats: clipped_gap_statistics(keys)?,
            }],
            EstimatorKind::Adap => partition_gaps(keys, DEFAULT_MAX_PARTITIONS)?,
        };
        Ok(Self::from_partitions(kind, partitions))
    }

    /// ADAP over an explicit partition cap (1 reproduces SIMPLE).
    pub fn adap_with_max_partitions(keys: &[u64], max_partitions: usize) -> Result<Self> {
        Ok(Self::from_partitions(
            EstimatorKind::Adap,
            partition_gaps(keys, max_partitions)?,
        ))
    }

    pub fn from_partitions(kind: EstimatorKind, partitions: Vec<GapPartition>) -> Self {
        Self {
            kind,
            partitions,
            calibration_scale: None,
            height_scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(invalid_arg(format!("calibration scale must be positive, got {scale}")));
        }
        self.calibration_scale = Some(scale);
        Ok(self)
    }

    pub fn with_height_scale(mut self, c_h: f64) -> Result<Self> {
        if !(c_h.is_finite() && c_h > 0.0) {
            return Err(invalid_arg(format!("height scale must be positive, got {c_h}")));
        }
        self.height_scale = c_h;
        Ok(self)
    }

    /// `sum_P N_P sigma_P^2 / mu_P^2`, the epsilon-free part of the estimate.
    pub fn hardness_mass(&self) -> f64 {
        self.partitions
            .iter()
            .map(|p| p.stats.count as f64 * p.stats.hardness())
            .sum()
    }

    /// Gap-count-weighted hardness, the `sigma^2 / mu^2` used for `G`.
    pub fn effective_hardness(&self) -> f64 {
        let n: u64 = self.partitions.iter().map(|p| p.stats.count).sum();
        self.hardness_mass() / n as f64
    }

    pub fn scale(&self) -> Result<f64> {
        self.calibration_scale
            .ok_or_else(|| Error::InvalidState("estimator is not calibrated".into()))
    }

    pub fn estimate_leaf_segments(&self, eps_leaf: u64) -> Result<f64> {
        if eps_leaf == 0 {
            return Err(invalid_arg("epsilon must be at least 1"));
        }
        let e = eps_leaf as f64;
        Ok(self.scale()? * self.hardness_mass() / (e * e))
    }

    /// `G = mu^2 eps_i^2 / sigma^2`.
    pub fn growth(&self, eps_internal: u64) -> f64 {
        let e = eps_internal as f64;
        e * e / self.effective_hardness()
    }

    pub fn estimate_height(&self, eps_internal: u64, eps_leaf: u64) -> Result<usize> {
        let leaves = self.estimate_leaf_segments(eps_leaf)?;
        let g = self.growth(eps_internal);
        if !(g > 1.0) {
            return Err(Error::NotApplicable(format!(
                "G = {g:.4} <= 1 at eps_internal = {eps_internal}"
            )));
        }
        Ok(height_from(leaves, g, self.height_scale))
    }
}

fn height_from(leaves: f64, g: f64, c_h: f64) -> usize {
    if leaves <= 1.0 {
        return 1;
    }
    let h = (c_h * (leaves.ln() / g.ln()).log2()).ceil() + 1.0;
    // More than one leaf always needs a root above it.
    (h.max(2.0)) as usize
}

/// Fits the leaf estimator's proportionality constant: one reference-epsilon
/// PLA on a uniform key sample, `scale = observed / predicted`. The scale
/// reflects the fitter's efficiency relative to the gap model, so it is fitted
/// with ADAP moments and shared by every estimator kind on the dataset.
pub fn fit_calibration_scale(keys: &[u64], cfg: &CalibrationConfig) -> Result<f64> {
    check_keys(keys)?;
    let want = ((cfg.sample_fraction * keys.len() as f64).ceil() as usize).max(cfg.min_sample);
    let sample_keys: Vec<u64> = if want >= keys.len() {
        keys.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, keys.len(), want.max(2)).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| keys[i]).collect()
    };
    let observed = fit_keys(&sample_keys, cfg.reference_eps)?.len() as f64;
    let reference = Estimator::new(&sample_keys, EstimatorKind::Adap)?;
    let e = cfg.reference_eps as f64;
    let predicted = reference.hardness_mass() / (e * e);
    if !(predicted > 0.0) {
        return Err(Error::NotApplicable(
            "gap variance is zero; the leaf estimator has nothing to scale".into(),
        ));
    }
    Ok(observed / predicted)
}

/// Builds and calibrates an estimator in one go.
pub fn calibrated_estimator(
    keys: &[u64],
    kind: EstimatorKind,
    cfg: &CalibrationConfig,
) -> Result<Estimator> {
    Estimator::new(keys, kind)?.with_scale(fit_calibration_scale(keys, cfg)?)
}

pub fn estimate_leaf_segments(estimator: &Estimator, eps_leaf: u64) -> Result<f64> {
    estimator.estimate_leaf_segments(eps_leaf)
}

pub fn estimate_height(estimator: &Estimator, eps_internal: u64, eps_leaf: u64) -> Result<usize> {
    estimator.estimate_height(eps_internal, eps_leaf)
}

/// One `(estimated leaves, G, built height)` observation for fitting `c_h`.
#[derive(Clone, Copy, Debug)]
pub struct HeightObservation {
    pub leaves: f64,
    pub growth: f64,
    pub height: usize,
}

/// Chooses `c_h` from a grid over `[0.25, 4]` minimising total absolute
/// height error; ties go to the value closest to 1.
pub fn fit_height_scale(observations: &[HeightObservation]) -> f64 {
    let err = |c: f64| -> usize {
        observations
            .iter()
            .map(|o| height_from(o.leaves, o.growth, c).abs_diff(o.height))
            .sum()
    };
    (1..=80)
        .map(|i| i as f64 * 0.05)
        .filter(|&c| c >= 0.25)
        .min_by(|&a, &b| err(a).cmp(&err(b)).then((a - 1.0).abs().total_cmp(&(b - 1.0).abs())))
        .unwrap_or(1.0)
}

/// Analytic B+-tree height `ceil(1 + log_B((n + 1) / 2))`, computed in
/// integers: the smallest `h` with `2 B^(h-1) >= n + 1`.
pub fn btree_height(n: u64, fanout: u64) -> Result<u32> {
    if fanout < 2 {
        return Err(invalid_arg("fanout must be at least 2"));
    }
    if n == 0 {
        return Err(invalid_arg("key count must be at least 1"));
    }
    let target = n as u128 + 1;
    let mut pow = 1u128;
    let mut h = 1;
    while 2 * pow < target {
        pow *= fanout as u128;
        h += 1;
    }
    Ok(h)
}
