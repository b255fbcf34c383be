//! Optimal error-bounded piecewise linear approximation.
//!
//! The fitter is the streaming convex-hull method: every input point
//! `(key, rank)` contributes a vertical interval `[rank - eps, rank + eps]`,
//! and a segment is extended for as long as some line still stabs every
//! interval seen so far. Greedily extending each segment as far as possible
//! yields the minimum number of segments.
//!
//! All feasibility decisions are made in exact integer arithmetic; floats
//! only appear when the final slope and intercept are materialized.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

/// One `(key, rank)` training point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Point {
    pub key: u64,
    pub rank: u64,
}

impl Point {
    pub fn new(key: u64, rank: u64) -> Self {
        Self { key, rank }
    }
}

/// A linear piece `slope * (key - start) + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: u64,
    pub slope: f64,
    pub intercept: f64,
}

impl Segment {
    /// Predicted rank for `key`. Keys below `start` extrapolate backwards.
    #[inline]
    pub fn eval(&self, key: u64) -> f64 {
        let dx = if key >= self.start {
            to_f64(key - self.start)
        } else {
            -to_f64(self.start - key)
        };
        self.slope * dx + self.intercept
    }
}

/// `u64 -> f64` with a single-instruction path below 2^63.
#[inline(always)]
fn to_f64(d: u64) -> f64 {
    if d <= i64::MAX as u64 {
        d as i64 as f64
    } else {
        d as f64
    }
}

/// Free-function form of [`Segment::eval`].
#[inline]
pub fn eval_segment(seg: &Segment, key: u64) -> f64 {
    seg.eval(key)
}

/// An ε-PLA: segments ordered by strictly increasing start key.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaModel {
    pub segments: Vec<Segment>,
    pub epsilon: u64,
}

impl PlaModel {
    /// Index of the segment governing `key` (last segment whose start is `<= key`,
    /// or the first segment for keys below every start).
    pub fn locate(&self, key: u64) -> usize {
        self.segments
            .partition_point(|s| s.start <= key)
            .saturating_sub(1)
    }

    pub fn predict(&self, key: u64) -> f64 {
        self.segments[self.locate(key)].eval(key)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HullPoint {
    x: i128,
    y: i128,
}

/// Direction `(dx, dy)` between two hull points. Comparisons assume both
/// operands have a `dx` of the same sign, which holds at every call site.
#[derive(Clone, Copy, Debug)]
struct Slope {
    dx: i128,
    dy: i128,
}

impl Slope {
    fn between(to: HullPoint, from: HullPoint) -> Self {
        Slope {
            dx: to.x - from.x,
            dy: to.y - from.y,
        }
    }

    fn lt(self, other: Slope) -> bool {
        self.dy * other.dx < self.dx * other.dy
    }

    fn gt(self, other: Slope) -> bool {
        self.dy * other.dx > self.dx * other.dy
    }

    fn as_f64(self) -> f64 {
        self.dy as f64 / self.dx as f64
    }
}

fn cross(o: HullPoint, a: HullPoint, b: HullPoint) -> i128 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Streaming optimal PLA builder for a single segment at a time.
///
/// `rect[0] -> rect[2]` is the minimum-slope line (upper point to lower point),
/// `rect[1] -> rect[3]` the maximum-slope line (lower point to upper point).
#[derive(Debug)]
pub(crate) struct SegmentFitter {
    eps: i128,
    points_in_hull: usize,
    first_x: u64,
    last_x: u64,
    rect: [HullPoint; 4],
    upper: Vec<HullPoint>,
    lower: Vec<HullPoint>,
    upper_start: usize,
    lower_start: usize,
}

impl SegmentFitter {
    pub(crate) fn new(eps: u64) -> Self {
        let zero = HullPoint { x: 0, y: 0 };
        Self {
            eps: eps as i128,
            points_in_hull: 0,
            first_x: 0,
            last_x: 0,
            rect: [zero; 4],
            upper: Vec::with_capacity(64),
            lower: Vec::with_capacity(64),
            upper_start: 0,
            lower_start: 0,
        }
    }

    /// Tries to extend the current segment with `(x, y)`. Returns `false`
    /// when no line can cover the new point together with the points already
    /// in the segment; the segment is left intact for [`Self::segment`].
    pub(crate) fn add_point(&mut self, x: u64, y: u64) -> bool {
        debug_assert!(self.points_in_hull == 0 || x > self.last_x);
        self.last_x = x;
        let xi = x as i128;
        let p1 = HullPoint {
            x: xi,
            y: y as i128 + self.eps,
        };
        let p2 = HullPoint {
            x: xi,
            y: y as i128 - self.eps,
        };

        if self.points_in_hull == 0 {
            self.first_x = x;
            self.rect[0] = p1;
            self.rect[1] = p2;
            self.upper.clear();
            self.lower.clear();
            self.upper.push(p1);
            self.lower.push(p2);
            self.upper_start = 0;
            self.lower_start = 0;
            self.points_in_hull = 1;
            return true;
        }

        if self.points_in_hull == 1 {
            self.rect[2] = p2;
            self.rect[3] = p1;
            self.upper.push(p1);
            self.lower.push(p2);
            self.points_in_hull = 2;
            return true;
        }

        let slope1 = Slope::between(self.rect[2], self.rect[0]);
        let slope2 = Slope::between(self.rect[3], self.rect[1]);
        let outside_line1 = Slope::between(p1, self.rect[2]).lt(slope1);
        let outside_line2 = Slope::between(p2, self.rect[3]).gt(slope2);
        if outside_line1 || outside_line2 {
            return false;
        }

        if Slope::between(p1, self.rect[1]).lt(slope2) {
            // p1 tightens the maximum slope: pivot on the lower hull.
            let mut min = Slope::between(self.lower[self.lower_start], p1);
            let mut min_i = self.lower_start;
            for i in self.lower_start + 1..self.lower.len() {
                let val = Slope::between(self.lower[i], p1);
                if val.gt(min) {
                    break;
                }
                min = val;
                min_i = i;
            }
            self.rect[1] = self.lower[min_i];
            self.rect[3] = p1;
            self.lower_start = min_i;

            let mut end = self.upper.len();
            while end >= self.upper_start + 2
                && cross(self.upper[end - 2], self.upper[end - 1], p1) <= 0
            {
                end -= 1;
            }
            self.upper.truncate(end);
            self.upper.push(p1);
        }

        if Slope::between(p2, self.rect[0]).gt(slope1) {
            // p2 tightens the minimum slope: pivot on the upper hull.
            let mut max = Slope::between(self.upper[self.upper_start], p2);
            let mut max_i = self.upper_start;
            for i in self.upper_start + 1..self.upper.len() {
                let val = Slope::between(self.upper[i], p2);
                if val.lt(max) {
                    break;
                }
                max = val;
                max_i = i;
            }
            self.rect[0] = self.upper[max_i];
            self.rect[2] = p2;
            self.upper_start = max_i;

            let mut end = self.lower.len();
            while end >= self.lower_start + 2
                && cross(self.lower[end - 2], self.lower[end - 1], p2) >= 0
            {
                end -= 1;
            }
            self.lower.truncate(end);
            self.lower.push(p2);
        }

        self.points_in_hull += 1;
        true
    }

    /// Materializes the current segment. The slope is the midpoint of the
    /// feasible slope interval and the line pivots on the intersection of the
    /// two extreme lines, so every covered point stays within `eps`.
    pub(crate) fn segment(&self) -> Segment {
        let origin = self.first_x as i128;
        if self.points_in_hull == 1 {
            let y = (self.rect[0].y + self.rect[1].y) / 2;
            return Segment {
                start: self.first_x,
                slope: 0.0,
                intercept: y as f64,
            };
        }
        let [p0, p1, p2, p3] = self.rect;
        let s1 = Slope::between(p2, p0);
        let s2 = Slope::between(p3, p1);
        let min_slope = s1.as_f64();
        let max_slope = s2.as_f64();
        let slope = (min_slope + max_slope) / 2.0;

        let denom = s1.dx * s2.dy - s1.dy * s2.dx;
        let (ix, iy) = if denom == 0 {
            ((p0.x - origin) as f64, p0.y as f64)
        } else {
            let num = (p1.x - p0.x) * (p3.y - p1.y) - (p1.y - p0.y) * (p3.x - p1.x);
            let t = num as f64 / denom as f64;
            (
                (p0.x - origin) as f64 + t * s1.dx as f64,
                p0.y as f64 + t * s1.dy as f64,
            )
        };
        let intercept = iy - ix * slope;
        assert!(
            slope >= 0.0,
            "negative slope {slope} would break monotonicity"
        );
        Segment {
            start: self.first_x,
            slope,
            intercept,
        }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.points_in_hull == 0
    }

    pub(crate) fn reset(&mut self) {
        self.points_in_hull = 0;
    }
}

/// Fits segments over points given as strictly increasing keys with ranks
/// `0..keys.len()` (the common case, avoids materializing `Point`s).
pub fn fit_keys(keys: &[u64], epsilon: u64) -> Result<PlaModel> {
    if keys.is_empty() {
        return Err(invalid_arg("cannot fit an empty key sequence"));
    }
    if epsilon == 0 {
        return Err(invalid_arg("epsilon must be at least 1"));
    }
    if let Some(w) = keys.windows(2).find(|w| w[0] >= w[1]) {
        return Err(invalid_arg(format!(
            "keys must be strictly increasing ({} followed by {})",
            w[0], w[1]
        )));
    }
    Ok(fit_unchecked(
        keys.iter().enumerate().map(|(r, &k)| (k, r as u64)),
        epsilon,
        keys.len() / (epsilon as usize * epsilon as usize).max(1) + 1,
    ))
}

/// Minimal ε-PLA over `points`, whose keys must strictly increase and whose
/// ranks must be `0..points.len()`.
pub fn fit_epsilon_pla(points: &[Point], epsilon: u64) -> Result<PlaModel> {
    if points.is_empty() {
        return Err(invalid_arg("cannot fit an empty point sequence"));
    }
    if epsilon == 0 {
        return Err(invalid_arg("epsilon must be at least 1"));
    }
    for (i, w) in points.windows(2).enumerate() {
        if w[0].key >= w[1].key {
            return Err(invalid_arg(format!(
                "keys must be strictly increasing (position {})",
                i + 1
            )));
        }
    }
    if let Some((i, p)) = points
        .iter()
        .enumerate()
        .find(|(i, p)| p.rank != *i as u64)
    {
        return Err(invalid_arg(format!(
            "rank at position {i} is {}, expected {i}",
            p.rank
        )));
    }
    Ok(fit_unchecked(
        points.iter().map(|p| (p.key, p.rank)),
        epsilon,
        16,
    ))
}

pub(crate) fn fit_unchecked(
    points: impl Iterator<Item = (u64, u64)>,
    epsilon: u64,
    capacity_hint: usize,
) -> PlaModel {
    let mut fitter = SegmentFitter::new(epsilon);
    let mut segments = Vec::with_capacity(capacity_hint);
    for (x, y) in points {
        if !fitter.add_point(x, y) {
            segments.push(fitter.segment());
            fitter.reset();
            let accepted = fitter.add_point(x, y);
            debug_assert!(accepted);
        }
    }
    if !fitter.is_empty() {
        segments.push(fitter.segment());
    }
    PlaModel { segments, epsilon }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_keys(rng: &mut ChaCha8Rng, n: usize, max_gap: u64) -> Vec<u64> {
        let mut k = rng.random_range(0..1000u64);
        (0..n)
            .map(|_| {
                k += rng.random_range(1..=max_gap);
                k
            })
            .collect()
    }

    fn max_error(model: &PlaModel, keys: &[u64]) -> f64 {
        keys.iter()
            .enumerate()
            .map(|(r, &k)| (model.predict(k) - r as f64).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn collinear_points_fit_one_segment() {
        let keys: Vec<u64> = (1..=10).map(|i| i * 10).collect();
        let model = fit_keys(&keys, 1).unwrap();
        assert_eq!(model.len(), 1);
        assert!((model.segments[0].slope - 0.1).abs() < 1e-12);
        assert!(max_error(&model, &keys) < 1e-9);
    }

    #[test]
    fn eval_identity_and_horizontal() {
        let id = Segment {
            start: 0,
            slope: 1.0,
            intercept: 0.0,
        };
        assert_eq!(eval_segment(&id, 5), 5.0);
        let flat = Segment {
            start: 7,
            slope: 0.0,
            intercept: 3.0,
        };
        assert_eq!(flat.eval(1_000_000_000), 3.0);
        assert_eq!(flat.eval(0), 3.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_keys(&[], 4).is_err());
        assert!(fit_keys(&[1, 2, 2], 4).is_err());
        assert!(fit_keys(&[3, 2], 4).is_err());
        assert!(fit_keys(&[1, 2], 0).is_err());
        let pts = [Point::new(1, 0), Point::new(2, 2)];
        assert!(fit_epsilon_pla(&pts, 1).is_err());
    }

    #[test]
    fn single_point_is_a_horizontal_segment() {
        let model = fit_keys(&[42], 3).unwrap();
        assert_eq!(model.len(), 1);
        assert_eq!(model.segments[0].start, 42);
        assert_eq!(model.segments[0].slope, 0.0);
        assert_eq!(model.segments[0].intercept, 0.0);
    }

    #[test]
    fn two_eps_plus_one_keys_fit_one_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for eps in 1..=16u64 {
            let keys = random_keys(&mut rng, (2 * eps + 1) as usize, 1 << 40);
            assert_eq!(fit_keys(&keys, eps).unwrap().len(), 1, "eps={eps}");
        }
    }

    #[test]
    fn random_fit_respects_error_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let keys = random_keys(&mut rng, 1000, 1_000_000);
        let model = fit_keys(&keys, 8).unwrap();
        assert!(max_error(&model, &keys) <= 8.0);
    }

    #[test]
    fn slopes_nonnegative_and_starts_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for eps in [1u64, 2, 4, 16] {
            let keys = random_keys(&mut rng, 5000, 1 << 20);
            let model = fit_keys(&keys, eps).unwrap();
            assert!(model.segments.iter().all(|s| s.slope >= 0.0));
            assert!(model.segments.windows(2).all(|w| w[0].start < w[1].start));
            assert_eq!(model.segments[0].start, keys[0]);
        }
    }

    #[test]
    fn point_and_key_entry_points_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys = random_keys(&mut rng, 3000, 5000);
        let points: Vec<Point> = keys
            .iter()
            .enumerate()
            .map(|(r, &k)| Point::new(k, r as u64))
            .collect();
        assert_eq!(
            fit_keys(&keys, 4).unwrap(),
            fit_epsilon_pla(&points, 4).unwrap()
        );
    }

    #[test]
    fn huge_keys_near_u64_max() {
        let keys: Vec<u64> = (0..2000u64).map(|i| u64::MAX - 10_000_000 + i * i).collect();
        let model = fit_keys(&keys, 2).unwrap();
        assert!(max_error(&model, &keys) <= 2.0);
    }
}
