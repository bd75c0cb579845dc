//! M-spline and I-spline bases.
//!
//! An M-spline basis of order `kappa` over a knot vector with `L` internal knots
//! has `L + kappa` nonnegative basis functions, each integrating to one over its
//! support, so that any simplex-weighted combination is a density on the
//! boundary interval. The I-spline basis is its running integral from the lower
//! boundary knot and gives cumulative hazards in closed form.
//!
//! Basis functions are right-continuous on half-open knot intervals. At the
//! upper boundary knot the left limit is returned instead, so that a hazard is
//! defined at the final observation time and every I-spline reaches exactly one.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking evaluation times against the boundary knots.
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;

/// Boundary and internal knots `lower < internal[0] < ... < internal[L-1] < upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    lower: f64,
    upper: f64,
    internal: Vec<f64>,
}

impl KnotVector {
    pub fn new(lower: f64, upper: f64, internal: Vec<f64>) -> Result<Self> {
        if !lower.is_finite() || !upper.is_finite() || internal.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidKnots("knots must be finite".into()));
        }
        if lower < 0.0 {
            return Err(Error::InvalidKnots(format!(
                "lower boundary must be nonnegative, got {lower}"
            )));
        }
        let mut prev = lower;
        for &k in internal.iter().chain(std::iter::once(&upper)) {
            if k <= prev {
                return Err(Error::InvalidKnots(format!(
                    "knots must be strictly increasing ({prev} followed by {k})"
                )));
            }
            prev = k;
        }
        Ok(Self {
            lower,
            upper,
            internal,
        })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn internal(&self) -> &[f64] {
        &self.internal
    }

    /// Number of internal knots `L`.
    pub fn n_internal(&self) -> usize {
        self.internal.len()
    }

    /// Width of the boundary interval.
    pub fn span(&self) -> f64 {
        self.upper - self.lower
    }

    /// All `L + 2` knots including both boundaries.
    pub fn all(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.internal.len() + 2);
        v.push(self.lower);
        v.extend_from_slice(&self.internal);
        v.push(self.upper);
        v
    }

    /// Multiplies every knot by `factor`, e.g. to change the unit of time.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.lower * factor,
            self.upper * factor,
            self.internal.iter().map(|k| k * factor).collect(),
        )
    }

    /// Returns `true` if `t` lies within the boundary interval up to the
    /// formatting tolerance.
    pub fn contains(&self, t: f64) -> bool {
        let tol = BOUNDARY_TOLERANCE * self.upper.abs().max(1.0);
        t >= self.lower - tol && t <= self.upper + tol
    }
}

/// Knot vector padded with `kappa` copies of each boundary knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedKnots {
    values: Vec<f64>,
    kappa: usize,
}

/// Pads `knots` with `kappa` replications of each boundary knot.
pub fn augment_knots(knots: &KnotVector, kappa: usize) -> Result<AugmentedKnots> {
    if kappa < 1 {
        return Err(Error::InvalidOrder(kappa));
    }
    let mut values = Vec::with_capacity(knots.n_internal() + 2 * kappa);
    values.extend(std::iter::repeat_n(knots.lower, kappa));
    values.extend_from_slice(&knots.internal);
    values.extend(std::iter::repeat_n(knots.upper, kappa));
    Ok(AugmentedKnots { values, kappa })
}

impl AugmentedKnots {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn lower(&self) -> f64 {
        self.values[0]
    }

    pub fn upper(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    fn n_internal(&self) -> usize {
        self.values.len() - 2 * self.kappa
    }

    /// Basis dimension `L + kappa`.
    pub fn dim(&self) -> usize {
        self.values.len() - self.kappa
    }

    /// Validates `t` against the boundaries and clamps away formatting noise.
    pub fn check_time(&self, t: f64) -> Result<f64> {
        let (lower, upper) = (self.lower(), self.upper());
        let tol = BOUNDARY_TOLERANCE * upper.abs().max(1.0);
        if !t.is_finite() || t < lower - tol || t > upper + tol {
            return Err(Error::TimeOutOfRange { time: t, lower, upper });
        }
        Ok(t.clamp(lower, upper))
    }

    /// Index `s` of the nonempty half-open interval `[z_s, z_{s+1})` holding `t`,
    /// with `t = upper` mapped onto the last interval (left limit).
    pub(crate) fn span_index(&self, t: f64) -> usize {
        let first = self.kappa - 1;
        let last = self.kappa + self.n_internal() - 1;
        let z = &self.values;
        // Internal knots are strictly increasing so every interval in
        // first..=last is nonempty.
        let mut lo = first;
        let mut hi = last;
        if t >= z[last] {
            return last;
        }
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if z[mid] <= t {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Order-1 to order-`order` M-spline values at a clamped time; returns the
    /// order `order - 1` and order `order` vectors.
    fn recurse(&self, t: f64, order: usize) -> (Vec<f64>, Vec<f64>) {
        let z = &self.values;
        let n = z.len();
        let span = self.span_index(t);
        let mut cur = vec![0.0; n - 1];
        cur[span] = 1.0 / (z[span + 1] - z[span]);
        let mut prev = Vec::new();
        for r in 2..=order {
            let mut next = vec![0.0; n - r];
            for (s, out) in next.iter_mut().enumerate() {
                let denom = z[s + r] - z[s];
                if denom > 0.0 {
                    let rf = r as f64;
                    *out = rf * ((t - z[s]) * cur[s] + (z[s + r] - t) * cur[s + 1])
                        / ((rf - 1.0) * denom);
                }
            }
            prev = std::mem::replace(&mut cur, next);
        }
        (prev, cur)
    }

    /// M-spline basis row at a single time.
    pub fn mspline(&self, t: f64) -> Result<Vec<f64>> {
        let t = self.check_time(t)?;
        Ok(self.recurse(t, self.kappa).1)
    }

    /// I-spline basis row at a single time.
    ///
    /// Uses the identity between the integral of an order-`kappa` M-spline and
    /// tail sums of order `kappa + 1` B-splines on the once-more padded knots.
    pub fn ispline(&self, t: f64) -> Result<Vec<f64>> {
        let t = self.check_time(t)?;
        let dim = self.dim();
        if t <= self.lower() {
            return Ok(vec![0.0; dim]);
        }
        if t >= self.upper() {
            return Ok(vec![1.0; dim]);
        }
        let padded = self.padded();
        let k1 = self.kappa + 1;
        let m = padded.recurse(t, k1).1;
        let z = &padded.values;
        // B-spline j of order kappa + 1 on the padded knots.
        let mut out = vec![0.0; dim];
        let mut acc = 0.0;
        for j in (1..=dim).rev() {
            let width = z[j + k1] - z[j];
            acc += m[j] * width / k1 as f64;
            out[j - 1] = acc.min(1.0);
        }
        Ok(out)
    }

    /// Time derivative of the M-spline basis row.
    pub fn mspline_derivative(&self, t: f64) -> Result<Vec<f64>> {
        let t = self.check_time(t)?;
        let dim = self.dim();
        if self.kappa == 1 {
            return Ok(vec![0.0; dim]);
        }
        let z = &self.values;
        let k = self.kappa;
        let (lower_order, _) = self.recurse(t, k);
        let mut out = vec![0.0; dim];
        for (s, out) in out.iter_mut().enumerate() {
            let denom = z[s + k] - z[s];
            if denom > 0.0 {
                *out = k as f64 / denom * (lower_order[s] - lower_order[s + 1]);
            }
        }
        Ok(out)
    }

    fn padded(&self) -> AugmentedKnots {
        let mut values = Vec::with_capacity(self.values.len() + 2);
        values.push(self.lower());
        values.extend_from_slice(&self.values);
        values.push(self.upper());
        AugmentedKnots {
            values,
            kappa: self.kappa + 1,
        }
    }

    fn eval_rows(
        &self,
        times: &[f64],
        f: impl Fn(&Self, f64) -> Result<Vec<f64>>,
    ) -> Result<BasisMatrix> {
        let dim = self.dim();
        let mut values = Vec::with_capacity(times.len() * dim);
        for &t in times {
            values.extend(f(self, t)?);
        }
        Ok(BasisMatrix {
            n_rows: times.len(),
            n_cols: dim,
            values,
        })
    }
}

/// Row-major matrix of basis values, one row per evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
}

impl BasisMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_cols.max(1))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }
}

pub fn eval_mspline(aug: &AugmentedKnots, times: &[f64]) -> Result<BasisMatrix> {
    aug.eval_rows(times, AugmentedKnots::mspline)
}

pub fn eval_ispline(aug: &AugmentedKnots, times: &[f64]) -> Result<BasisMatrix> {
    aug.eval_rows(times, AugmentedKnots::ispline)
}

pub fn eval_mspline_derivative(aug: &AugmentedKnots, times: &[f64]) -> Result<BasisMatrix> {
    aug.eval_rows(times, AugmentedKnots::mspline_derivative)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    M,
    I,
    DerivM,
}

#[derive(PartialEq, Eq, Hash)]
struct CacheKey {
    knots: Vec<u64>,
    kappa: usize,
    kind: BasisKind,
    times: Vec<u64>,
}

/// Memoizes basis matrices by (knots, order, kind, time grid).
#[derive(Default)]
pub struct BasisCache {
    entries: Mutex<HashMap<CacheKey, Arc<BasisMatrix>>>,
}

impl BasisCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, aug: &AugmentedKnots, kind: BasisKind, times: &[f64]) -> Result<Arc<BasisMatrix>> {
        let key = CacheKey {
            knots: aug.values.iter().map(|v| v.to_bits()).collect(),
            kappa: aug.kappa,
            kind,
            times: times.iter().map(|v| v.to_bits()).collect(),
        };
        if let Some(hit) = self.entries.lock().unwrap().get(&key) {
            return Ok(Arc::clone(hit));
        }
        let m = Arc::new(match kind {
            BasisKind::M => eval_mspline(aug, times)?,
            BasisKind::I => eval_ispline(aug, times)?,
            BasisKind::DerivM => eval_mspline_derivative(aug, times)?,
        });
        self.entries
            .lock()
            .unwrap()
            .insert(key, Arc::clone(&m));
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::adaptive_simpson;
    use proptest::prelude::*;

    fn kv(lower: f64, upper: f64, internal: &[f64]) -> KnotVector {
        KnotVector::new(lower, upper, internal.to_vec()).unwrap()
    }

    // Direct transcription of the recursive definition.
    fn naive(aug: &AugmentedKnots, r: usize, s: usize, t: f64) -> f64 {
        let z = aug.values();
        if r == 1 {
            return if s == aug.span_index(t) {
                1.0 / (z[s + 1] - z[s])
            } else {
                0.0
            };
        }
        let denom = z[s + r] - z[s];
        if denom > 0.0 {
            let rf = r as f64;
            rf * ((t - z[s]) * naive(aug, r - 1, s, t) + (z[s + r] - t) * naive(aug, r - 1, s + 1, t))
                / ((rf - 1.0) * denom)
        } else {
            0.0
        }
    }

    #[test]
    fn augment_examples() {
        let k = kv(0.0, 2.0, &[1.0]);
        assert_eq!(augment_knots(&k, 1).unwrap().values(), &[0.0, 1.0, 2.0]);
        assert_eq!(
            augment_knots(&k, 4).unwrap().values(),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 2.0]
        );
        assert_eq!(augment_knots(&kv(0.0, 1.0, &[]), 2).unwrap().values(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(augment_knots(&k, 0), Err(Error::InvalidOrder(0))));
    }

    #[test]
    fn invalid_knots_rejected() {
        assert!(KnotVector::new(0.0, 1.0, vec![0.5, 0.5]).is_err());
        assert!(KnotVector::new(0.0, 1.0, vec![0.7, 0.5]).is_err());
        assert!(KnotVector::new(0.0, 1.0, vec![1.0]).is_err());
        assert!(KnotVector::new(-1.0, 1.0, vec![]).is_err());
        assert!(KnotVector::new(1.0, 1.0, vec![]).is_err());
    }

    #[test]
    fn piecewise_constant_examples() {
        let aug = augment_knots(&kv(0.0, 2.0, &[1.0]), 1).unwrap();
        assert_eq!(aug.mspline(0.5).unwrap(), vec![1.0, 0.0]);
        assert_eq!(aug.mspline(1.5).unwrap(), vec![0.0, 1.0]);
        // Left limit at the upper boundary.
        assert_eq!(aug.mspline(2.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(aug.mspline_derivative(0.3).unwrap(), vec![0.0, 0.0]);
        assert_eq!(aug.ispline(0.5).unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn out_of_range_times_rejected() {
        let aug = augment_knots(&kv(0.0, 2.0, &[1.0]), 3).unwrap();
        assert!(matches!(aug.mspline(2.1), Err(Error::TimeOutOfRange { .. })));
        assert!(aug.ispline(-0.1).is_err());
        assert!(aug.mspline(f64::NAN).is_err());
        // Formatting noise is absorbed.
        assert!(aug.mspline(2.0 + 1e-13).is_ok());
    }

    #[test]
    fn ispline_boundary_rows() {
        let aug = augment_knots(&kv(0.0, 3.0, &[0.4, 1.0, 2.2]), 4).unwrap();
        assert!(aug.ispline(0.0).unwrap().iter().all(|&v| v == 0.0));
        assert!(aug.ispline(3.0).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ispline_matches_quadrature() {
        let aug = augment_knots(&kv(0.0, 1.0, &[0.25, 0.5, 0.75]), 4).unwrap();
        let i = aug.ispline(0.4).unwrap();
        for s in 0..aug.dim() {
            let q = adaptive_simpson(&|t| aug.mspline(t).unwrap()[s], 0.0, 0.4, 1e-13);
            assert!((i[s] - q).abs() <= 1e-8, "column {s}: {} vs {q}", i[s]);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let aug = augment_knots(&kv(0.0, 1.0, &[0.2, 0.45, 0.7]), 4).unwrap();
        let h = 1e-6;
        for &t in &[0.1, 0.33, 0.58, 0.9] {
            let d = aug.mspline_derivative(t).unwrap();
            let up = aug.mspline(t + h).unwrap();
            let dn = aug.mspline(t - h).unwrap();
            for s in 0..aug.dim() {
                let fd = (up[s] - dn[s]) / (2.0 * h);
                let scale = d[s].abs().max(1.0);
                assert!((d[s] - fd).abs() / scale <= 1e-4, "t={t} s={s}");
            }
        }
    }

    #[test]
    fn order_two_single_interval_slopes() {
        let width = 2.5;
        let aug = augment_knots(&kv(0.0, width, &[]), 2).unwrap();
        let d = aug.mspline_derivative(width / 2.0).unwrap();
        let slope = 2.0 / (width * width);
        assert!((d[0] + slope).abs() < 1e-14);
        assert!((d[1] - slope).abs() < 1e-14);
    }

    #[test]
    fn iterative_recursion_bit_identical_to_naive() {
        let corpus = [
            kv(0.0, 1.0, &[]),
            kv(0.0, 2.0, &[1.0]),
            kv(0.0, 10.0, &[0.5, 1.0, 2.0, 4.0, 8.0]),
            kv(1.0, 3.0, &[1.1, 1.2, 2.9]),
        ];
        for k in &corpus {
            for kappa in 1..=5 {
                let aug = augment_knots(k, kappa).unwrap();
                for i in 0..=50 {
                    let t = k.lower() + k.span() * i as f64 / 50.0;
                    let fast = aug.mspline(t).unwrap();
                    for (s, v) in fast.iter().enumerate() {
                        assert_eq!(v.to_bits(), naive(&aug, kappa, s, t).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn cache_is_transparent() {
        let cache = BasisCache::new();
        let aug = augment_knots(&kv(0.0, 2.0, &[0.3, 1.1]), 3).unwrap();
        let times = [0.0, 0.2, 0.9, 2.0];
        let a = cache.get(&aug, BasisKind::I, &times).unwrap();
        let b = cache.get(&aug, BasisKind::I, &times).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(*a, eval_ispline(&aug, &times).unwrap());
        let m = cache.get(&aug, BasisKind::M, &times).unwrap();
        assert_eq!(*m, eval_mspline(&aug, &times).unwrap());
        assert_eq!(cache.len(), 2);
    }

    fn knots_strategy() -> impl Strategy<Value = (KnotVector, usize)> {
        (1usize..=4, prop::collection::vec(0.01f64..1.0, 1..=11), 0.1f64..50.0).prop_map(
            |(kappa, gaps, scale)| {
                let total: f64 = gaps.iter().sum();
                let mut acc = 0.0;
                let mut internal = Vec::new();
                for g in &gaps[..gaps.len() - 1] {
                    acc += g / total * scale;
                    internal.push(acc);
                }
                (KnotVector::new(0.0, scale, internal).unwrap(), kappa)
            },
        )
    }

    proptest! {
        #[test]
        fn nonnegative_and_local((k, kappa) in knots_strategy(), u in 0.0f64..=1.0) {
            let aug = augment_knots(&k, kappa).unwrap();
            let t = k.lower() + u * k.span();
            let m = aug.mspline(t).unwrap();
            let z = aug.values();
            for (s, &v) in m.iter().enumerate() {
                prop_assert!(v >= 0.0);
                let in_support = z[s] <= t && (t < z[s + kappa] || (t == k.upper() && z[s + kappa] == k.upper()));
                if !in_support {
                    prop_assert_eq!(v, 0.0);
                }
            }
            let i = aug.ispline(t).unwrap();
            prop_assert!(i.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn ispline_monotone((k, kappa) in knots_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let aug = augment_knots(&k, kappa).unwrap();
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            let ia = aug.ispline(k.lower() + a * k.span()).unwrap();
            let ib = aug.ispline(k.lower() + b * k.span()).unwrap();
            for (x, y) in ia.iter().zip(&ib) {
                prop_assert!(*x <= *y + 1e-14);
            }
        }
    }
}
