use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dot, extended_rows};
use crate::basis::{augment_knots, AugmentedKnots, KnotVector};
use crate::data::Record;
use crate::error::{Error, Result};
use crate::priors::constant_hazard_simplex;

/// Hazard `exp(log_rate) * coefficients' M(t)`, extended beyond the upper
/// boundary knot by a constant hazard.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineHazard {
    knots: KnotVector,
    aug: AugmentedKnots,
    coefficients: Vec<f64>,
    log_rate: f64,
}

impl SplineHazard {
    pub fn new(knots: KnotVector, kappa: usize, coefficients: Vec<f64>, log_rate: f64) -> Result<Self> {
        let aug = augment_knots(&knots, kappa)?;
        if coefficients.len() != aug.dim() {
            return Err(Error::Dimension(format!(
                "expected {} coefficients, got {}",
                aug.dim(),
                coefficients.len()
            )));
        }
        let sum: f64 = coefficients.iter().sum();
        if coefficients.iter().any(|c| !(*c >= 0.0)) || (sum - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument("coefficients must form a simplex".into()));
        }
        if !log_rate.is_finite() {
            return Err(Error::NonFinite("log rate".into()));
        }
        Ok(Self { knots, aug, coefficients, log_rate })
    }

    /// Constant hazard `rate` over the knot span and beyond.
    pub fn constant(knots: KnotVector, kappa: usize, rate: f64) -> Result<Self> {
        if !(rate > 0.0) {
            return Err(Error::InvalidArgument(format!("rate must be positive, got {rate}")));
        }
        let coef = constant_hazard_simplex(&knots, kappa)?;
        let log_rate = (rate * knots.span()).ln();
        Self::new(knots, kappa, coef, log_rate)
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn kappa(&self) -> usize {
        self.aug.kappa()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn log_rate(&self) -> f64 {
        self.log_rate
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.knots.lower()) {
            return Err(Error::TimeOutOfRange {
                time: t,
                lower: self.knots.lower(),
                upper: f64::INFINITY,
            });
        }
        Ok(())
    }

    pub fn hazard(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let (m, _) = extended_rows(&self.aug, t)?;
        Ok(self.log_rate.exp() * dot(&m, &self.coefficients))
    }

    pub fn cumulative_hazard(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let (_, i) = extended_rows(&self.aug, t)?;
        Ok(self.log_rate.exp() * dot(&i, &self.coefficients))
    }

    pub fn survival(&self, t: f64) -> Result<f64> {
        Ok((-self.cumulative_hazard(t)?).exp())
    }

    /// Time at which the survival function equals `u` (inverse CDF at `1 - u`).
    pub fn quantile_time(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u <= 1.0) {
            return Err(Error::InvalidArgument(format!("survival level must be in (0, 1], got {u}")));
        }
        let target = -u.ln();
        let lower = self.knots.lower();
        let upper = self.knots.upper();
        if target == 0.0 {
            return Ok(lower);
        }
        let h_upper = self.cumulative_hazard(upper)?;
        if target >= h_upper {
            let rate = self.hazard(upper)?;
            if rate <= 0.0 {
                return Ok(f64::INFINITY);
            }
            return Ok(upper + (target - h_upper) / rate);
        }
        let (mut a, mut b) = (lower, upper);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.cumulative_hazard(mid)? < target {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= 1e-14 * upper.max(1.0) {
                break;
            }
        }
        Ok(0.5 * (a + b))
    }
}

/// Independent survival times by inversion, with optional administrative
/// censoring. Returns `(time, event)` pairs.
pub fn simulate_survival(hazard: &SplineHazard, n: usize, seed: u64, censor_at: Option<f64>) -> Result<Vec<(f64, bool)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with(hazard, n, &mut rng, censor_at)
}

fn simulate_with<R: Rng>(hazard: &SplineHazard, n: usize, rng: &mut R, censor_at: Option<f64>) -> Result<Vec<(f64, bool)>> {
    if let Some(c) = censor_at {
        if !(c > hazard.knots.lower()) {
            return Err(Error::InvalidArgument(format!("censoring time {c} precedes the lower boundary")));
        }
    }
    (0..n)
        .map(|_| {
            let u: f64 = 1.0 - rng.random::<f64>();
            let t = hazard.quantile_time(u)?;
            match censor_at {
                Some(c) if t > c => Ok((c, false)),
                _ if !t.is_finite() => Err(Error::InvalidArgument(
                    "hazard vanishes beyond the last knot; a censoring time is required".into(),
                )),
                _ => Ok((t, true)),
            }
        })
        .collect()
}

/// Simulated records for one arm of a study.
pub fn simulate_arm<R: Rng>(
    hazard: &SplineHazard,
    study: usize,
    treatment: usize,
    n: usize,
    rng: &mut R,
    censor_at: Option<f64>,
) -> Result<Vec<Record>> {
    Ok(simulate_with(hazard, n, rng, censor_at)?
        .into_iter()
        .map(|(time, event)| Record { study, treatment, time, event, covariates: vec![] })
        .collect())
}
