//! Posterior summaries: survival and hazard curves, log hazard ratios,
//! leave-one-out cross-validation, survival-time simulation and the
//! multivariate Normal export.

mod curves;
mod export;
mod loo;
mod simulate;

pub use curves::{log_hazard_ratio_curves, predict_curves};
pub use export::{export_mvn, format_exact, round_trip_gaps, MvnEntry, MvnExport};
pub use loo::{psis_loo, psis_smooth, LooPoint, LooReport, PARETO_K_WARN};
pub use simulate::{simulate_arm, simulate_survival, SplineHazard};

use serde::{Deserialize, Serialize};

use crate::basis::AugmentedKnots;
use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, sort_floats};

/// Default number of evenly spaced grid points.
pub const DEFAULT_GRID_POINTS: usize = 200;

/// Interval levels reported in every ribbon.
pub const RIBBON_LEVELS: [f64; 3] = [0.5, 0.8, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Survival,
    Hazard,
    CumulativeHazard,
    LogHazardRatio,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Survival => "survival",
            Quantity::Hazard => "hazard",
            Quantity::CumulativeHazard => "cumulative_hazard",
            Quantity::LogHazardRatio => "log_hazard_ratio",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Pointwise posterior (or prior) median and central intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ribbon {
    pub times: Vec<f64>,
    pub median: Vec<f64>,
    pub intervals: Vec<Interval>,
}

impl Ribbon {
    /// Summarises `values[d * times.len() + t]` over draws `d`.
    pub fn from_draws(times: &[f64], values: &[f64]) -> Self {
        let nt = times.len();
        let nd = values.len() / nt.max(1);
        let mut median = Vec::with_capacity(nt);
        let mut intervals: Vec<Interval> = RIBBON_LEVELS
            .iter()
            .map(|&level| Interval { level, lower: vec![], upper: vec![] })
            .collect();
        let mut col = vec![0.0; nd];
        for t in 0..nt {
            for d in 0..nd {
                col[d] = values[d * nt + t];
            }
            sort_floats(&mut col);
            median.push(quantile_sorted(&col, 0.5));
            for iv in intervals.iter_mut() {
                let a = (1.0 - iv.level) / 2.0;
                iv.lower.push(quantile_sorted(&col, a));
                iv.upper.push(quantile_sorted(&col, 1.0 - a));
            }
        }
        Self { times: times.to_vec(), median, intervals }
    }

    pub fn interval(&self, level: f64) -> Option<&Interval> {
        self.intervals.iter().find(|i| (i.level - level).abs() < 1e-12)
    }
}

/// A summarised curve for one treatment in one study population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEstimate {
    pub quantity: Quantity,
    pub population: String,
    pub treatment: String,
    /// Comparator for log hazard ratios.
    pub reference: Option<String>,
    /// Covariate values the curve conditions on, if any.
    pub covariates: Option<Vec<f64>>,
    pub ribbon: Ribbon,
}

/// Evenly spaced points on `[0, horizon]` merged with the knots inside it.
pub fn default_grid(horizon: f64, knots: &[f64], n_points: usize) -> Result<Vec<f64>> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("grid horizon must be positive, got {horizon}")));
    }
    let n = n_points.max(2);
    let mut grid: Vec<f64> = (0..n).map(|i| horizon * i as f64 / (n - 1) as f64).collect();
    grid.extend(knots.iter().copied().filter(|k| *k >= 0.0 && *k <= horizon));
    sort_floats(&mut grid);
    grid.dedup();
    Ok(grid)
}

/// M-spline and I-spline rows at `t`, continued beyond the upper boundary by
/// a constant hazard equal to the left limit at the boundary.
pub fn extended_rows(aug: &AugmentedKnots, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let upper = aug.upper();
    if t > upper {
        let m = aug.mspline(upper)?;
        let mut i = aug.ispline(upper)?;
        for (iv, mv) in i.iter_mut().zip(&m) {
            *iv += (t - upper) * mv;
        }
        return Ok((m, i));
    }
    Ok((aug.mspline(t)?, aug.ispline(t)?))
}

/// Extended basis rows over a grid, stored row-major.
#[derive(Debug, Clone)]
pub(crate) struct GridBasis {
    pub n_basis: usize,
    pub m: Vec<f64>,
    pub i: Vec<f64>,
}

impl GridBasis {
    pub fn new(aug: &AugmentedKnots, grid: &[f64]) -> Result<Self> {
        let n_basis = aug.dim();
        let mut m = Vec::with_capacity(grid.len() * n_basis);
        let mut i = Vec::with_capacity(grid.len() * n_basis);
        for &t in grid {
            let (mr, ir) = extended_rows(aug, t)?;
            m.extend(mr);
            i.extend(ir);
        }
        Ok(Self { n_basis, m, i })
    }

    pub fn hazard(&self, t: usize, alpha: &[f64]) -> f64 {
        dot(&self.m[t * self.n_basis..(t + 1) * self.n_basis], alpha)
    }

    pub fn cumulative(&self, t: usize, alpha: &[f64]) -> f64 {
        dot(&self.i[t * self.n_basis..(t + 1) * self.n_basis], alpha)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
