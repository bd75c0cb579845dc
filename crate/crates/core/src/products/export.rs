use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GridBasis, Ribbon};
use crate::error::{Error, Result};
use crate::model::{Family, NmaModel};
use crate::priors::softmax_unchecked;
use crate::sampler::PosteriorDraws;
use crate::stats::{cholesky, quantile_sorted, sort_floats};

/// Multivariate Normal summary of `(alpha_star, eta)` for one treatment in
/// one population. `alpha_star` are the inverse-softmax spline coefficients
/// and `eta` the log rate; the joint vector is `[alpha_star..., eta]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvnEntry {
    pub population: String,
    pub treatment: String,
    pub mean: Vec<f64>,
    /// Row-major covariance of the joint vector.
    pub covariance: Vec<f64>,
}

impl MvnEntry {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvnExport {
    pub kappa: usize,
    /// Boundary and internal knots (lower, internal..., upper).
    pub knots: Vec<f64>,
    pub covariates: Option<Vec<f64>>,
    pub grid: Vec<f64>,
    /// I-spline basis on the grid, `grid.len()` rows by `n_basis` columns,
    /// continued linearly beyond the upper boundary.
    pub ispline_grid: Vec<f64>,
    pub n_basis: usize,
    pub entries: Vec<MvnEntry>,
}

/// Sample means and covariances of the inverse-softmax coefficients and log
/// rates, with the I-spline basis on a grid so that survival curves can be
/// rebuilt as `exp(-exp(eta) * I(t) softmax(alpha_star))`.
pub fn export_mvn(
    model: &NmaModel,
    draws: &PosteriorDraws,
    population: usize,
    treatments: &[usize],
    grid: &[f64],
    covariates: Option<&[f64]>,
) -> Result<MvnExport> {
    if model.spec().family == Family::NphStratified {
        return Err(Error::Spec(
            "the multivariate Normal export needs the proportional or coefficient-effects family".into(),
        ));
    }
    let data = model.data();
    let aug = model.population_knots(population, 0, covariates)?.clone();
    let basis = GridBasis::new(&aug, grid)?;
    let mut entries = Vec::new();
    for &k in treatments {
        let label = format!("{}:{}", data.study_labels()[population], data.treatment_labels()[k]);
        let mut rows = Vec::with_capacity(draws.n_draws());
        for theta in draws.iter_draws() {
            let mut v = model.population_alpha_star(theta, population, k, covariates)?;
            v.push(model.population_linear_predictor(theta, population, k, covariates)?);
            rows.push(v);
        }
        let (mean, covariance) = mean_cov(&rows);
        if cholesky(&covariance, mean.len()).is_none() {
            return Err(Error::DegenerateCovariance(label));
        }
        entries.push(MvnEntry {
            population: data.study_labels()[population].clone(),
            treatment: data.treatment_labels()[k].clone(),
            mean,
            covariance,
        });
    }
    let kv = model.spec().knots.for_study(population);
    Ok(MvnExport {
        kappa: aug.kappa(),
        knots: kv.all(),
        covariates: covariates.map(|x| x.to_vec()),
        grid: grid.to_vec(),
        ispline_grid: basis.i,
        n_basis: basis.n_basis,
        entries,
    })
}

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let p = rows[0].len();
    let mean: Vec<f64> = (0..p).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; p * p];
    for r in rows {
        for i in 0..p {
            for j in 0..=i {
                cov[i * p + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1.0).max(1.0);
    for i in 0..p {
        for j in 0..=i {
            let v = cov[i * p + j] / denom;
            cov[i * p + j] = v;
            cov[j * p + i] = v;
        }
    }
    (mean, cov)
}

fn survival_row(export: &MvnExport, alpha_star: &[f64], eta: f64, out: &mut [f64]) {
    let alpha = softmax_unchecked(alpha_star);
    let nb = export.n_basis;
    let rate = eta.exp();
    for (t, o) in out.iter_mut().enumerate() {
        let row = &export.ispline_grid[t * nb..(t + 1) * nb];
        *o = (-rate * row.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>()).exp();
    }
}

impl MvnExport {
    /// Survival medians on the grid from `n` draws of the Normal approximation.
    pub fn resampled_median(&self, entry: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
        let e = &self.entries[entry];
        let p = e.dim();
        let chol = cholesky(&e.covariance, p)
            .ok_or_else(|| Error::DegenerateCovariance(format!("{}:{}", e.population, e.treatment)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nt = self.grid.len();
        let mut surv = vec![0.0; n * nt];
        let mut x = vec![0.0; p];
        for d in 0..n {
            let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..p {
                x[i] = e.mean[i] + (0..=i).map(|j| chol[i * p + j] * z[j]).sum::<f64>();
            }
            survival_row(self, &x[..p - 1], x[p - 1], &mut surv[d * nt..(d + 1) * nt]);
        }
        Ok(Ribbon::from_draws(&self.grid, &surv).median)
    }
}

/// Largest absolute gap, per entry, between the survival median implied by
/// the Normal approximation and the exact posterior median.
pub fn round_trip_gaps(
    model: &NmaModel,
    draws: &PosteriorDraws,
    export: &MvnExport,
    population: usize,
    treatments: &[usize],
    n_resample: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let nt = export.grid.len();
    let cov = export.covariates.as_deref();
    let mut gaps = Vec::new();
    for (e, &k) in treatments.iter().enumerate() {
        let mut exact = vec![0.0; nt];
        let mut col: Vec<Vec<f64>> = vec![Vec::with_capacity(draws.n_draws()); nt];
        for theta in draws.iter_draws() {
            let a = model.population_alpha_star(theta, population, k, cov)?;
            let eta = model.population_linear_predictor(theta, population, k, cov)?;
            survival_row(export, &a, eta, &mut exact);
            for t in 0..nt {
                col[t].push(exact[t]);
            }
        }
        let medians: Vec<f64> = col
            .iter_mut()
            .map(|c| {
                sort_floats(c);
                quantile_sorted(c, 0.5)
            })
            .collect();
        let approx = export.resampled_median(e, n_resample, seed)?;
        gaps.push(medians.iter().zip(&approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(gaps)
}

/// Formats with 17 significant digits, which round-trips any `f64` exactly.
pub fn format_exact(x: f64) -> String {
    format!("{x:.16e}")
}
