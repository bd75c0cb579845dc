use rayon::prelude::*;

use super::{CurveEstimate, GridBasis, Quantity, Ribbon};
use crate::error::{Error, Result};
use crate::model::NmaModel;
use crate::priors::softmax_unchecked;
use crate::sampler::PosteriorDraws;

/// Coefficients and log rate of one treatment in a population, per draw.
struct ArmDraws {
    basis: GridBasis,
    alpha: Vec<Vec<f64>>,
    eta: Vec<f64>,
}

fn arm_draws(
    model: &NmaModel,
    draws: &PosteriorDraws,
    population: usize,
    treatment: usize,
    grid: &[f64],
    covariates: Option<&[f64]>,
) -> Result<ArmDraws> {
    let aug = model.population_knots(population, treatment, covariates)?;
    let basis = GridBasis::new(aug, grid)?;
    let per: Vec<(Vec<f64>, f64)> = (0..draws.n_draws())
        .into_par_iter()
        .map(|d| {
            let theta = draws.draw(d);
            let a = model.population_alpha_star(theta, population, treatment, covariates)?;
            let eta = model.population_linear_predictor(theta, population, treatment, covariates)?;
            Ok((softmax_unchecked(&a), eta))
        })
        .collect::<Result<_>>()?;
    let (alpha, eta) = per.into_iter().unzip();
    Ok(ArmDraws { basis, alpha, eta })
}

fn check_request(model: &NmaModel, population: usize, treatments: &[usize], grid: &[f64]) -> Result<()> {
    if population >= model.data().n_studies() {
        return Err(Error::InvalidArgument(format!("population {population} is not a study")));
    }
    if let Some(&t) = treatments.iter().find(|&&t| t >= model.data().n_treatments()) {
        return Err(Error::InvalidArgument(format!("treatment {t} does not exist")));
    }
    if grid.is_empty() || grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidArgument("grid must be nonempty, finite and nonnegative".into()));
    }
    Ok(())
}

/// Survival, hazard and cumulative hazard curves for each treatment in the
/// population of a study. Beyond the upper boundary knot the hazard is held
/// constant at its boundary value.
pub fn predict_curves(
    model: &NmaModel,
    draws: &PosteriorDraws,
    population: usize,
    treatments: &[usize],
    grid: &[f64],
    covariates: Option<&[f64]>,
) -> Result<Vec<CurveEstimate>> {
    check_request(model, population, treatments, grid)?;
    let data = model.data();
    let nt = grid.len();
    let mut out = Vec::with_capacity(3 * treatments.len());
    for &k in treatments {
        let arm = arm_draws(model, draws, population, k, grid, covariates)?;
        let nd = arm.eta.len();
        let mut surv = vec![0.0; nd * nt];
        let mut haz = vec![0.0; nd * nt];
        let mut cum = vec![0.0; nd * nt];
        surv.par_chunks_mut(nt)
            .zip(haz.par_chunks_mut(nt))
            .zip(cum.par_chunks_mut(nt))
            .enumerate()
            .for_each(|(d, ((s, h), c))| {
                let rate = arm.eta[d].exp();
                for t in 0..nt {
                    let ch = rate * arm.basis.cumulative(t, &arm.alpha[d]);
                    c[t] = ch;
                    s[t] = (-ch).exp();
                    h[t] = rate * arm.basis.hazard(t, &arm.alpha[d]);
                }
            });
        for (quantity, values) in [
            (Quantity::Survival, surv),
            (Quantity::Hazard, haz),
            (Quantity::CumulativeHazard, cum),
        ] {
            out.push(CurveEstimate {
                quantity,
                population: data.study_labels()[population].clone(),
                treatment: data.treatment_labels()[k].clone(),
                reference: None,
                covariates: covariates.map(|x| x.to_vec()),
                ribbon: Ribbon::from_draws(grid, &values),
            });
        }
    }
    Ok(out)
}

/// Per-draw `log h_k(t) - log h_ref(t)` for each treatment other than the
/// reference, in the population of a study.
pub fn log_hazard_ratio_curves(
    model: &NmaModel,
    draws: &PosteriorDraws,
    population: usize,
    treatments: &[usize],
    reference: usize,
    grid: &[f64],
    covariates: Option<&[f64]>,
) -> Result<Vec<CurveEstimate>> {
    check_request(model, population, treatments, grid)?;
    if !treatments.contains(&reference) {
        return Err(Error::InvalidArgument(format!(
            "reference treatment {} is not among the requested treatments",
            model.data().treatment_labels().get(reference).map_or("?", |s| s)
        )));
    }
    let data = model.data();
    let nt = grid.len();
    let base = arm_draws(model, draws, population, reference, grid, covariates)?;
    let mut out = Vec::new();
    for &k in treatments.iter().filter(|&&k| k != reference) {
        let arm = arm_draws(model, draws, population, k, grid, covariates)?;
        let mut values = vec![0.0; arm.eta.len() * nt];
        values.par_chunks_mut(nt).enumerate().for_each(|(d, v)| {
            let shift = arm.eta[d] - base.eta[d];
            for t in 0..nt {
                let lk = arm.basis.hazard(t, &arm.alpha[d]).ln();
                let lr = base.basis.hazard(t, &base.alpha[d]).ln();
                v[t] = shift + (lk - lr);
            }
        });
        out.push(CurveEstimate {
            quantity: Quantity::LogHazardRatio,
            population: data.study_labels()[population].clone(),
            treatment: data.treatment_labels()[k].clone(),
            reference: Some(data.treatment_labels()[reference].clone()),
            covariates: covariates.map(|x| x.to_vec()),
            ribbon: Ribbon::from_draws(grid, &values),
        });
    }
    Ok(out)
}
