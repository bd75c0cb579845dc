//! Monte Carlo draws of baseline hazard curves implied by alternative
//! priors on the spline coefficients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{augment_knots, KnotVector};
use crate::error::{Error, Result};
use crate::priors::{constant_hazard_phi, softmax_unchecked, weights_for_order};
use crate::products::{dot, Ribbon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorVariant {
    /// Flat Dirichlet on the simplex coefficients.
    Dirichlet,
    /// Exchangeable `alpha_star ~ Normal(phi, sigma^2 I)`.
    RandomEffect,
    /// Random walk around `phi` with unit increment variances.
    UnweightedRw,
    /// Random walk around `phi` with knot-gap weights.
    WeightedRw,
}

impl PriorVariant {
    pub const ALL: [PriorVariant; 4] = [
        PriorVariant::Dirichlet,
        PriorVariant::RandomEffect,
        PriorVariant::UnweightedRw,
        PriorVariant::WeightedRw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PriorVariant::Dirichlet => "dirichlet",
            PriorVariant::RandomEffect => "random_effect",
            PriorVariant::UnweightedRw => "unweighted_rw",
            PriorVariant::WeightedRw => "weighted_rw",
        }
    }
}

fn half_normal<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sd * z.abs()
}

/// Unit-rate baseline hazards on `grid` for `n_draws` prior draws, flattened
/// as `[draw][time]`. Scale parameters are half-Normal with SD `sigma_sd`.
pub fn sample_prior_hazards(
    knots: &KnotVector,
    kappa: usize,
    variant: PriorVariant,
    n_draws: usize,
    sigma_sd: f64,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    if grid.iter().any(|t| !knots.contains(*t)) {
        return Err(Error::InvalidArgument("prior hazard grid must lie within the knots".into()));
    }
    let aug = augment_knots(knots, kappa)?;
    let n = aug.dim();
    let rows: Vec<Vec<f64>> = grid.iter().map(|&t| aug.mspline(t)).collect::<Result<_>>()?;
    let phi = constant_hazard_phi(knots, kappa)?;
    let sqrt_w: Vec<f64> = match variant {
        PriorVariant::WeightedRw => weights_for_order(knots, kappa)?.iter().map(|w| w.sqrt()).collect(),
        _ => vec![1.0; n - 1],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_draws * grid.len());
    let mut alpha_star = vec![0.0; n - 1];
    for _ in 0..n_draws {
        let alpha = match variant {
            PriorVariant::Dirichlet => {
                let g: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
                let s: f64 = g.iter().sum();
                g.iter().map(|x| x / s).collect()
            }
            PriorVariant::RandomEffect => {
                let sigma = half_normal(&mut rng, sigma_sd);
                for l in 0..n - 1 {
                    let z: f64 = rng.sample(StandardNormal);
                    alpha_star[l] = phi[l] + sigma * z;
                }
                softmax_unchecked(&alpha_star)
            }
            PriorVariant::UnweightedRw | PriorVariant::WeightedRw => {
                let sigma = half_normal(&mut rng, sigma_sd);
                let mut acc = 0.0;
                for l in 0..n - 1 {
                    let z: f64 = rng.sample(StandardNormal);
                    acc += sigma * sqrt_w[l] * z;
                    alpha_star[l] = phi[l] + acc;
                }
                softmax_unchecked(&alpha_star)
            }
        };
        out.extend(rows.iter().map(|m| dot(m, &alpha)));
    }
    Ok(out)
}

/// Pointwise ribbons of prior hazard draws.
pub fn prior_hazard_ribbon(
    knots: &KnotVector,
    kappa: usize,
    variant: PriorVariant,
    n_draws: usize,
    sigma_sd: f64,
    grid: &[f64],
    seed: u64,
) -> Result<Ribbon> {
    let h = sample_prior_hazards(knots, kappa, variant, n_draws, sigma_sd, grid, seed)?;
    Ok(Ribbon::from_draws(grid, &h))
}

/// Prior log hazard ratio curves between a treatment and the reference under
/// the non-proportionality random walk, around a constant baseline hazard.
/// Flattened `[draw][time]`.
pub fn sample_prior_log_hr(
    knots: &KnotVector,
    kappa: usize,
    n_draws: usize,
    sigma_sd: f64,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    if grid.iter().any(|t| !knots.contains(*t)) {
        return Err(Error::InvalidArgument("prior hazard grid must lie within the knots".into()));
    }
    let aug = augment_knots(knots, kappa)?;
    let n = aug.dim();
    let rows: Vec<Vec<f64>> = grid.iter().map(|&t| aug.mspline(t)).collect::<Result<_>>()?;
    let phi = constant_hazard_phi(knots, kappa)?;
    let sqrt_w: Vec<f64> = weights_for_order(knots, kappa)?.iter().map(|w| w.sqrt()).collect();
    let base = softmax_unchecked(&phi);
    let base_h: Vec<f64> = rows.iter().map(|m| dot(m, &base)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_draws * grid.len());
    let mut shifted = vec![0.0; n - 1];
    for _ in 0..n_draws {
        let sigma = half_normal(&mut rng, sigma_sd);
        // Reference and treatment share a component, giving correlation 0.5.
        let (mut g_ref, mut g_trt) = (0.0, 0.0);
        for l in 0..n - 1 {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let s = sigma * sqrt_w[l] * std::f64::consts::FRAC_1_SQRT_2;
            g_ref += s * (z1 + z0);
            g_trt += s * (z2 + z0);
            shifted[l] = phi[l] + g_trt - g_ref;
        }
        let alpha = softmax_unchecked(&shifted);
        out.extend(rows.iter().zip(&base_h).map(|(m, b)| dot(m, &alpha).ln() - b.ln()));
    }
    Ok(out)
}

/// 95th percentile over draws of `max_t h(t) / min_t h(t)` on the grid.
pub fn hazard_ratio_range_quantile(hazards: &[f64], n_times: usize, p: f64) -> f64 {
    let mut ratios: Vec<f64> = hazards
        .chunks(n_times)
        .map(|c| {
            let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = c.iter().cloned().fold(f64::INFINITY, f64::min);
            max / min
        })
        .collect();
    crate::stats::sort_floats(&mut ratios);
    crate::stats::quantile_sorted(&ratios, p)
}

/// Deterministic stream for variant `v` under a base seed.
pub fn variant_seed(seed: u64, variant: PriorVariant) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(variant as u64 + 1);
    rng.random()
}
