use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sampler::PosteriorDraws;
use crate::stats::log_sum_exp;

/// Pareto shape above which importance sampling is unreliable.
pub const PARETO_K_WARN: f64 = 0.7;

/// Fraction of the largest importance ratios used for the tail fit.
const TAIL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooPoint {
    pub study: String,
    pub elpd: f64,
    /// Log pointwise predictive density from the full posterior.
    pub lpd: f64,
    /// Fitted Pareto shape; `None` when the ratios have no tail to fit.
    pub pareto_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub points: Vec<LooPoint>,
    /// `(study, LOOIC)` in study order.
    pub per_study: Vec<(String, f64)>,
    pub elpd: f64,
    pub looic: f64,
    pub se_looic: f64,
    pub p_loo: f64,
    pub n_high_k: usize,
    pub warnings: Vec<String>,
}

/// Generalized Pareto fit of exceedances `x` (sorted ascending, positive)
/// by the profile empirical Bayes method, with the shape shrunk toward 0.5.
/// Returns `(shape, scale)`.
fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let prior = 3.0;
    let m = 30 + (nf.sqrt() as usize);
    let xstar = x[((nf / 4.0 + 0.5).floor() as usize).max(1) - 1];
    let xmax = x[n - 1];
    let thetas: Vec<f64> = (1..=m)
        .map(|j| 1.0 / xmax + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / (prior * xstar))
        .collect();
    let profile = |theta: f64| -> f64 {
        let k = x.iter().map(|v| (-theta * v).ln_1p()).sum::<f64>() / nf;
        nf * ((-theta / k).ln() - k - 1.0)
    };
    let ll: Vec<f64> = thetas.iter().map(|&t| profile(t)).collect();
    let lse = log_sum_exp(&ll);
    let theta_hat: f64 = thetas.iter().zip(&ll).map(|(t, l)| t * (l - lse).exp()).sum();
    let k = x.iter().map(|v| (-theta_hat * v).ln_1p()).sum::<f64>() / nf;
    let sigma = -k / theta_hat;
    let k = (nf * k + 10.0 * 0.5) / (nf + 10.0);
    (k, sigma)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

/// Pareto-smoothed log importance weights (normalised). Returns the weights
/// and the fitted shape.
pub fn psis_smooth(log_ratios: &[f64]) -> (Vec<f64>, Option<f64>) {
    let s = log_ratios.len();
    let max = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|r| r - max).collect();
    let tail_len = (TAIL_FRACTION * s as f64).ceil() as usize;
    let mut k = None;
    if tail_len >= 5 && tail_len < s {
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
        let tail_idx = &order[s - tail_len..];
        let cutoff = lw[order[s - tail_len - 1]];
        let exp_cut = cutoff.exp();
        let exceed: Vec<f64> = tail_idx.iter().map(|&i| lw[i].exp() - exp_cut).collect();
        if exceed.iter().all(|e| *e > 0.0) && exceed[0] < exceed[tail_len - 1] {
            let (shape, sigma) = gpd_fit(&exceed);
            if shape.is_finite() && sigma.is_finite() && sigma > 0.0 {
                for (j, &i) in tail_idx.iter().enumerate() {
                    let p = (j as f64 + 0.5) / tail_len as f64;
                    lw[i] = (gpd_quantile(p, shape, sigma) + exp_cut).ln().min(0.0);
                }
                k = Some(shape);
            } else {
                k = Some(f64::INFINITY);
            }
        }
    }
    let norm = log_sum_exp(&lw);
    lw.iter_mut().for_each(|v| *v -= norm);
    (lw, k)
}

/// Pareto-smoothed importance-sampling leave-one-out cross-validation over
/// the pointwise log-likelihoods stored with the draws. `record_study[i]`
/// indexes `study_labels`.
pub fn psis_loo(draws: &PosteriorDraws, record_study: &[usize], study_labels: &[String]) -> LooReport {
    let n = draws.n_records;
    let s = draws.n_draws();
    let points: Vec<LooPoint> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ll: Vec<f64> = (0..s).map(|d| draws.pointwise[d * n + i]).collect();
            let neg: Vec<f64> = ll.iter().map(|v| -v).collect();
            let (lw, k) = psis_smooth(&neg);
            let terms: Vec<f64> = lw.iter().zip(&ll).map(|(w, l)| w + l).collect();
            LooPoint {
                study: study_labels[record_study[i]].clone(),
                elpd: log_sum_exp(&terms),
                lpd: log_sum_exp(&ll) - (s as f64).ln(),
                pareto_k: k,
            }
        })
        .collect();
    let mut per_study: Vec<(String, f64)> = study_labels.iter().map(|l| (l.clone(), 0.0)).collect();
    for (p, &j) in points.iter().zip(record_study) {
        per_study[j].1 += -2.0 * p.elpd;
    }
    per_study.retain(|(label, _)| points.iter().any(|p| &p.study == label));
    let elpd: f64 = points.iter().map(|p| p.elpd).sum();
    let lpd: f64 = points.iter().map(|p| p.lpd).sum();
    let mean = elpd / n as f64;
    let var = points.iter().map(|p| (p.elpd - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
    let n_high_k = points.iter().filter(|p| p.pareto_k.is_some_and(|k| k > PARETO_K_WARN)).count();
    let mut warnings = Vec::new();
    if n_high_k > 0 {
        let msg = format!("{n_high_k} record(s) have Pareto k > {PARETO_K_WARN}; LOO estimates for them are unreliable");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    LooReport {
        points,
        per_study,
        elpd,
        looic: -2.0 * elpd,
        se_looic: 2.0 * (n as f64 * var).sqrt(),
        p_loo: lpd - elpd,
        n_high_k,
        warnings,
    }
}
