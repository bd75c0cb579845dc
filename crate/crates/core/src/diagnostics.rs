//! Convergence diagnostics: rank-normalized split-R-hat and bulk/tail
//! effective sample sizes.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::sampler::PosteriorDraws;
use crate::stats::{quantile_sorted, sort_floats};

/// Threshold above which R-hat is flagged.
pub const RHAT_THRESHOLD: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `None` when undefined (for example, constant chains).
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    pub ess_tail: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
    pub n_divergent: usize,
    pub depth_saturation: f64,
    pub max_rhat: Option<f64>,
    pub min_ess_bulk: Option<f64>,
    pub n_flagged: usize,
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        let off = c.len() % 2;
        out.push(c[..half].to_vec());
        out.push(c[half + off..].to_vec());
    }
    out
}

/// Classic R-hat of already split chains.
fn rhat_basic(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if !(w > 0.0) || !w.is_finite() {
        return None;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

/// Normal scores of pooled fractional ranks (average ranks for ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = chains.concat();
    let s = all.len();
    let mut idx: Vec<usize> = (0..s).collect();
    idx.sort_by(|&a, &b| all[a].total_cmp(&all[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && all[idx[j + 1]] == all[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z: Vec<f64> = ranks
        .iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (s as f64 + 0.25)))
        .collect();
    let n = chains[0].len();
    z.chunks(n).map(|c| c.to_vec()).collect()
}

fn autocov(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let acov_mean = |lag: usize| -> f64 {
        chains.iter().zip(&means).map(|(c, mu)| autocov(c, *mu, lag)).sum::<f64>() / m as f64
    };
    let acov0: Vec<f64> = chains.iter().zip(&means).map(|(c, mu)| autocov(c, *mu, 0)).collect();
    let mean_var = acov0.iter().sum::<f64>() / m as f64 * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        let grand = means.iter().sum::<f64>() / m as f64;
        var_plus += means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return None;
    }
    let rho = |lag: usize| 1.0 - (mean_var - acov_mean(lag)) / var_plus;
    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut t = 1;
    while t + 2 < n.saturating_sub(3) && even + odd > 0.0 {
        even = rho(t + 1);
        odd = rho(t + 2);
        if even + odd >= 0.0 {
            rho_hat[t + 1] = even;
            rho_hat[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho_hat[max_t + 1] = even;
    }
    // Enforce a monotone sequence of paired sums.
    let mut t = 1;
    while t + 4 <= max_t {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0;
            rho_hat[t + 2] = rho_hat[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho_hat[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    Some(total / tau)
}

/// Rank-normalized split-R-hat: the larger of the bulk and folded versions.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let sp = split(chains);
    if sp.len() < 2 || sp[0].len() < 2 {
        return None;
    }
    let bulk = rhat_basic(&rank_normalize(&sp))?;
    let all: Vec<f64> = sp.concat();
    let mut sorted = all.clone();
    sort_floats(&mut sorted);
    let med = quantile_sorted(&sorted, 0.5);
    let folded: Vec<Vec<f64>> = sp.iter().map(|c| c.iter().map(|x| (x - med).abs()).collect()).collect();
    let tail = rhat_basic(&rank_normalize(&folded)).unwrap_or(bulk);
    Some(bulk.max(tail))
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|x| *x == first)
}

pub fn ess_bulk(chains: &[Vec<f64>]) -> Option<f64> {
    if is_constant(chains) {
        return None;
    }
    ess(&rank_normalize(&split(chains)))
}

/// Minimum of the effective sample sizes of the 5% and 95% quantile indicators.
pub fn ess_tail(chains: &[Vec<f64>]) -> Option<f64> {
    if is_constant(chains) {
        return None;
    }
    let sp = split(chains);
    let mut sorted = sp.concat();
    sort_floats(&mut sorted);
    let mut out = f64::INFINITY;
    for p in [0.05, 0.95] {
        let q = quantile_sorted(&sorted, p);
        let ind: Vec<Vec<f64>> = sp
            .iter()
            .map(|c| c.iter().map(|x| if *x <= q { 1.0 } else { 0.0 }).collect())
            .collect();
        out = out.min(ess(&ind)?);
    }
    Some(out)
}

pub fn param_diagnostics(name: &str, chains: &[Vec<f64>]) -> ParamDiagnostics {
    let all: Vec<f64> = chains.concat();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let rhat = if is_constant(chains) { None } else { split_rhat(chains) };
    ParamDiagnostics {
        name: name.to_string(),
        mean,
        sd,
        rhat,
        ess_bulk: ess_bulk(chains),
        ess_tail: ess_tail(chains),
        flagged: rhat.is_some_and(|r| r > RHAT_THRESHOLD),
    }
}

/// Diagnostics for every parameter.
pub fn diagnostics(draws: &PosteriorDraws) -> DiagnosticsReport {
    let params: Vec<ParamDiagnostics> = (0..draws.dim())
        .map(|p| param_diagnostics(&draws.param_names[p], &draws.chains_of(p)))
        .collect();
    let max_rhat = params.iter().filter_map(|p| p.rhat).fold(None, |a: Option<f64>, r| Some(a.map_or(r, |a| a.max(r))));
    let min_ess_bulk = params
        .iter()
        .filter_map(|p| p.ess_bulk)
        .fold(None, |a: Option<f64>, r| Some(a.map_or(r, |a| a.min(r))));
    DiagnosticsReport {
        n_flagged: params.iter().filter(|p| p.flagged).count(),
        params,
        n_divergent: draws.n_divergent(),
        depth_saturation: draws.depth_saturation(),
        max_rhat,
        min_ess_bulk,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(seed: u64, m: usize, n: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|c| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + shift * c as f64).collect())
            .collect()
    }

    #[test]
    fn constant_chains_have_undefined_rhat() {
        let chains = vec![vec![1.5; 200]; 4];
        let d = param_diagnostics("x", &chains);
        assert_eq!(d.rhat, None);
        assert_eq!(d.ess_bulk, None);
        assert!(!d.flagged);
    }

    #[test]
    fn iid_draws_are_converged() {
        for seed in 0..5 {
            let chains = iid(seed, 4, 1000, 0.0);
            let r = split_rhat(&chains).unwrap();
            assert!((0.99..=1.01).contains(&r), "rhat {r}");
            let e = ess_bulk(&chains).unwrap();
            assert!((e / 4000.0 - 1.0).abs() < 0.2, "ess {e}");
            let t = ess_tail(&chains).unwrap();
            assert!((t / 4000.0 - 1.0).abs() < 0.25, "tail ess {t}");
        }
    }

    #[test]
    fn shifted_chains_are_flagged() {
        let chains = iid(1, 4, 500, 1.0);
        let d = param_diagnostics("x", &chains);
        assert!(d.rhat.unwrap() > 1.1);
        assert!(d.flagged);
    }

    #[test]
    fn autocorrelated_chain_has_reduced_ess() {
        // AR(1) with coefficient 0.9: ESS ratio (1 - 0.9) / (1 + 0.9).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess(&chains).unwrap();
        let expected = 20000.0 * 0.1 / 1.9;
        assert!((e / expected - 1.0).abs() < 0.25, "{e} vs {expected}");
    }
}
