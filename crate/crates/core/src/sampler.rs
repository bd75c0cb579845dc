//! Multinomial no-U-turn Hamiltonian Monte Carlo with dual-averaging step
//! size adaptation and windowed metric adaptation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gradient_discrepancy, LogDensity, NmaModel};
use crate::stats::{cholesky, log_sum_exp};

const MAX_DELTA_H: f64 = 1000.0;
const MAX_INIT_ATTEMPTS: usize = 100;
const SELF_CHECK_COORDS: usize = 40;
const SELF_CHECK_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Diagonal,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub warmup: usize,
    pub sampling: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    pub seed: u64,
    pub init_radius: f64,
    pub metric: MetricKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            warmup: 1000,
            sampling: 1000,
            target_accept: 0.8,
            max_depth: 10,
            seed: 1,
            init_radius: 0.5,
            metric: MetricKind::Diagonal,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.sampling == 0 || self.max_depth == 0 {
            return Err(Error::InvalidArgument(
                "chains, sampling iterations and max tree depth must be at least 1".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target acceptance must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if !(self.init_radius >= 0.0) {
            return Err(Error::InvalidArgument("init radius must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mass matrix inverse: either diagonal variances or a dense covariance with
/// its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Metric {
    Diagonal { inv_mass: Vec<f64> },
    Dense { inv_mass: Vec<f64>, chol: Vec<f64> },
}

impl Metric {
    fn unit(dim: usize, kind: MetricKind) -> Self {
        match kind {
            MetricKind::Diagonal => Metric::Diagonal { inv_mass: vec![1.0; dim] },
            MetricKind::Dense => {
                let mut eye = vec![0.0; dim * dim];
                (0..dim).for_each(|i| eye[i * dim + i] = 1.0);
                Metric::Dense { inv_mass: eye.clone(), chol: eye }
            }
        }
    }

    /// Velocity `M^{-1} p`.
    fn velocity(&self, p: &[f64], out: &mut [f64]) {
        match self {
            Metric::Diagonal { inv_mass } => {
                for i in 0..p.len() {
                    out[i] = inv_mass[i] * p[i];
                }
            }
            Metric::Dense { inv_mass, .. } => {
                let n = p.len();
                for i in 0..n {
                    out[i] = (0..n).map(|j| inv_mass[i * n + j] * p[j]).sum();
                }
            }
        }
    }

    /// Draws `p ~ N(0, M)`.
    fn sample_momentum<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let n = out.len();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        match self {
            Metric::Diagonal { inv_mass } => {
                for i in 0..n {
                    out[i] = z[i] / inv_mass[i].sqrt();
                }
            }
            Metric::Dense { chol, .. } => {
                // Solve L^T p = z.
                for i in (0..n).rev() {
                    let s: f64 = (i + 1..n).map(|k| chol[k * n + i] * out[k]).sum();
                    out[i] = (z[i] - s) / chol[i * n + i];
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Integrator<'a, M: LogDensity + ?Sized> {
    target: &'a M,
    metric: Metric,
    v: Vec<f64>,
}

impl<M: LogDensity + ?Sized> Integrator<'_, M> {
    fn kinetic(&mut self, p: &[f64]) -> f64 {
        self.metric.velocity(p, &mut self.v);
        0.5 * p.iter().zip(&self.v).map(|(a, b)| a * b).sum::<f64>()
    }

    fn hamiltonian(&mut self, s: &State) -> f64 {
        let k = self.kinetic(&s.p);
        -s.logp + k
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        self.metric.velocity(p, &mut out);
        out
    }

    /// One leapfrog step. A failed density evaluation leaves `logp = -inf`.
    fn leapfrog(&mut self, s: &mut State, eps: f64) {
        for i in 0..s.p.len() {
            s.p[i] += 0.5 * eps * s.grad[i];
        }
        self.metric.velocity(&s.p, &mut self.v);
        for i in 0..s.q.len() {
            s.q[i] += eps * self.v[i];
        }
        match self.target.logp_grad(&s.q, &mut s.grad) {
            Ok(lp) if lp.is_finite() => {
                s.logp = lp;
                for i in 0..s.p.len() {
                    s.p[i] += 0.5 * eps * s.grad[i];
                }
            }
            _ => {
                s.logp = f64::NEG_INFINITY;
                s.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Statistics for one transition.
#[derive(Debug, Clone, Copy, Default)]
struct Transition {
    accept_stat: f64,
    depth: usize,
    n_leapfrog: usize,
    divergent: bool,
}

struct Tree<'a, 'b, M: LogDensity + ?Sized, R: Rng> {
    integ: &'a mut Integrator<'b, M>,
    rng: &'a mut R,
    eps: f64,
    h0: f64,
    n_leapfrog: usize,
    sum_metro: f64,
    divergent: bool,
}

/// Output slots of a subtree build.
struct Edge {
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    p_beg: Vec<f64>,
    p_end: Vec<f64>,
    rho: Vec<f64>,
    log_w: f64,
}

impl<M: LogDensity + ?Sized, R: Rng> Tree<'_, '_, M, R> {
    /// Builds a subtree of `2^depth` leapfrog steps from `z`, leaving `z` at
    /// the far end. Returns `None` if the subtree is invalid.
    fn build(&mut self, depth: usize, z: &mut State, sign: f64, propose: &mut State) -> Option<Edge> {
        if depth == 0 {
            self.integ.leapfrog(z, sign * self.eps);
            self.n_leapfrog += 1;
            let mut h = self.integ.hamiltonian(z);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            let log_w = self.h0 - h;
            self.sum_metro += if log_w > 0.0 { 1.0 } else { log_w.exp() };
            if self.divergent {
                return None;
            }
            propose.clone_from(z);
            let ps = self.integ.p_sharp(&z.p);
            return Some(Edge {
                p_sharp_beg: ps.clone(),
                p_sharp_end: ps,
                p_beg: z.p.clone(),
                p_end: z.p.clone(),
                rho: z.p.clone(),
                log_w,
            });
        }
        let init = self.build(depth - 1, z, sign, propose)?;
        let mut propose_final = z.clone();
        let fin = self.build(depth - 1, z, sign, &mut propose_final)?;
        let log_w = log_sum_exp(&[init.log_w, fin.log_w]);
        let accept = (fin.log_w - log_w).exp();
        if self.rng.random::<f64>() < accept {
            propose.clone_from(&propose_final);
        }
        let rho = add(&init.rho, &fin.rho);
        let mut persist = no_u_turn(&init.p_sharp_beg, &fin.p_sharp_end, &rho);
        persist &= no_u_turn(&init.p_sharp_beg, &fin.p_sharp_beg, &add(&init.rho, &fin.p_beg));
        persist &= no_u_turn(&init.p_sharp_end, &fin.p_sharp_end, &add(&fin.rho, &init.p_end));
        if !persist {
            return None;
        }
        Some(Edge {
            p_sharp_beg: init.p_sharp_beg,
            p_sharp_end: fin.p_sharp_end,
            p_beg: init.p_beg,
            p_end: fin.p_end,
            rho,
            log_w,
        })
    }
}

fn nuts_transition<M: LogDensity + ?Sized, R: Rng>(
    integ: &mut Integrator<'_, M>,
    rng: &mut R,
    current: &mut State,
    eps: f64,
    max_depth: usize,
) -> Transition {
    integ.metric.sample_momentum(rng, &mut current.p);
    let h0 = integ.hamiltonian(current);
    let ps0 = integ.p_sharp(&current.p);

    let mut fwd = current.clone();
    let mut bck = current.clone();
    let mut sample = current.clone();
    // Edge momenta of the whole trajectory: (sharp, plain) at each end.
    let (mut ps_bck_bck, mut ps_fwd_fwd) = (ps0.clone(), ps0);
    let (mut p_bck_bck, mut p_fwd_fwd) = (current.p.clone(), current.p.clone());
    // Inner edges of the two halves from the latest doubling.
    let (mut ps_bck_fwd, mut ps_fwd_bck, mut p_bck_fwd, mut p_fwd_bck);
    let mut rho = current.p.clone();
    let mut log_w = 0.0;

    let mut tree = Tree {
        integ,
        rng,
        eps,
        h0,
        n_leapfrog: 0,
        sum_metro: 0.0,
        divergent: false,
    };
    let mut depth = 0;
    while depth < max_depth {
        let forward = tree.rng.random::<f64>() > 0.5;
        let mut propose = current.clone();
        let (rho_fwd, rho_bck);
        let sub_log_w;
        if forward {
            let Some(e) = tree.build(depth, &mut fwd, 1.0, &mut propose) else {
                break;
            };
            rho_bck = rho.clone();
            rho_fwd = e.rho;
            p_bck_fwd = std::mem::replace(&mut p_fwd_fwd, e.p_end);
            ps_bck_fwd = std::mem::replace(&mut ps_fwd_fwd, e.p_sharp_end);
            ps_fwd_bck = e.p_sharp_beg;
            p_fwd_bck = e.p_beg;
            sub_log_w = e.log_w;
        } else {
            let Some(e) = tree.build(depth, &mut bck, -1.0, &mut propose) else {
                break;
            };
            rho_fwd = rho.clone();
            rho_bck = e.rho;
            p_fwd_bck = std::mem::replace(&mut p_bck_bck, e.p_end);
            ps_fwd_bck = std::mem::replace(&mut ps_bck_bck, e.p_sharp_end);
            ps_bck_fwd = e.p_sharp_beg;
            p_bck_fwd = e.p_beg;
            sub_log_w = e.log_w;
        }
        depth += 1;
        if sub_log_w > log_w || tree.rng.random::<f64>() < (sub_log_w - log_w).exp() {
            sample = propose;
        }
        log_w = log_sum_exp(&[log_w, sub_log_w]);
        rho = add(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&ps_bck_bck, &ps_fwd_fwd, &rho);
        persist &= no_u_turn(&ps_bck_bck, &ps_fwd_bck, &add(&rho_bck, &p_fwd_bck));
        persist &= no_u_turn(&ps_bck_fwd, &ps_fwd_fwd, &add(&rho_fwd, &p_bck_fwd));
        if !persist {
            break;
        }
    }
    let t = Transition {
        accept_stat: if tree.n_leapfrog > 0 { tree.sum_metro / tree.n_leapfrog as f64 } else { 0.0 },
        depth,
        n_leapfrog: tree.n_leapfrog,
        divergent: tree.divergent,
    };
    *current = sample;
    t
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    fn new(eps: f64, delta: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
            delta,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / GAMMA;
        let x_eta = self.counter.powf(-KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup schedule: an initial fast phase, doubling slow windows that
/// estimate the metric, and a terminal fast phase.
fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    let (mut init, mut term, mut base) = (75usize, 50usize, 25usize);
    if warmup < 20 {
        return vec![];
    }
    if init + term + base > warmup {
        init = (0.15 * warmup as f64) as usize;
        term = (0.1 * warmup as f64) as usize;
        base = warmup - init - term;
    }
    let end = warmup - term;
    let mut windows = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < end {
        let mut stop = start + size;
        if stop + 2 * size > end {
            stop = end;
        }
        windows.push((start, stop));
        start = stop;
        size *= 2;
    }
    windows
}

fn estimate_metric(samples: &[Vec<f64>], kind: MetricKind) -> Metric {
    let n = samples.len() as f64;
    let dim = samples[0].len();
    let mean: Vec<f64> = (0..dim).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let shrink = n / (n + 5.0);
    let ridge = 1e-3 * 5.0 / (n + 5.0);
    match kind {
        MetricKind::Diagonal => {
            let inv_mass = (0..dim)
                .map(|i| {
                    let v = samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0);
                    shrink * v + ridge
                })
                .collect();
            Metric::Diagonal { inv_mass }
        }
        MetricKind::Dense => {
            let mut cov = vec![0.0; dim * dim];
            for s in samples {
                for i in 0..dim {
                    for j in 0..=i {
                        cov[i * dim + j] += (s[i] - mean[i]) * (s[j] - mean[j]);
                    }
                }
            }
            for i in 0..dim {
                for j in 0..=i {
                    let mut v = shrink * cov[i * dim + j] / (n - 1.0);
                    if i == j {
                        v += ridge;
                    }
                    cov[i * dim + j] = v;
                    cov[j * dim + i] = v;
                }
            }
            match cholesky(&cov, dim) {
                Some(chol) => Metric::Dense { inv_mass: cov, chol },
                None => {
                    let inv_mass = (0..dim).map(|i| cov[i * dim + i]).collect();
                    estimate_diag_fallback(inv_mass)
                }
            }
        }
    }
}

fn estimate_diag_fallback(diag: Vec<f64>) -> Metric {
    let dim = diag.len();
    let mut inv_mass = vec![0.0; dim * dim];
    let mut chol = vec![0.0; dim * dim];
    for i in 0..dim {
        inv_mass[i * dim + i] = diag[i];
        chol[i * dim + i] = diag[i].sqrt();
    }
    Metric::Dense { inv_mass, chol }
}

fn initial_step_size<M: LogDensity + ?Sized, R: Rng>(
    integ: &mut Integrator<'_, M>,
    rng: &mut R,
    z: &State,
    mut eps: f64,
) -> Result<f64> {
    let target = 0.8f64.ln();
    let mut direction = 0.0;
    loop {
        let mut s = z.clone();
        integ.metric.sample_momentum(rng, &mut s.p);
        let h0 = integ.hamiltonian(&s);
        integ.leapfrog(&mut s, eps);
        let mut h = integ.hamiltonian(&s);
        if h.is_nan() {
            h = f64::INFINITY;
        }
        let delta_h = h0 - h;
        if direction == 0.0 {
            direction = if delta_h > target { 1.0 } else { -1.0 };
        } else if (direction > 0.0 && !(delta_h > target)) || (direction < 0.0 && !(delta_h < target)) {
            return Ok(eps);
        }
        eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
        if eps > 1e7 {
            return Err(Error::Sampler("posterior appears improper: step size diverged".into()));
        }
        if eps < 1e-300 {
            return Err(Error::Sampler("no acceptable step size found".into()));
        }
    }
}

/// Output of one chain.
#[derive(Debug, Clone)]
struct ChainResult {
    draws: Vec<f64>,
    pointwise: Vec<f64>,
    lp: Vec<f64>,
    accept_stat: Vec<f64>,
    divergent: Vec<bool>,
    tree_depth: Vec<usize>,
    n_leapfrog: Vec<usize>,
    step_size: f64,
    metric: Metric,
}

/// Stores per-draw pointwise log-likelihoods alongside the draws.
pub trait PointwiseLogLik {
    fn n_records(&self) -> usize;
    fn pointwise(&self, theta: &[f64], out: &mut [f64]) -> Result<()>;
}

impl PointwiseLogLik for NmaModel {
    fn n_records(&self) -> usize {
        NmaModel::n_records(self)
    }

    fn pointwise(&self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        self.pointwise_log_likelihood(theta, out)
    }
}

/// Adapter for densities without per-record terms.
pub struct NoPointwise;

impl PointwiseLogLik for NoPointwise {
    fn n_records(&self) -> usize {
        0
    }

    fn pointwise(&self, _: &[f64], _: &mut [f64]) -> Result<()> {
        Ok(())
    }
}

fn run_chain<M, P, I>(target: &M, pw: &P, config: &SamplerConfig, chain: usize, init: &I) -> Result<ChainResult>
where
    M: LogDensity + ?Sized,
    P: PointwiseLogLik + ?Sized,
    I: Fn(&mut ChaCha8Rng) -> Vec<f64>,
{
    let dim = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);

    let mut state = None;
    for _ in 0..MAX_INIT_ATTEMPTS {
        let q = init(&mut rng);
        let mut grad = vec![0.0; dim];
        if let Ok(lp) = target.logp_grad(&q, &mut grad) {
            if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
                state = Some(State { q, p: vec![0.0; dim], grad, logp: lp });
                break;
            }
        }
    }
    let mut state = state.ok_or_else(|| {
        Error::Sampler(format!(
            "chain {chain}: no initial point with finite log density and gradient after {MAX_INIT_ATTEMPTS} attempts"
        ))
    })?;
    if chain == 0 {
        let step = dim.div_ceil(SELF_CHECK_COORDS).max(1);
        let coords: Vec<usize> = (0..dim).step_by(step).collect();
        let err = gradient_discrepancy(target, &state.q, &coords, 1e-6)?;
        if err > SELF_CHECK_TOL {
            return Err(Error::Sampler(format!(
                "analytic gradient disagrees with finite differences at the initial point (relative error {err:.2e})"
            )));
        }
    }

    let mut integ = Integrator {
        target,
        metric: Metric::unit(dim, config.metric),
        v: vec![0.0; dim],
    };
    let mut eps = initial_step_size(&mut integ, &mut rng, &state, 1.0)?;
    let mut da = DualAveraging::new(eps, config.target_accept);
    let windows = adaptation_windows(config.warmup);
    let mut window_samples: Vec<Vec<f64>> = Vec::new();
    for it in 0..config.warmup {
        let t = nuts_transition(&mut integ, &mut rng, &mut state, eps, config.max_depth);
        eps = da.update(t.accept_stat);
        if let Some(&(_, stop)) = windows.iter().find(|(s, e)| it >= *s && it < *e) {
            window_samples.push(state.q.clone());
            if it + 1 == stop {
                integ.metric = estimate_metric(&window_samples, config.metric);
                window_samples.clear();
                eps = initial_step_size(&mut integ, &mut rng, &state, eps)?;
                da = DualAveraging::new(eps, config.target_accept);
            }
        }
    }
    if config.warmup > 0 {
        eps = da.final_step();
    }

    let n = config.sampling;
    let n_rec = pw.n_records();
    let mut out = ChainResult {
        draws: Vec::with_capacity(n * dim),
        pointwise: vec![0.0; n * n_rec],
        lp: Vec::with_capacity(n),
        accept_stat: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        tree_depth: Vec::with_capacity(n),
        n_leapfrog: Vec::with_capacity(n),
        step_size: eps,
        metric: integ.metric.clone(),
    };
    for it in 0..n {
        let t = nuts_transition(&mut integ, &mut rng, &mut state, eps, config.max_depth);
        out.draws.extend_from_slice(&state.q);
        pw.pointwise(&state.q, &mut out.pointwise[it * n_rec..(it + 1) * n_rec])?;
        out.lp.push(state.logp);
        out.accept_stat.push(t.accept_stat);
        out.divergent.push(t.divergent);
        out.tree_depth.push(t.depth);
        out.n_leapfrog.push(t.n_leapfrog);
    }
    Ok(out)
}

/// Posterior draws with per-draw sampler statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub param_names: Vec<String>,
    pub n_chains: usize,
    pub n_iter: usize,
    pub n_records: usize,
    /// Flattened `(chain, iteration, parameter)`.
    pub draws: Vec<f64>,
    /// Flattened `(chain, iteration, record)`.
    pub pointwise: Vec<f64>,
    pub lp: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub divergent: Vec<bool>,
    pub tree_depth: Vec<usize>,
    pub n_leapfrog: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub max_depth: usize,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.param_names.len()
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains * self.n_iter
    }

    /// Parameter vector of draw `d` (chain-major).
    pub fn draw(&self, d: usize) -> &[f64] {
        let dim = self.dim();
        &self.draws[d * dim..(d + 1) * dim]
    }

    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.dim().max(1))
    }

    pub fn pointwise_row(&self, d: usize) -> &[f64] {
        &self.pointwise[d * self.n_records..(d + 1) * self.n_records]
    }

    /// Values of parameter `p` as `[chain][iteration]`.
    pub fn chains_of(&self, p: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| (0..self.n_iter).map(|i| self.draw(c * self.n_iter + i)[p]).collect())
            .collect()
    }

    pub fn n_divergent(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }

    /// Fraction of transitions that reached the maximum tree depth.
    pub fn depth_saturation(&self) -> f64 {
        let hits = self.tree_depth.iter().filter(|d| **d >= self.max_depth).count();
        hits as f64 / self.tree_depth.len().max(1) as f64
    }
}

/// Runs independent chains in parallel. Chain `c` uses the ChaCha stream `c`
/// of the configured seed, so results depend only on the seed and chain count.
pub fn sample_density<M, P, I>(
    target: &M,
    pointwise: &P,
    param_names: Vec<String>,
    config: &SamplerConfig,
    init: I,
) -> Result<PosteriorDraws>
where
    M: LogDensity + ?Sized,
    P: PointwiseLogLik + Sync + ?Sized,
    I: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    config.validate()?;
    if param_names.len() != target.dim() {
        return Err(Error::Dimension("parameter names do not match the target dimension".into()));
    }
    let chains: Vec<ChainResult> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(target, pointwise, config, c, &init))
        .collect::<Result<_>>()?;
    let mut draws = PosteriorDraws {
        param_names,
        n_chains: config.n_chains,
        n_iter: config.sampling,
        n_records: pointwise.n_records(),
        draws: vec![],
        pointwise: vec![],
        lp: vec![],
        accept_stat: vec![],
        divergent: vec![],
        tree_depth: vec![],
        n_leapfrog: vec![],
        step_sizes: vec![],
        metrics: vec![],
        max_depth: config.max_depth,
        warnings: vec![],
    };
    for c in chains {
        draws.draws.extend(c.draws);
        draws.pointwise.extend(c.pointwise);
        draws.lp.extend(c.lp);
        draws.accept_stat.extend(c.accept_stat);
        draws.divergent.extend(c.divergent);
        draws.tree_depth.extend(c.tree_depth);
        draws.n_leapfrog.extend(c.n_leapfrog);
        draws.step_sizes.push(c.step_size);
        draws.metrics.push(c.metric);
    }
    let sat = draws.depth_saturation();
    if sat > 0.25 {
        let msg = format!(
            "{:.0}% of post-warmup transitions hit the maximum tree depth {}; increase it or reparameterize",
            100.0 * sat,
            config.max_depth
        );
        log::warn!("{msg}");
        draws.warnings.push(msg);
    }
    let nd = draws.n_divergent();
    if nd > 0 {
        let msg = format!("{nd} divergent transition(s) after warmup");
        log::warn!("{msg}");
        draws.warnings.push(msg);
    }
    Ok(draws)
}

/// Samples the model posterior, storing per-record log-likelihoods.
pub fn sample(model: &NmaModel, config: &SamplerConfig) -> Result<PosteriorDraws> {
    let radius = config.init_radius;
    sample_density(model, model, model.layout().names(), config, |rng| model.init_point(rng, radius))
}
