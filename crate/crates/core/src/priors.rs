//! Spline coefficient parameterisation and prior densities.
//!
//! Baseline spline coefficients live on the simplex and are parameterised by
//! the inverse-softmax transform with the first category pinned at zero. The
//! weighted random walk prior on the transformed coefficients is centred on the
//! coefficients of a constant hazard, with increment variances proportional to
//! knot spacing and normalised to sum to one so the implied prior on the hazard
//! does not depend on the number or placement of knots, or on the time unit.

use serde::{Deserialize, Serialize};

use crate::basis::{augment_knots, KnotVector};
use crate::error::{Error, Result};
use crate::stats::LN_SQRT_2PI;

/// Maps `x` (length `n - 1`) onto the `n`-simplex with the first entry pinned.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(x))
}

pub(crate) fn softmax_unchecked(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(x.len() + 1);
    out.push((-max).exp());
    out.extend(x.iter().map(|v| (v - max).exp()));
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Inverse of [`softmax`]: `log(a[1..]) - log(a[0])`.
pub fn inverse_softmax(a: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty simplex".into()));
    }
    if a.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "inverse softmax requires strictly positive entries".into(),
        ));
    }
    let l0 = a[0].ln();
    Ok(a[1..].iter().map(|v| v.ln() - l0).collect())
}

/// Simplex coefficients giving a constant hazard of `1 / (upper - lower)`.
pub fn constant_hazard_simplex(knots: &KnotVector, kappa: usize) -> Result<Vec<f64>> {
    let aug = augment_knots(knots, kappa)?;
    let z = aug.values();
    let denom = kappa as f64 * knots.span();
    Ok((0..aug.dim()).map(|s| (z[s + kappa] - z[s]) / denom).collect())
}

/// Random walk prior mean corresponding to a constant baseline hazard.
pub fn constant_hazard_phi(knots: &KnotVector, kappa: usize) -> Result<Vec<f64>> {
    inverse_softmax(&constant_hazard_simplex(knots, kappa)?)
}

/// Increment weights of the random walk for `kappa >= 2`.
pub fn rw_weights(knots: &KnotVector, kappa: usize) -> Result<Vec<f64>> {
    if kappa < 2 {
        return Err(Error::InvalidArgument(
            "random walk weights are degenerate for piecewise-constant splines; use pexp_weights"
                .into(),
        ));
    }
    let aug = augment_knots(knots, kappa)?;
    let z = aug.values();
    let n = knots.n_internal() + kappa - 1;
    let denom = (kappa - 1) as f64 * knots.span();
    Ok((0..n).map(|l| (z[l + kappa] - z[l + 1]) / denom).collect())
}

/// Increment weights for the piecewise-exponential (`kappa = 1`) case.
pub fn pexp_weights(knots: &KnotVector) -> Result<Vec<f64>> {
    let z = knots.all();
    let l = knots.n_internal();
    if l == 0 {
        return Ok(vec![]);
    }
    let denom = z[l] - z[0];
    if !(denom > 0.0) {
        return Err(Error::InvalidKnots("degenerate knot vector".into()));
    }
    Ok((0..l).map(|i| (z[i + 1] - z[i]) / denom).collect())
}

/// Weights appropriate for the spline order.
pub fn weights_for_order(knots: &KnotVector, kappa: usize) -> Result<Vec<f64>> {
    if kappa == 1 {
        pexp_weights(knots)
    } else {
        rw_weights(knots, kappa)
    }
}

/// Weighted random walk prior on inverse-softmax spline coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomWalkPrior {
    pub phi: Vec<f64>,
    pub weights: Vec<f64>,
    pub sigma: f64,
}

impl RandomWalkPrior {
    pub fn for_knots(knots: &KnotVector, kappa: usize, sigma: f64) -> Result<Self> {
        Ok(Self {
            phi: constant_hazard_phi(knots, kappa)?,
            weights: weights_for_order(knots, kappa)?,
            sigma,
        })
    }
}

/// Value and gradient of a log prior density.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    /// Gradient with respect to the coefficients, flattened in input order.
    pub grad: Vec<f64>,
    pub grad_sigma: f64,
}

/// Log density of the weighted random walk on `alpha_star`, with gradient.
pub fn logprior_rw(alpha_star: &[f64], prior: &RandomWalkPrior) -> Result<LogDensity> {
    let n = alpha_star.len();
    if prior.phi.len() != n || prior.weights.len() != n {
        return Err(Error::Dimension(format!(
            "coefficients have length {n}, prior has {} / {}",
            prior.phi.len(),
            prior.weights.len()
        )));
    }
    let sigma = prior.sigma;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    let mut grad_sigma = 0.0;
    let mut prev = 0.0;
    // d(logp)/d(u_l) accumulated as scaled increments.
    let mut scaled = vec![0.0; n];
    for l in 0..n {
        let dev = alpha_star[l] - prior.phi[l];
        let u = dev - prev;
        prev = dev;
        let var = s2 * prior.weights[l];
        value += -0.5 * u * u / var - 0.5 * var.ln() - LN_SQRT_2PI;
        scaled[l] = u / var;
        grad_sigma += -1.0 / sigma + u * u / (var * sigma);
    }
    for l in 0..n {
        grad[l] = -scaled[l] + if l + 1 < n { scaled[l + 1] } else { 0.0 };
    }
    Ok(LogDensity {
        value,
        grad,
        grad_sigma,
    })
}

/// Symmetric multivariate random walk prior on non-proportionality effects.
///
/// Increments across the `K` treatments have unit-variance, 0.5-correlation
/// structure `P = (I + J) / 2` scaled by `weights[l] * sigma_alpha^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonPropPrior {
    pub sigma_alpha: f64,
    pub n_treatments: usize,
    pub weights: Vec<f64>,
}

impl NonPropPrior {
    /// The `K x K` correlation matrix, row-major.
    pub fn correlation(&self) -> Vec<f64> {
        let k = self.n_treatments;
        (0..k * k)
            .map(|i| if i / k == i % k { 1.0 } else { 0.5 })
            .collect()
    }

    /// `log det P` in closed form.
    pub fn log_det_correlation(&self) -> f64 {
        let k = self.n_treatments as f64;
        k * 0.5f64.ln() + (k + 1.0).ln()
    }
}

/// Log density of the multivariate random walk on `gammas[k][l]`, with gradient
/// flattened treatment-major.
pub fn logprior_nonprop(gammas: &[Vec<f64>], prior: &NonPropPrior) -> Result<LogDensity> {
    let k = prior.n_treatments;
    if gammas.len() != k {
        return Err(Error::Dimension(format!("expected {k} effect vectors, got {}", gammas.len())));
    }
    let n = prior.weights.len();
    if gammas.iter().any(|g| g.len() != n) {
        return Err(Error::Dimension(format!("effect vectors must have length {n}")));
    }
    let sigma = prior.sigma_alpha;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_alpha must be positive, got {sigma}"
        )));
    }
    let kf = k as f64;
    let s2 = sigma * sigma;
    let log_det_p = prior.log_det_correlation();
    let mut value = 0.0;
    let mut grad_sigma = 0.0;
    // Gradient with respect to each increment v_l, treatment-major.
    let mut gv = vec![0.0; k * n];
    let mut v = vec![0.0; k];
    for l in 0..n {
        for (t, g) in gammas.iter().enumerate() {
            v[t] = g[l] - if l > 0 { g[l - 1] } else { 0.0 };
        }
        let sum: f64 = v.iter().sum();
        let sumsq: f64 = v.iter().map(|x| x * x).sum();
        let quad = 2.0 * (sumsq - sum * sum / (kf + 1.0));
        let scale = prior.weights[l] * s2;
        value += -kf * LN_SQRT_2PI - 0.5 * (kf * scale.ln() + log_det_p) - 0.5 * quad / scale;
        grad_sigma += -kf / sigma + quad / (scale * sigma);
        for t in 0..k {
            gv[t * n + l] = -2.0 * (v[t] - sum / (kf + 1.0)) / scale;
        }
    }
    let mut grad = vec![0.0; k * n];
    for t in 0..k {
        for l in 0..n {
            let next = if l + 1 < n { gv[t * n + l + 1] } else { 0.0 };
            grad[t * n + l] = gv[t * n + l] - next;
        }
    }
    Ok(LogDensity {
        value,
        grad,
        grad_sigma,
    })
}

/// Reconstructs `alpha_star = phi + cumsum(sigma * sqrt(w) * z)` from raw
/// standard-normal increments.
pub(crate) fn rw_from_raw(phi: &[f64], sqrt_w: &[f64], sigma: f64, z: &[f64], out: &mut [f64]) {
    let mut acc = 0.0;
    for l in 0..z.len() {
        acc += sigma * sqrt_w[l] * z[l];
        out[l] = phi[l] + acc;
    }
}

/// Back-propagates a gradient on `alpha_star` to the raw increments and to
/// `log sigma`. Adds into `grad_z` and returns the `log sigma` component.
pub(crate) fn rw_backprop(
    sqrt_w: &[f64],
    sigma: f64,
    z: &[f64],
    grad_alpha_star: &[f64],
    grad_z: &mut [f64],
) -> f64 {
    let mut tail = 0.0;
    let mut g_log_sigma = 0.0;
    for l in (0..z.len()).rev() {
        tail += grad_alpha_star[l];
        let scale = sigma * sqrt_w[l];
        grad_z[l] += tail * scale;
        g_log_sigma += tail * scale * z[l];
    }
    g_log_sigma
}

/// Gradient of `sum_s g_s * alpha_s` with respect to `alpha_star`, where
/// `alpha = softmax(alpha_star)` and `g` is the gradient on the simplex.
pub(crate) fn softmax_backprop(alpha: &[f64], grad_alpha: &[f64], out: &mut [f64]) {
    let mean: f64 = alpha.iter().zip(grad_alpha).map(|(a, g)| a * g).sum();
    for l in 0..out.len() {
        out[l] = alpha[l + 1] * (grad_alpha[l + 1] - mean);
    }
}
