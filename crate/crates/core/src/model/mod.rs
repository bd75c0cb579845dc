//! Joint log-posterior of the network meta-analysis model.
//!
//! The parameter vector is unconstrained. Positive scale parameters are held
//! on the log scale (with Jacobian adjustment), spline coefficients and random
//! effects are non-centred: standard-normal raw increments are scaled and
//! cumulatively summed into the inverse-softmax coefficients.

mod layout;
mod spec;

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;

pub use layout::{ParamBlock, ParamLayout, Transform};
pub use spec::{CovariateDesign, Effects, Family, Inconsistency, ModelSpec, PriorSettings};

use crate::basis::{augment_knots, AugmentedKnots, KnotVector};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::priors::{
    constant_hazard_phi, rw_backprop, rw_from_raw, softmax_backprop, softmax_unchecked, weights_for_order,
};
use crate::stats::{half_normal_lpdf, normal_lpdf};

/// A differentiable log density over an unconstrained parameter vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density and writes its gradient into `grad`.
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// One baseline spline coefficient vector with its own random walk prior.
#[derive(Debug, Clone)]
struct CoefGroup {
    label: String,
    study: usize,
    treatment: Option<usize>,
    strata: Vec<u64>,
    knots: KnotVector,
    aug: AugmentedKnots,
    phi: Vec<f64>,
    sqrt_w: Vec<f64>,
    z_off: usize,
    log_sigma_off: Option<usize>,
}

impl CoefGroup {
    fn n_free(&self) -> usize {
        self.phi.len()
    }
}

/// Zero-mean random walk for one row of covariate effects on spline coefficients.
#[derive(Debug, Clone)]
struct SplineCovRow {
    covariate: usize,
    treatment: Option<usize>,
    z_off: usize,
    log_sigma_off: usize,
}

#[derive(Debug, Clone)]
struct Arm {
    study: usize,
    treatment: usize,
    baseline: bool,
    /// Offset of the mean relative effect: `d[t] - d[b]` uses two entries under
    /// consistency, a single UME entry otherwise.
    ume: Option<usize>,
    re_z: Option<usize>,
    re_shared: Option<usize>,
    theta: bool,
}

#[derive(Debug, Clone)]
struct PreRecord {
    arm: usize,
    treatment: usize,
    group: usize,
    slot: usize,
    event: bool,
    basis_off: usize,
    x: Vec<f64>,
}

/// Assembled model bound to a dataset. Immutable after construction.
#[derive(Debug, Clone)]
pub struct NmaModel {
    spec: ModelSpec,
    data: SurvivalDataset,
    layout: ParamLayout,
    covariate_means: Vec<f64>,
    groups: Vec<CoefGroup>,
    arms: Vec<Arm>,
    arm_index: BTreeMap<(usize, usize), usize>,
    slots: Vec<(usize, usize)>,
    records: Vec<PreRecord>,
    basis_m: Vec<f64>,
    basis_i: Vec<f64>,
    ume_pairs: Vec<(usize, usize)>,
    mu_off: usize,
    d_off: usize,
    log_tau_off: Option<usize>,
    theta_off: Option<usize>,
    beta1_off: usize,
    beta2_off: usize,
    gamma_off: Option<usize>,
    log_sigma_alpha_off: Option<usize>,
    n_free_common: usize,
    common_sqrt_w: Vec<f64>,
    spline_rows: Vec<SplineCovRow>,
}

fn strata_key(design: &CovariateDesign, raw: &[f64]) -> Vec<u64> {
    design.strata.iter().map(|&c| raw[c].to_bits()).collect()
}

impl NmaModel {
    pub fn new(spec: ModelSpec, data: &SurvivalDataset) -> Result<Self> {
        let n_studies = data.n_studies();
        let n_trt = data.n_treatments();
        let design = &spec.covariates;
        if spec.kappa < 1 {
            return Err(Error::InvalidOrder(spec.kappa));
        }
        if let crate::knots::PlanKnots::PerStudy(v) = &spec.knots.knots {
            if v.len() != n_studies {
                return Err(Error::Spec(format!(
                    "knot plan has {} studies, data has {n_studies}",
                    v.len()
                )));
            }
        }
        if spec.family == Family::NphCoefEffects && !spec.knots.is_common() {
            return Err(Error::Spec(
                "the coefficient-effects family requires a common knot plan".into(),
            ));
        }
        for &c in design
            .prognostic
            .iter()
            .chain(&design.effect_modifiers)
            .chain(&design.spline_main)
            .chain(&design.spline_interaction)
            .chain(&design.strata)
        {
            if c >= data.n_covariates() {
                return Err(Error::Spec(format!("covariate column {c} does not exist")));
            }
        }
        if design.has_spline_covariates() && spec.family != Family::NphCoefEffects {
            return Err(Error::Spec(
                "covariate effects on spline coefficients need the coefficient-effects family".into(),
            ));
        }
        if !design.strata.is_empty() && spec.family != Family::NphStratified {
            return Err(Error::Spec("coefficient strata need the stratified family".into()));
        }
        if let Inconsistency::NodeSplit { a, b } = spec.inconsistency {
            if a >= n_trt || b >= n_trt || a == b {
                return Err(Error::Spec(format!("invalid node-split comparison ({a}, {b})")));
            }
            if !(0..n_studies).any(|j| data.has_arm(j, a) && data.has_arm(j, b)) {
                return Err(Error::Spec(format!(
                    "node-split needs a study comparing {} and {}",
                    data.treatment_labels()[a],
                    data.treatment_labels()[b]
                )));
            }
        }

        let n_cov = data.n_covariates();
        let mut covariate_means = vec![0.0; n_cov];
        for r in data.records() {
            for (m, x) in covariate_means.iter_mut().zip(&r.covariates) {
                *m += x;
            }
        }
        covariate_means.iter_mut().for_each(|m| *m /= data.records().len() as f64);

        let mut layout = ParamLayout::default();
        let mu_off = layout.push(
            "mu",
            layout::Transform::Identity,
            data.study_labels().to_vec(),
        );

        // Relative effects.
        let mut ume_pairs = Vec::new();
        if spec.inconsistency == Inconsistency::Ume {
            for j in 0..n_studies {
                let b = data.baseline(j);
                for &t in &data.arms(j)[1..] {
                    if !ume_pairs.contains(&(b, t)) {
                        ume_pairs.push((b, t));
                    }
                }
            }
            ume_pairs.sort();
        }
        let tl = data.treatment_labels();
        let d_off = if spec.inconsistency == Inconsistency::Ume {
            layout.push(
                "d",
                layout::Transform::Identity,
                ume_pairs.iter().map(|&(b, t)| format!("{}:{}", tl[b], tl[t])).collect(),
            )
        } else {
            layout.push("d", layout::Transform::Identity, tl[1..].to_vec())
        };
        let log_tau_off = (spec.effects == Effects::Random)
            .then(|| layout.push("log_tau", layout::Transform::Log, vec![String::new()]));

        let mut arms = Vec::new();
        let mut arm_index = BTreeMap::new();
        for j in 0..n_studies {
            let b = data.baseline(j);
            let non_base = data.arms(j).len() - 1;
            let re_shared = (spec.effects == Effects::Random && non_base >= 2).then(|| {
                layout.push(
                    "z_re_shared",
                    layout::Transform::Identity,
                    vec![data.study_labels()[j].clone()],
                )
            });
            for &t in data.arms(j) {
                let baseline = t == b;
                let re_z = (spec.effects == Effects::Random && !baseline).then(|| {
                    layout.push(
                        "z_re",
                        layout::Transform::Identity,
                        vec![format!("{}:{}", data.study_labels()[j], tl[t])],
                    )
                });
                let ume = if spec.inconsistency == Inconsistency::Ume && !baseline {
                    Some(d_off + ume_pairs.iter().position(|&p| p == (b, t)).unwrap())
                } else {
                    None
                };
                let theta = match spec.inconsistency {
                    Inconsistency::NodeSplit { a, b: sb } => {
                        t == sb && data.has_arm(j, a) && data.has_arm(j, sb)
                    }
                    _ => false,
                };
                arm_index.insert((j, t), arms.len());
                arms.push(Arm {
                    study: j,
                    treatment: t,
                    baseline,
                    ume,
                    re_z,
                    re_shared: if baseline { None } else { re_shared },
                    theta,
                });
            }
        }
        let theta_off = matches!(spec.inconsistency, Inconsistency::NodeSplit { .. })
            .then(|| layout.push("theta", layout::Transform::Identity, vec![String::new()]));

        let cn = data.covariate_names();
        let beta1_off = layout.push(
            "beta1",
            layout::Transform::Identity,
            design.prognostic.iter().map(|&c| cn[c].clone()).collect(),
        );
        let beta2_off = layout.push(
            "beta2",
            layout::Transform::Identity,
            (1..n_trt)
                .flat_map(|t| design.effect_modifiers.iter().map(move |&c| (t, c)))
                .map(|(t, c)| format!("{}:{}", tl[t], cn[c]))
                .collect(),
        );

        // Baseline coefficient groups.
        let mut groups: Vec<CoefGroup> = Vec::new();
        let mut group_of: BTreeMap<(usize, Option<usize>, Vec<u64>), usize> = BTreeMap::new();
        for r in data.records() {
            let trt = (spec.family == Family::NphStratified && design.stratify_by_treatment)
                .then_some(r.treatment);
            let key = (r.study, trt, strata_key(design, &r.covariates));
            if group_of.contains_key(&key) {
                continue;
            }
            let knots = spec.knots.for_study(r.study).clone();
            let aug = augment_knots(&knots, spec.kappa)?;
            let phi = constant_hazard_phi(&knots, spec.kappa)?;
            let sqrt_w: Vec<f64> = weights_for_order(&knots, spec.kappa)?.iter().map(|w| w.sqrt()).collect();
            let mut label = data.study_labels()[r.study].clone();
            if let Some(t) = trt {
                label = format!("{label}:{}", tl[t]);
            }
            for (&c, &bits) in design.strata.iter().zip(&key.2) {
                label = format!("{label}:{}={}", cn[c], f64::from_bits(bits));
            }
            group_of.insert(key.clone(), usize::MAX);
            groups.push(CoefGroup {
                label,
                study: r.study,
                treatment: trt,
                strata: key.2,
                knots,
                aug,
                phi,
                sqrt_w,
                z_off: 0,
                log_sigma_off: None,
            });
        }
        // Deterministic group order: by key.
        groups.sort_by(|a, b| (a.study, a.treatment, &a.strata).cmp(&(b.study, b.treatment, &b.strata)));
        for (g, grp) in groups.iter_mut().enumerate() {
            group_of.insert((grp.study, grp.treatment, grp.strata.clone()), g);
            let n = grp.n_free();
            grp.z_off = layout.push(
                "z_base",
                layout::Transform::Identity,
                (1..=n).map(|l| format!("{}:{l}", grp.label)).collect(),
            );
            if n > 0 {
                grp.log_sigma_off =
                    Some(layout.push("log_sigma", layout::Transform::Log, vec![grp.label.clone()]));
            }
        }

        let mut n_free_common = 0;
        let mut common_sqrt_w = Vec::new();
        let mut gamma_off = None;
        let mut log_sigma_alpha_off = None;
        let mut spline_rows = Vec::new();
        if spec.family == Family::NphCoefEffects {
            n_free_common = groups[0].n_free();
            common_sqrt_w = groups[0].sqrt_w.clone();
            if design.treatment_spline_effects && n_free_common > 0 {
                let labels = (1..=n_free_common)
                    .flat_map(|l| {
                        std::iter::once(format!("{l}:shared"))
                            .chain(tl.iter().map(move |t| format!("{l}:{t}")))
                    })
                    .collect();
                gamma_off = Some(layout.push("z_gamma", layout::Transform::Identity, labels));
                log_sigma_alpha_off =
                    Some(layout.push("log_sigma_alpha", layout::Transform::Log, vec![String::new()]));
            }
            if n_free_common > 0 {
                let rows: Vec<(usize, Option<usize>)> = design
                    .spline_main
                    .iter()
                    .map(|&c| (c, None))
                    .chain(
                        (1..n_trt).flat_map(|t| design.spline_interaction.iter().map(move |&c| (c, Some(t)))),
                    )
                    .collect();
                for (c, t) in rows {
                    let label = match t {
                        Some(t) => format!("{}:{}", tl[t], cn[c]),
                        None => cn[c].clone(),
                    };
                    let z_off = layout.push(
                        "z_spline_cov",
                        layout::Transform::Identity,
                        (1..=n_free_common).map(|l| format!("{label}:{l}")).collect(),
                    );
                    let log_sigma_off = layout.push("log_sigma_spline_cov", layout::Transform::Log, vec![label]);
                    spline_rows.push(SplineCovRow {
                        covariate: c,
                        treatment: t,
                        z_off,
                        log_sigma_off,
                    });
                }
            }
        }

        // Precompute basis rows and record metadata.
        let mut slots: Vec<(usize, usize)> = Vec::new();
        let mut slot_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut records = Vec::with_capacity(data.records().len());
        let mut basis_m = Vec::new();
        let mut basis_i = Vec::new();
        for (idx, r) in data.records().iter().enumerate() {
            let trt = (spec.family == Family::NphStratified && design.stratify_by_treatment)
                .then_some(r.treatment);
            let g = group_of[&(r.study, trt, strata_key(design, &r.covariates))];
            let grp = &groups[g];
            if r.event && r.time <= grp.knots.lower() {
                return Err(Error::Dataset(format!(
                    "record {idx}: events at the lower boundary time are not supported"
                )));
            }
            if !grp.knots.contains(r.time) {
                return Err(Error::Dataset(format!(
                    "record {idx}: time {} lies outside the knots [{}, {}] of {}",
                    r.time,
                    grp.knots.lower(),
                    grp.knots.upper(),
                    grp.label
                )));
            }
            let basis_off = basis_m.len();
            basis_m.extend(grp.aug.mspline(r.time)?);
            basis_i.extend(grp.aug.ispline(r.time)?);
            let slot = *slot_of.entry((g, r.treatment)).or_insert_with(|| {
                slots.push((g, r.treatment));
                slots.len() - 1
            });
            records.push(PreRecord {
                arm: arm_index[&(r.study, r.treatment)],
                treatment: r.treatment,
                group: g,
                slot,
                event: r.event,
                basis_off,
                x: r.covariates.iter().zip(&covariate_means).map(|(x, m)| x - m).collect(),
            });
        }

        Ok(Self {
            spec,
            data: data.clone(),
            layout,
            covariate_means,
            groups,
            arms,
            arm_index,
            slots,
            records,
            basis_m,
            basis_i,
            ume_pairs,
            mu_off,
            d_off,
            log_tau_off,
            theta_off,
            beta1_off,
            beta2_off,
            gamma_off,
            log_sigma_alpha_off,
            n_free_common,
            common_sqrt_w,
            spline_rows,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &SurvivalDataset {
        &self.data
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn covariate_means(&self) -> &[f64] {
        &self.covariate_means
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    /// Study index of each record, in data order.
    pub fn record_studies(&self) -> Vec<usize> {
        self.records.iter().map(|r| self.arms[r.arm].study).collect()
    }

    /// Comparisons with their own effect under the unrelated mean effects model.
    pub fn ume_pairs(&self) -> &[(usize, usize)] {
        &self.ume_pairs
    }

    /// Random initial point: every coordinate uniform on `(-radius, radius)`.
    pub fn init_point<R: Rng>(&self, rng: &mut R, radius: f64) -> Vec<f64> {
        (0..self.layout.dim())
            .map(|_| if radius > 0.0 { rng.random_range(-radius..radius) } else { 0.0 })
            .collect()
    }

    fn d_value(&self, theta: &[f64], t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            theta[self.d_off + t - 1]
        }
    }

    fn re_scale(&self, arm: &Arm) -> f64 {
        if arm.re_shared.is_some() {
            FRAC_1_SQRT_2
        } else {
            1.0
        }
    }

    /// Relative effect of an observed arm against its study's baseline arm.
    fn arm_delta(&self, theta: &[f64], arm: &Arm) -> f64 {
        if arm.baseline {
            return 0.0;
        }
        let b = self.data.baseline(arm.study);
        let mut delta = match arm.ume {
            Some(off) => theta[off],
            None => self.d_value(theta, arm.treatment) - self.d_value(theta, b),
        };
        if let (Some(lt), Some(z)) = (self.log_tau_off, arm.re_z) {
            let mut eps = theta[z];
            if let Some(s) = arm.re_shared {
                eps += theta[s];
            }
            delta += theta[lt].exp() * eps * self.re_scale(arm);
        }
        if arm.theta {
            delta += theta[self.theta_off.unwrap()];
        }
        delta
    }

    fn base_alpha_star(&self, theta: &[f64], g: usize) -> Vec<f64> {
        let grp = &self.groups[g];
        let n = grp.n_free();
        let mut out = vec![0.0; n];
        if n > 0 {
            let sigma = theta[grp.log_sigma_off.unwrap()].exp();
            rw_from_raw(&grp.phi, &grp.sqrt_w, sigma, &theta[grp.z_off..grp.z_off + n], &mut out);
        }
        out
    }

    /// Non-proportionality effects `gamma[k]` for every treatment.
    pub fn gammas(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let k = self.data.n_treatments();
        let n = self.n_free_common;
        let mut out = vec![vec![0.0; n]; k];
        if let (Some(off), Some(ls)) = (self.gamma_off, self.log_sigma_alpha_off) {
            let sigma = theta[ls].exp();
            for l in 0..n {
                let row = &theta[off + l * (k + 1)..off + (l + 1) * (k + 1)];
                let scale = sigma * self.common_sqrt_w[l] * FRAC_1_SQRT_2;
                for t in 0..k {
                    let prev = if l > 0 { out[t][l - 1] } else { 0.0 };
                    out[t][l] = prev + scale * (row[t + 1] + row[0]);
                }
            }
        }
        out
    }

    /// Contrasts `gamma[k] - gamma[0]` of non-proportionality effects.
    pub fn nonprop_contrasts(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let g = self.gammas(theta);
        g.iter()
            .map(|gk| gk.iter().zip(&g[0]).map(|(a, b)| a - b).collect())
            .collect()
    }

    fn spline_row_values(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let n = self.n_free_common;
        let zeros = vec![0.0; n];
        self.spline_rows
            .iter()
            .map(|row| {
                let mut out = vec![0.0; n];
                let sigma = theta[row.log_sigma_off].exp();
                rw_from_raw(&zeros, &self.common_sqrt_w, sigma, &theta[row.z_off..row.z_off + n], &mut out);
                out
            })
            .collect()
    }

    fn centered(&self, x_raw: Option<&[f64]>) -> Result<Vec<f64>> {
        match x_raw {
            None => Ok(vec![0.0; self.covariate_means.len()]),
            Some(x) => {
                if self.spec.covariates.is_empty() {
                    return Err(Error::InvalidArgument(
                        "covariates supplied to a model without a covariate design".into(),
                    ));
                }
                if x.len() != self.covariate_means.len() {
                    return Err(Error::Dimension(format!(
                        "expected {} covariates, got {}",
                        self.covariate_means.len(),
                        x.len()
                    )));
                }
                Ok(x.iter().zip(&self.covariate_means).map(|(a, m)| a - m).collect())
            }
        }
    }

    fn covariate_eta(&self, theta: &[f64], treatment: usize, x: &[f64]) -> f64 {
        let design = &self.spec.covariates;
        let n_em = design.effect_modifiers.len();
        let mut eta = 0.0;
        for (p, &c) in design.prognostic.iter().enumerate() {
            eta += x[c] * theta[self.beta1_off + p];
        }
        if treatment > 0 {
            for (e, &c) in design.effect_modifiers.iter().enumerate() {
                eta += x[c] * theta[self.beta2_off + (treatment - 1) * n_em + e];
            }
        }
        eta
    }

    /// Log hazard rate linear predictor for an observed arm.
    pub fn linear_predictor(
        &self,
        theta: &[f64],
        study: usize,
        treatment: usize,
        x_raw: Option<&[f64]>,
    ) -> Result<f64> {
        let arm = self.arm_index.get(&(study, treatment)).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "treatment {} is not in study {}",
                self.data.treatment_labels().get(treatment).map_or("?", |s| s),
                self.data.study_labels()[study]
            ))
        })?;
        let x = self.centered(x_raw)?;
        Ok(theta[self.mu_off + study] + self.arm_delta(theta, &self.arms[*arm]) + self.covariate_eta(theta, treatment, &x))
    }

    /// Linear predictor for any treatment in the population of `study`.
    /// Unobserved treatments use the mean relative effect.
    pub fn population_linear_predictor(
        &self,
        theta: &[f64],
        study: usize,
        treatment: usize,
        x_raw: Option<&[f64]>,
    ) -> Result<f64> {
        if self.data.has_arm(study, treatment) {
            return self.linear_predictor(theta, study, treatment, x_raw);
        }
        let b = self.data.baseline(study);
        let delta = if self.spec.inconsistency == Inconsistency::Ume {
            let pos = self.ume_pairs.iter().position(|&p| p == (b, treatment)).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "comparison {}:{} has no effect under the unrelated mean effects model",
                    self.data.treatment_labels()[b],
                    self.data.treatment_labels()[treatment]
                ))
            })?;
            theta[self.d_off + pos]
        } else {
            self.d_value(theta, treatment) - self.d_value(theta, b)
        };
        let x = self.centered(x_raw)?;
        Ok(theta[self.mu_off + study] + delta + self.covariate_eta(theta, treatment, &x))
    }

    fn find_group(&self, study: usize, treatment: usize, x_raw: Option<&[f64]>) -> Result<usize> {
        let design = &self.spec.covariates;
        let trt = (self.spec.family == Family::NphStratified && design.stratify_by_treatment).then_some(treatment);
        let strata = if design.strata.is_empty() {
            vec![]
        } else {
            let x = x_raw.ok_or_else(|| {
                Error::InvalidArgument("stratum covariate values are required for prediction".into())
            })?;
            strata_key(design, x)
        };
        self.groups
            .iter()
            .position(|g| g.study == study && g.treatment == trt && g.strata == strata)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no baseline hazard for treatment {} in study {}: the stratified model only predicts observed arms",
                    self.data.treatment_labels()[treatment],
                    self.data.study_labels()[study]
                ))
            })
    }

    /// Inverse-softmax spline coefficients for a treatment in a study population.
    pub fn population_alpha_star(
        &self,
        theta: &[f64],
        study: usize,
        treatment: usize,
        x_raw: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let g = self.find_group(study, treatment, x_raw)?;
        let mut a = self.base_alpha_star(theta, g);
        if self.spec.family == Family::NphCoefEffects {
            let gam = self.gammas(theta);
            for (v, gv) in a.iter_mut().zip(&gam[treatment]) {
                *v += gv;
            }
            if !self.spline_rows.is_empty() {
                let x = self.centered(x_raw)?;
                for (row, vals) in self.spline_rows.iter().zip(self.spline_row_values(theta)) {
                    if row.treatment.is_none_or(|t| t == treatment) {
                        for (v, b) in a.iter_mut().zip(&vals) {
                            *v += x[row.covariate] * b;
                        }
                    }
                }
            }
        }
        Ok(a)
    }

    /// Simplex spline coefficients of an observed arm.
    pub fn arm_coefficients(
        &self,
        theta: &[f64],
        study: usize,
        treatment: usize,
        x_raw: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        if !self.data.has_arm(study, treatment) {
            return Err(Error::InvalidArgument(format!(
                "treatment {} is not in study {}",
                self.data.treatment_labels()[treatment],
                self.data.study_labels()[study]
            )));
        }
        if x_raw.is_some() && self.spec.covariates.is_empty() {
            return Err(Error::InvalidArgument(
                "covariates supplied to a model without a covariate design".into(),
            ));
        }
        Ok(softmax_unchecked(&self.population_alpha_star(theta, study, treatment, x_raw)?))
    }

    /// Augmented knots of the baseline hazard used for a study population.
    pub fn population_knots(&self, study: usize, treatment: usize, x_raw: Option<&[f64]>) -> Result<&AugmentedKnots> {
        Ok(&self.groups[self.find_group(study, treatment, x_raw)?].aug)
    }

    /// Labels of the baseline coefficient groups (one random walk each).
    pub fn group_labels(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.label.as_str()).collect()
    }

    /// Total log-likelihood.
    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        let mut pw = vec![0.0; self.records.len()];
        self.evaluate(theta, None, Some(&mut pw))?;
        Ok(pw.iter().sum())
    }

    /// Per-record log-likelihood contributions.
    pub fn pointwise_log_likelihood(&self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        self.evaluate(theta, None, Some(out)).map(|_| ())
    }

    /// Log posterior density (up to the normalising constant of the data),
    /// optionally with its gradient and per-record log-likelihoods.
    pub fn evaluate(&self, theta: &[f64], grad: Option<&mut [f64]>, pointwise: Option<&mut [f64]>) -> Result<f64> {
        let dim = self.layout.dim();
        if theta.len() != dim {
            return Err(Error::Dimension(format!("parameter vector has length {}, expected {dim}", theta.len())));
        }
        let want_grad = grad.is_some();
        let mut g = vec![0.0; if want_grad { dim } else { 0 }];
        let n_trt = self.data.n_treatments();
        let design = &self.spec.covariates;
        let per_record = !self.spline_rows.is_empty();

        let eta_arm: Vec<f64> = self
            .arms
            .iter()
            .map(|a| theta[self.mu_off + a.study] + self.arm_delta(theta, a))
            .collect();
        let base: Vec<Vec<f64>> = (0..self.groups.len()).map(|gi| self.base_alpha_star(theta, gi)).collect();
        let gam = self.gammas(theta);
        let has_gamma = self.gamma_off.is_some();
        let row_vals = self.spline_row_values(theta);

        let slot_alpha: Vec<Vec<f64>> = if per_record {
            vec![]
        } else {
            self.slots
                .iter()
                .map(|&(gi, t)| {
                    if has_gamma {
                        let a: Vec<f64> = base[gi].iter().zip(&gam[t]).map(|(x, y)| x + y).collect();
                        softmax_unchecked(&a)
                    } else {
                        softmax_unchecked(&base[gi])
                    }
                })
                .collect()
        };

        let mut g_eta_arm = vec![0.0; if want_grad { self.arms.len() } else { 0 }];
        let mut g_slot_alpha: Vec<Vec<f64>> = if want_grad && !per_record {
            slot_alpha.iter().map(|a| vec![0.0; a.len()]).collect()
        } else {
            vec![]
        };
        let mut g_base: Vec<Vec<f64>> = if want_grad { base.iter().map(|b| vec![0.0; b.len()]).collect() } else { vec![] };
        let mut g_gamma = if want_grad { vec![vec![0.0; self.n_free_common]; n_trt] } else { vec![] };
        let mut g_rows = if want_grad { vec![vec![0.0; self.n_free_common]; self.spline_rows.len()] } else { vec![] };

        let mut pointwise = pointwise;
        let mut loglik = 0.0;
        let mut scratch_alpha;
        let mut scratch_ga = Vec::new();
        let mut scratch_gs = Vec::new();
        let n_em = design.effect_modifiers.len();
        for (idx, rec) in self.records.iter().enumerate() {
            let n = self.groups[rec.group].n_free() + 1;
            let m = &self.basis_m[rec.basis_off..rec.basis_off + n];
            let ib = &self.basis_i[rec.basis_off..rec.basis_off + n];
            let alpha: &[f64] = if per_record {
                let mut a = base[rec.group].clone();
                if has_gamma {
                    a.iter_mut().zip(&gam[rec.treatment]).for_each(|(x, y)| *x += y);
                }
                for (row, vals) in self.spline_rows.iter().zip(&row_vals) {
                    if row.treatment.is_none_or(|t| t == rec.treatment) {
                        let xc = rec.x[row.covariate];
                        a.iter_mut().zip(vals).for_each(|(x, b)| *x += xc * b);
                    }
                }
                scratch_alpha = softmax_unchecked(&a);
                &scratch_alpha
            } else {
                &slot_alpha[rec.slot]
            };
            let h0: f64 = alpha.iter().zip(m).map(|(a, b)| a * b).sum();
            let cum: f64 = alpha.iter().zip(ib).map(|(a, b)| a * b).sum();
            let eta = eta_arm[rec.arm] + self.covariate_eta(theta, rec.treatment, &rec.x);
            let e = eta.exp();
            let mut ll = -cum * e;
            if rec.event {
                if !(h0 > 0.0) {
                    return Err(Error::ZeroHazard { record: idx });
                }
                ll += h0.ln() + eta;
            }
            if let Some(pw) = pointwise.as_deref_mut() {
                pw[idx] = ll;
            }
            loglik += ll;
            if !want_grad {
                continue;
            }
            let c = if rec.event { 1.0 } else { 0.0 };
            let g_eta = c - cum * e;
            g_eta_arm[rec.arm] += g_eta;
            for (p, &col) in design.prognostic.iter().enumerate() {
                g[self.beta1_off + p] += rec.x[col] * g_eta;
            }
            if rec.treatment > 0 {
                for (em, &col) in design.effect_modifiers.iter().enumerate() {
                    g[self.beta2_off + (rec.treatment - 1) * n_em + em] += rec.x[col] * g_eta;
                }
            }
            let inv_h = if rec.event { 1.0 / h0 } else { 0.0 };
            if per_record {
                scratch_ga.clear();
                scratch_ga.extend(m.iter().zip(ib).map(|(mv, iv)| mv * inv_h - e * iv));
                scratch_gs.resize(n - 1, 0.0);
                softmax_backprop(alpha, &scratch_ga, &mut scratch_gs);
                g_base[rec.group].iter_mut().zip(&scratch_gs).for_each(|(a, b)| *a += b);
                if has_gamma {
                    g_gamma[rec.treatment].iter_mut().zip(&scratch_gs).for_each(|(a, b)| *a += b);
                }
                for (ri, row) in self.spline_rows.iter().enumerate() {
                    if row.treatment.is_none_or(|t| t == rec.treatment) {
                        let xc = rec.x[row.covariate];
                        g_rows[ri].iter_mut().zip(&scratch_gs).for_each(|(a, b)| *a += xc * b);
                    }
                }
            } else {
                let ga = &mut g_slot_alpha[rec.slot];
                for s in 0..n {
                    ga[s] += m[s] * inv_h - e * ib[s];
                }
            }
        }
        if !loglik.is_finite() {
            return Err(Error::NonFinite("log-likelihood".into()));
        }

        let mut lp = loglik;
        let pr = &self.spec.priors;

        // Priors on location parameters.
        for j in 0..self.data.n_studies() {
            lp += normal_lpdf(theta[self.mu_off + j], 0.0, pr.mu_sd);
        }
        let n_d = self.layout.block_len("d");
        for i in 0..n_d {
            lp += normal_lpdf(theta[self.d_off + i], 0.0, pr.d_sd);
        }
        if let Some(off) = self.theta_off {
            lp += normal_lpdf(theta[off], 0.0, pr.theta_sd);
        }
        let n_beta = design.prognostic.len() + (n_trt - 1) * n_em;
        for i in 0..n_beta {
            lp += normal_lpdf(theta[self.beta1_off + i], 0.0, pr.beta_sd);
        }
        // Standard-normal raw deviates and half-normal scales.
        for block in self.layout.blocks() {
            match block.transform {
                layout::Transform::Identity if block.name.starts_with("z_") => {
                    for i in block.offset..block.offset + block.len {
                        lp += normal_lpdf(theta[i], 0.0, 1.0);
                        if want_grad {
                            g[i] -= theta[i];
                        }
                    }
                }
                layout::Transform::Log => {
                    let sd = match block.name.as_str() {
                        "log_tau" => pr.tau_sd,
                        "log_sigma" => pr.sigma_sd,
                        "log_sigma_alpha" => pr.sigma_alpha_sd,
                        _ => pr.sigma_b_sd,
                    };
                    for i in block.offset..block.offset + block.len {
                        let s = theta[i].exp();
                        lp += half_normal_lpdf(s, sd) + theta[i];
                        if want_grad {
                            g[i] += 1.0 - s * s / (sd * sd);
                        }
                    }
                }
                _ => {}
            }
        }
        if !lp.is_finite() {
            let name = self.layout.first_nonfinite(theta).unwrap_or("log-prior");
            return Err(Error::NonFinite(name.to_string()));
        }

        let Some(grad) = grad else {
            return Ok(lp);
        };

        // Location prior gradients.
        for j in 0..self.data.n_studies() {
            g[self.mu_off + j] -= theta[self.mu_off + j] / (pr.mu_sd * pr.mu_sd);
        }
        for i in 0..n_d {
            g[self.d_off + i] -= theta[self.d_off + i] / (pr.d_sd * pr.d_sd);
        }
        if let Some(off) = self.theta_off {
            g[off] -= theta[off] / (pr.theta_sd * pr.theta_sd);
        }
        for i in 0..n_beta {
            g[self.beta1_off + i] -= theta[self.beta1_off + i] / (pr.beta_sd * pr.beta_sd);
        }

        // Linear predictor.
        for (a, arm) in self.arms.iter().enumerate() {
            let ge = g_eta_arm[a];
            g[self.mu_off + arm.study] += ge;
            if arm.baseline {
                continue;
            }
            match arm.ume {
                Some(off) => g[off] += ge,
                None => {
                    if arm.treatment > 0 {
                        g[self.d_off + arm.treatment - 1] += ge;
                    }
                    let b = self.data.baseline(arm.study);
                    if b > 0 {
                        g[self.d_off + b - 1] -= ge;
                    }
                }
            }
            if let (Some(lt), Some(z)) = (self.log_tau_off, arm.re_z) {
                let tau = theta[lt].exp();
                let scale = self.re_scale(arm);
                let mut eps = theta[z];
                g[z] += ge * tau * scale;
                if let Some(s) = arm.re_shared {
                    eps += theta[s];
                    g[s] += ge * tau * scale;
                }
                g[lt] += ge * tau * scale * eps;
            }
            if arm.theta {
                g[self.theta_off.unwrap()] += ge;
            }
        }

        // Slot gradients to the inverse-softmax scale.
        if !per_record {
            for (si, &(gi, t)) in self.slots.iter().enumerate() {
                let n = base[gi].len();
                scratch_gs.resize(n, 0.0);
                softmax_backprop(&slot_alpha[si], &g_slot_alpha[si], &mut scratch_gs);
                g_base[gi].iter_mut().zip(&scratch_gs).for_each(|(a, b)| *a += b);
                if has_gamma {
                    g_gamma[t].iter_mut().zip(&scratch_gs).for_each(|(a, b)| *a += b);
                }
            }
        }

        // Baseline random walks.
        for (gi, grp) in self.groups.iter().enumerate() {
            let n = grp.n_free();
            if n == 0 {
                continue;
            }
            let ls = grp.log_sigma_off.unwrap();
            let z = &theta[grp.z_off..grp.z_off + n];
            let gl = rw_backprop(&grp.sqrt_w, theta[ls].exp(), z, &g_base[gi], &mut g[grp.z_off..grp.z_off + n]);
            g[ls] += gl;
        }

        // Non-proportionality effects.
        if let (Some(off), Some(ls)) = (self.gamma_off, self.log_sigma_alpha_off) {
            let n = self.n_free_common;
            let k = n_trt;
            let sigma = theta[ls].exp();
            let mut tails = vec![0.0; k];
            let mut g_ls = 0.0;
            for l in (0..n).rev() {
                let scale = sigma * self.common_sqrt_w[l] * FRAC_1_SQRT_2;
                let row = off + l * (k + 1);
                let mut shared = 0.0;
                for t in 0..k {
                    tails[t] += g_gamma[t][l];
                    g[row + t + 1] += tails[t] * scale;
                    shared += tails[t] * scale;
                    g_ls += tails[t] * scale * (theta[row + t + 1] + theta[row]);
                }
                g[row] += shared;
            }
            g[ls] += g_ls;
        }

        // Covariate effects on spline coefficients.
        for (ri, row) in self.spline_rows.iter().enumerate() {
            let n = self.n_free_common;
            let z = &theta[row.z_off..row.z_off + n];
            let gl = rw_backprop(
                &self.common_sqrt_w,
                theta[row.log_sigma_off].exp(),
                z,
                &g_rows[ri],
                &mut g[row.z_off..row.z_off + n],
            );
            g[row.log_sigma_off] += gl;
        }

        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", self.layout.name_of(bad))));
        }
        grad.copy_from_slice(&g);
        Ok(lp)
    }

    /// Named constrained quantities derived from a parameter vector.
    pub fn derived_quantities(&self, theta: &[f64]) -> Vec<(String, f64)> {
        let tl = self.data.treatment_labels();
        let mut out = Vec::new();
        if self.spec.inconsistency == Inconsistency::Ume {
            for (i, &(b, t)) in self.ume_pairs.iter().enumerate() {
                out.push((format!("d[{}:{}]", tl[b], tl[t]), theta[self.d_off + i]));
            }
        } else {
            for t in 1..tl.len() {
                out.push((format!("d[{}]", tl[t]), self.d_value(theta, t)));
            }
        }
        if let Some(lt) = self.log_tau_off {
            out.push(("tau".into(), theta[lt].exp()));
        }
        for grp in &self.groups {
            if let Some(ls) = grp.log_sigma_off {
                out.push((format!("sigma[{}]", grp.label), theta[ls].exp()));
            }
        }
        if let Some(ls) = self.log_sigma_alpha_off {
            out.push(("sigma_alpha".into(), theta[ls].exp()));
            for (t, c) in self.nonprop_contrasts(theta).iter().enumerate().skip(1) {
                for (l, v) in c.iter().enumerate() {
                    out.push((format!("d_alpha[{}:{}]", tl[t], l + 1), *v));
                }
            }
        }
        out
    }
}

impl LogDensity for NmaModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.evaluate(theta, Some(grad), None)
    }
}

/// Log-likelihood contribution of one observation given its hazard `h`,
/// cumulative hazard `cum_h` (both at unit rate) and log rate `eta`.
pub fn record_log_likelihood(h: f64, cum_h: f64, eta: f64, event: bool) -> f64 {
    let mut ll = -cum_h * eta.exp();
    if event {
        ll += h.ln() + eta;
    }
    ll
}

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences over `coords`.
pub fn gradient_discrepancy<M: LogDensity + ?Sized>(model: &M, theta: &[f64], coords: &[usize], h: f64) -> Result<f64> {
    let mut grad = vec![0.0; model.dim()];
    model.logp_grad(theta, &mut grad)?;
    let mut scratch = vec![0.0; model.dim()];
    let mut x = theta.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        x[i] = theta[i] + h;
        let up = model.logp_grad(&x, &mut scratch)?;
        x[i] = theta[i] - h;
        let dn = model.logp_grad(&x, &mut scratch)?;
        x[i] = theta[i];
        let fd = (up - dn) / (2.0 * h);
        let err = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
