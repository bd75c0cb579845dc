use serde::{Deserialize, Serialize};

use crate::knots::KnotPlan;

/// How the baseline hazard varies between arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// One spline coefficient vector per study, shared by all arms.
    Ph,
    /// Independent coefficient vectors per arm (and/or discrete covariate stratum).
    NphStratified,
    /// Treatment effects on the inverse-softmax coefficients.
    NphCoefEffects,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effects {
    Fixed,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Inconsistency {
    Consistency,
    /// Unrelated mean effects: one independent effect per observed comparison.
    Ume,
    /// Inconsistency factor on the `b` vs `a` comparison (treatment ids).
    NodeSplit { a: usize, b: usize },
}

/// Prior scales. Location parameters are Normal(0, sd^2); scale parameters
/// are half-Normal(0, sd^2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSettings {
    pub mu_sd: f64,
    pub d_sd: f64,
    pub tau_sd: f64,
    pub theta_sd: f64,
    pub beta_sd: f64,
    /// Baseline random walk standard deviations.
    pub sigma_sd: f64,
    /// Non-proportionality random walk standard deviation.
    pub sigma_alpha_sd: f64,
    /// Random walk standard deviations for covariate effects on spline coefficients.
    pub sigma_b_sd: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            mu_sd: 10.0,
            d_sd: 10.0,
            tau_sd: 1.0,
            theta_sd: 10.0,
            beta_sd: 10.0,
            sigma_sd: 1.0,
            sigma_alpha_sd: 1.0,
            sigma_b_sd: 1.0,
        }
    }
}

/// Covariate roles, as column indices into the dataset's covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateDesign {
    /// Prognostic effects on the log hazard rate.
    pub prognostic: Vec<usize>,
    /// Treatment-covariate interactions on the log hazard rate.
    pub effect_modifiers: Vec<usize>,
    /// Main covariate effects on the inverse-softmax coefficients (coefficient-effects family).
    pub spline_main: Vec<usize>,
    /// Treatment-covariate interactions on the inverse-softmax coefficients.
    pub spline_interaction: Vec<usize>,
    /// Discrete covariates stratifying the coefficients (stratified family).
    pub strata: Vec<usize>,
    /// Whether the stratified family stratifies by treatment arm.
    pub stratify_by_treatment: bool,
    /// Whether the coefficient-effects family includes per-treatment effects.
    pub treatment_spline_effects: bool,
}

impl Default for CovariateDesign {
    fn default() -> Self {
        Self {
            prognostic: vec![],
            effect_modifiers: vec![],
            spline_main: vec![],
            spline_interaction: vec![],
            strata: vec![],
            stratify_by_treatment: true,
            treatment_spline_effects: true,
        }
    }
}

impl CovariateDesign {
    pub fn has_eta_covariates(&self) -> bool {
        !self.prognostic.is_empty() || !self.effect_modifiers.is_empty()
    }

    pub fn has_spline_covariates(&self) -> bool {
        !self.spline_main.is_empty() || !self.spline_interaction.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        !self.has_eta_covariates() && !self.has_spline_covariates() && self.strata.is_empty()
    }
}

/// Full model specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub effects: Effects,
    pub inconsistency: Inconsistency,
    /// Spline order (4 = cubic).
    pub kappa: usize,
    pub knots: KnotPlan,
    #[serde(default)]
    pub covariates: CovariateDesign,
    #[serde(default)]
    pub priors: PriorSettings,
}

impl ModelSpec {
    pub fn new(family: Family, kappa: usize, knots: KnotPlan) -> Self {
        Self {
            family,
            effects: Effects::Fixed,
            inconsistency: Inconsistency::Consistency,
            kappa,
            knots,
            covariates: CovariateDesign::default(),
            priors: PriorSettings::default(),
        }
    }

    pub fn with_effects(mut self, effects: Effects) -> Self {
        self.effects = effects;
        self
    }

    pub fn with_inconsistency(mut self, inconsistency: Inconsistency) -> Self {
        self.inconsistency = inconsistency;
        self
    }

    pub fn with_covariates(mut self, covariates: CovariateDesign) -> Self {
        self.covariates = covariates;
        self
    }
}
