//! Run configuration read from TOML.

use std::path::Path;

use anyhow::{bail, Context, Result};
use msnma::data::SurvivalDataset;
use msnma::knots::{audit_knots, plan_common, plan_per_study, KnotPlan, KnotWarning, QuantileType};
use msnma::model::{CovariateDesign, Effects, Family, Inconsistency, ModelSpec, PriorSettings};
use msnma::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_INTERNAL_KNOTS: usize = 7;
pub const DEFAULT_KAPPA: usize = 4;
pub const DEFAULT_AUDIT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model label used in comparison tables.
    pub name: Option<String>,
    /// Network reference treatment; the alphabetically first label when unset.
    pub reference_treatment: Option<String>,
    /// Extra data columns read as covariates; every extra column when unset.
    pub covariate_columns: Option<Vec<String>>,
    pub model: ModelSection,
    pub knots: KnotSection,
    pub priors: PriorSettings,
    pub covariates: CovariateRoles,
    pub sampler: SamplerConfig,
    pub prior_predictive: PriorPredictiveSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InconsistencyMode {
    #[default]
    Consistency,
    Ume,
    NodeSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub effects: Effects,
    pub inconsistency: InconsistencyMode,
    /// Treatment labels `[a, b]` of the split comparison.
    pub node_split: Option<[String; 2]>,
    pub kappa: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            family: Family::Ph,
            effects: Effects::Fixed,
            inconsistency: InconsistencyMode::Consistency,
            node_split: None,
            kappa: DEFAULT_KAPPA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotScheme {
    PerStudy,
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotInsert {
    pub study: Option<String>,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnotSection {
    pub n_internal: usize,
    /// Per-study for the proportional and stratified families and common for
    /// coefficient effects, when unset.
    pub scheme: Option<KnotScheme>,
    pub quantile: QuantileType,
    pub add: Vec<KnotInsert>,
    pub audit_fraction: f64,
}

impl Default for KnotSection {
    fn default() -> Self {
        Self {
            n_internal: DEFAULT_INTERNAL_KNOTS,
            scheme: None,
            quantile: QuantileType::Type7,
            add: vec![],
            audit_fraction: DEFAULT_AUDIT_FRACTION,
        }
    }
}

/// Covariate roles by column name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateRoles {
    pub prognostic: Vec<String>,
    pub effect_modifiers: Vec<String>,
    pub spline_main: Vec<String>,
    pub spline_interaction: Vec<String>,
    pub strata: Vec<String>,
    pub stratify_by_treatment: bool,
    pub treatment_spline_effects: bool,
}

impl Default for CovariateRoles {
    fn default() -> Self {
        let d = CovariateDesign::default();
        Self {
            prognostic: vec![],
            effect_modifiers: vec![],
            spline_main: vec![],
            spline_interaction: vec![],
            strata: vec![],
            stratify_by_treatment: d.stratify_by_treatment,
            treatment_spline_effects: d.treatment_spline_effects,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorPredictiveSection {
    pub n_draws: usize,
    /// Explicit knots `[lower, internal..., upper]`; planned from the data when unset.
    pub knots: Option<Vec<f64>>,
    pub kappa: Option<usize>,
    pub sigma_sd: f64,
    pub grid_points: usize,
}

impl Default for PriorPredictiveSection {
    fn default() -> Self {
        Self { n_draws: 10_000, knots: None, kappa: None, sigma_sd: 1.0, grid_points: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedArm {
    pub study: String,
    pub treatment: String,
    pub n: usize,
    /// Constant hazard rate.
    pub rate: Option<f64>,
    /// Spline hazard: knots `[lower, internal..., upper]`, order, simplex
    /// coefficients and log rate.
    pub knots: Option<Vec<f64>>,
    pub kappa: Option<usize>,
    pub coefficients: Option<Vec<f64>>,
    pub log_rate: Option<f64>,
    pub censor_at: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub arms: Vec<SimulatedArm>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn knot_scheme(&self) -> KnotScheme {
        self.knots.scheme.unwrap_or(match self.model.family {
            Family::NphCoefEffects => KnotScheme::Common,
            _ => KnotScheme::PerStudy,
        })
    }

    /// Knot plan from the data, with manual insertions applied in order.
    pub fn knot_plan(&self, data: &SurvivalDataset) -> Result<KnotPlan> {
        let k = &self.knots;
        let mut plan = match self.knot_scheme() {
            KnotScheme::PerStudy => plan_per_study(data, k.n_internal, k.quantile)?,
            KnotScheme::Common => plan_common(data, k.n_internal, k.quantile)?,
        };
        for insert in &k.add {
            let study = match &insert.study {
                Some(label) => {
                    let j = data.study_id(label).with_context(|| format!("knot insertion names unknown study {label}"))?;
                    Some((j, label.as_str()))
                }
                None => None,
            };
            plan = plan.add_knot(insert.time, study)?;
        }
        Ok(plan)
    }

    pub fn audit(&self, plan: &KnotPlan, data: &SurvivalDataset) -> Vec<KnotWarning> {
        audit_knots(plan, data, self.knots.audit_fraction)
    }

    fn covariate_ids(data: &SurvivalDataset, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| data.covariate_id(n).with_context(|| format!("unknown covariate column {n}")))
            .collect()
    }

    pub fn model_spec(&self, data: &SurvivalDataset) -> Result<ModelSpec> {
        let m = &self.model;
        let inconsistency = match (m.inconsistency, &m.node_split) {
            (InconsistencyMode::Consistency, _) => Inconsistency::Consistency,
            (InconsistencyMode::Ume, _) => Inconsistency::Ume,
            (InconsistencyMode::NodeSplit, Some([a, b])) => {
                let id = |l: &str| data.treatment_id(l).with_context(|| format!("unknown treatment {l}"));
                Inconsistency::NodeSplit { a: id(a)?, b: id(b)? }
            }
            (InconsistencyMode::NodeSplit, None) => bail!("node-split models need `node_split = [a, b]`"),
        };
        let c = &self.covariates;
        let covariates = CovariateDesign {
            prognostic: Self::covariate_ids(data, &c.prognostic)?,
            effect_modifiers: Self::covariate_ids(data, &c.effect_modifiers)?,
            spline_main: Self::covariate_ids(data, &c.spline_main)?,
            spline_interaction: Self::covariate_ids(data, &c.spline_interaction)?,
            strata: Self::covariate_ids(data, &c.strata)?,
            stratify_by_treatment: c.stratify_by_treatment,
            treatment_spline_effects: c.treatment_spline_effects,
        };
        Ok(ModelSpec {
            family: m.family,
            effects: m.effects,
            inconsistency,
            kappa: m.kappa,
            knots: self.knot_plan(data)?,
            covariates,
            priors: self.priors,
        })
    }
}
