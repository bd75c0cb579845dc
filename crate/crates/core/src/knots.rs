//! Knot placement from observed event times, and checks for placements that
//! tend to frustrate estimation.

use serde::{Deserialize, Serialize};

use crate::basis::KnotVector;
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, quantile_sorted_type6, sort_floats};

/// Default number of internal knots.
pub const DEFAULT_INTERNAL_KNOTS: usize = 7;

/// Default audit threshold, as a fraction of the inter-knot gap.
pub const DEFAULT_AUDIT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileType {
    /// Linear interpolation between order statistics, `h = (n - 1) p`.
    #[default]
    Type7,
    /// `h = (n + 1) p`.
    Type6,
}

impl QuantileType {
    fn eval(self, sorted: &[f64], p: f64) -> f64 {
        match self {
            QuantileType::Type7 => quantile_sorted(sorted, p),
            QuantileType::Type6 => quantile_sorted_type6(sorted, p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "knots")]
pub enum PlanKnots {
    PerStudy(Vec<KnotVector>),
    Common(KnotVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotOverride {
    /// Study label for per-study plans; `None` for a common plan.
    pub study: Option<String>,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scheme: String,
    pub n_internal: usize,
    pub quantile: QuantileType,
    pub overrides: Vec<KnotOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotPlan {
    pub knots: PlanKnots,
    pub provenance: Provenance,
}

impl KnotPlan {
    pub fn is_common(&self) -> bool {
        matches!(self.knots, PlanKnots::Common(_))
    }

    /// Knots used for study `j`.
    pub fn for_study(&self, study: usize) -> &KnotVector {
        match &self.knots {
            PlanKnots::PerStudy(v) => &v[study],
            PlanKnots::Common(k) => k,
        }
    }

    /// A plan using the same knots for all studies.
    pub fn common(knots: KnotVector, scheme: &str) -> Self {
        let n_internal = knots.n_internal();
        Self {
            knots: PlanKnots::Common(knots),
            provenance: Provenance {
                scheme: scheme.into(),
                n_internal,
                quantile: QuantileType::Type7,
                overrides: vec![],
            },
        }
    }

    /// Adds an internal knot; `study` must be given for per-study plans.
    pub fn add_knot(&self, time: f64, study: Option<(usize, &str)>) -> Result<Self> {
        let insert = |k: &KnotVector| -> Result<KnotVector> {
            if !(time > k.lower() && time < k.upper()) {
                return Err(Error::InvalidKnots(format!(
                    "new knot {time} must lie strictly inside ({}, {})",
                    k.lower(),
                    k.upper()
                )));
            }
            if k.internal().contains(&time) {
                return Err(Error::InvalidKnots(format!("a knot already exists at {time}")));
            }
            let mut internal = k.internal().to_vec();
            internal.push(time);
            sort_floats(&mut internal);
            KnotVector::new(k.lower(), k.upper(), internal)
        };
        let mut out = self.clone();
        let label = match (&mut out.knots, study) {
            (PlanKnots::Common(k), None) => {
                *k = insert(k)?;
                None
            }
            (PlanKnots::PerStudy(v), Some((j, label))) => {
                let kv = v.get_mut(j).ok_or_else(|| Error::InvalidArgument(format!("no study {j}")))?;
                *kv = insert(kv)?;
                Some(label.to_string())
            }
            (PlanKnots::Common(_), Some(_)) => {
                return Err(Error::InvalidArgument("common knot plans do not take a study".into()))
            }
            (PlanKnots::PerStudy(_), None) => {
                return Err(Error::InvalidArgument("per-study knot plans require a study".into()))
            }
        };
        out.provenance.overrides.push(KnotOverride { study: label, time });
        Ok(out)
    }
}

fn distinct_sorted(mut v: Vec<f64>) -> Vec<f64> {
    sort_floats(&mut v);
    v.dedup();
    v
}

/// Smallest positive spacing between distinct values.
fn resolution(distinct: &[f64]) -> f64 {
    distinct
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

fn separate(mut internal: Vec<f64>, lower: f64, upper: f64, res: f64, study: &str) -> Result<KnotVector> {
    let step = res / (internal.len() as f64 + 1.0);
    for i in 0..internal.len() {
        let floor = if i == 0 { lower } else { internal[i - 1] };
        if internal[i] <= floor {
            internal[i] = floor + step;
        }
    }
    KnotVector::new(lower, upper, internal).map_err(|e| Error::KnotPlacement {
        study: study.into(),
        message: format!("cannot form strictly increasing knots ({e}); try fewer internal knots"),
    })
}

fn quantile_grid(sorted: &[f64], n_internal: usize, q: QuantileType, with_ends: bool) -> Vec<f64> {
    let m = n_internal + 1;
    let range = if with_ends { 0..=m } else { 1..=n_internal };
    range.map(|i| q.eval(sorted, i as f64 / m as f64)).collect()
}

/// Internal knots at evenly spaced quantiles of the study's event times.
pub fn plan_study_knots(
    data: &SurvivalDataset,
    study: usize,
    n_internal: usize,
    quantile: QuantileType,
) -> Result<KnotVector> {
    let label = &data.study_labels()[study];
    let events = distinct_sorted(data.event_times(study));
    if events.len() < n_internal + 1 {
        return Err(Error::KnotPlacement {
            study: label.clone(),
            message: format!(
                "{} distinct event time(s) cannot support {n_internal} internal knots; use at most {}",
                events.len(),
                events.len().saturating_sub(1)
            ),
        });
    }
    let mut all = data.event_times(study);
    sort_floats(&mut all);
    let internal = quantile_grid(&all, n_internal, quantile, false);
    separate(internal, 0.0, data.last_time(study), resolution(&events), label)
}

/// Common knots: quantiles of the pooled per-study event-time quantiles.
pub fn plan_common_knots(
    data: &SurvivalDataset,
    n_internal: usize,
    quantile: QuantileType,
) -> Result<KnotVector> {
    let mut pool = Vec::new();
    let mut res = f64::INFINITY;
    for j in 0..data.n_studies() {
        let events = distinct_sorted(data.event_times(j));
        if events.len() < 2 {
            return Err(Error::KnotPlacement {
                study: data.study_labels()[j].clone(),
                message: "needs at least two distinct event times".into(),
            });
        }
        res = res.min(resolution(&events));
        let mut all = data.event_times(j);
        sort_floats(&mut all);
        pool.extend(quantile_grid(&all, n_internal, quantile, true));
    }
    sort_floats(&mut pool);
    let internal = quantile_grid(&pool, n_internal, quantile, false);
    separate(internal, 0.0, data.max_time(), res, "(common)")
}

/// Per-study plan for every study.
pub fn plan_per_study(data: &SurvivalDataset, n_internal: usize, quantile: QuantileType) -> Result<KnotPlan> {
    let knots = (0..data.n_studies())
        .map(|j| plan_study_knots(data, j, n_internal, quantile))
        .collect::<Result<Vec<_>>>()?;
    Ok(KnotPlan {
        knots: PlanKnots::PerStudy(knots),
        provenance: Provenance {
            scheme: "per-study event-time quantiles".into(),
            n_internal,
            quantile,
            overrides: vec![],
        },
    })
}

pub fn plan_common(data: &SurvivalDataset, n_internal: usize, quantile: QuantileType) -> Result<KnotPlan> {
    Ok(KnotPlan {
        knots: PlanKnots::Common(plan_common_knots(data, n_internal, quantile)?),
        provenance: Provenance {
            scheme: "common quantiles of per-study event-time quantiles".into(),
            n_internal,
            quantile,
            overrides: vec![],
        },
    })
}

/// A study whose follow-up ends shortly after an internal knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotWarning {
    pub study: String,
    pub knot: f64,
    pub last_time: f64,
    pub distance: f64,
    /// Distance as a fraction of the gap to the next knot.
    pub fraction: f64,
}

impl std::fmt::Display for KnotWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "study {}: follow-up ends at {} only {} ({:.1}% of the knot gap) after the knot at {}",
            self.study,
            self.last_time,
            self.distance,
            100.0 * self.fraction,
            self.knot
        )
    }
}

/// Flags studies whose last observation falls within `fraction` of the
/// following inter-knot gap after an internal knot.
pub fn audit_knots(plan: &KnotPlan, data: &SurvivalDataset, fraction: f64) -> Vec<KnotWarning> {
    let mut out = Vec::new();
    for j in 0..data.n_studies() {
        let last = data.last_time(j);
        let all = plan.for_study(j).all();
        for l in 1..all.len() - 1 {
            let distance = last - all[l];
            let gap = all[l + 1] - all[l];
            if distance > 0.0 && distance <= fraction * gap {
                out.push(KnotWarning {
                    study: data.study_labels()[j].clone(),
                    knot: all[l],
                    last_time: last,
                    distance,
                    fraction: distance / gap,
                });
            }
        }
    }
    out
}

/// One step of a Kaplan-Meier curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    pub n_risk: usize,
    pub n_events: usize,
}

/// Kaplan-Meier estimate from `(time, event)` pairs, starting at `(0, 1)`.
pub fn kaplan_meier(obs: &[(f64, bool)]) -> Vec<KmPoint> {
    let mut sorted = obs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![KmPoint {
        time: 0.0,
        survival: 1.0,
        n_risk: sorted.len(),
        n_events: 0,
    }];
    let mut s = 1.0;
    let mut at_risk = sorted.len();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let mut events = 0;
        let mut total = 0;
        while i < sorted.len() && sorted[i].0 == t {
            events += sorted[i].1 as usize;
            total += 1;
            i += 1;
        }
        if events > 0 {
            s *= 1.0 - events as f64 / at_risk as f64;
            out.push(KmPoint {
                time: t,
                survival: s,
                n_risk: at_risk,
                n_events: events,
            });
        }
        at_risk -= total;
    }
    out
}
