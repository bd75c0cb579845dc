//! Individual event/censoring records forming a treatment network.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One individual's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub study: usize,
    pub treatment: usize,
    pub time: f64,
    pub event: bool,
    #[serde(default)]
    pub covariates: Vec<f64>,
}

/// A record identified by string labels, before id assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub study: String,
    pub treatment: String,
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

/// Validated survival network. Treatment `0` is the network reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    study_labels: Vec<String>,
    treatment_labels: Vec<String>,
    covariate_names: Vec<String>,
    records: Vec<Record>,
    /// Treatments present in each study, sorted; the first is the study's baseline arm.
    arms: Vec<Vec<usize>>,
}

impl SurvivalDataset {
    pub fn new(
        study_labels: Vec<String>,
        treatment_labels: Vec<String>,
        covariate_names: Vec<String>,
        records: Vec<Record>,
    ) -> Result<Self> {
        let n_studies = study_labels.len();
        let n_treatments = treatment_labels.len();
        if n_studies == 0 || records.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        let mut arms: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_studies];
        for (i, r) in records.iter().enumerate() {
            if r.study >= n_studies || r.treatment >= n_treatments {
                return Err(Error::Dataset(format!("record {i}: study or treatment id out of range")));
            }
            if !r.time.is_finite() || r.time < 0.0 {
                return Err(Error::Dataset(format!(
                    "record {i}: time must be a finite nonnegative number, got {}",
                    r.time
                )));
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::Dataset(format!(
                    "record {i}: expected {} covariates, got {}",
                    covariate_names.len(),
                    r.covariates.len()
                )));
            }
            if r.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::Dataset(format!("record {i}: non-finite covariate")));
            }
            arms[r.study].insert(r.treatment);
        }
        for (j, a) in arms.iter().enumerate() {
            if a.len() < 2 {
                return Err(Error::Dataset(format!(
                    "study {} has {} arm(s); every study needs at least two",
                    study_labels[j],
                    a.len()
                )));
            }
        }
        let used: BTreeSet<usize> = arms.iter().flatten().copied().collect();
        if used.len() != n_treatments {
            let missing: Vec<&str> = (0..n_treatments)
                .filter(|t| !used.contains(t))
                .map(|t| treatment_labels[t].as_str())
                .collect();
            return Err(Error::Dataset(format!(
                "treatments without data: {}",
                missing.join(", ")
            )));
        }
        let arms: Vec<Vec<usize>> = arms.into_iter().map(|a| a.into_iter().collect()).collect();
        let ds = Self {
            study_labels,
            treatment_labels,
            covariate_names,
            records,
            arms,
        };
        let components = ds.components();
        if components.len() > 1 {
            let names: Vec<String> = components
                .iter()
                .map(|c| {
                    let labels: Vec<&str> = c.iter().map(|&t| ds.treatment_labels[t].as_str()).collect();
                    format!("{{{}}}", labels.join(", "))
                })
                .collect();
            return Err(Error::Dataset(format!(
                "network is disconnected; components: {}",
                names.join(" ")
            )));
        }
        Ok(ds)
    }

    /// Assigns ids from labels. Studies and treatments are ordered
    /// alphabetically, except that `reference` (if given) becomes treatment 0.
    pub fn from_labeled(
        rows: Vec<LabeledRecord>,
        covariate_names: Vec<String>,
        reference: Option<&str>,
    ) -> Result<Self> {
        let studies: BTreeSet<&str> = rows.iter().map(|r| r.study.as_str()).collect();
        let treatments: BTreeSet<&str> = rows.iter().map(|r| r.treatment.as_str()).collect();
        let mut treatment_labels: Vec<String> = treatments.iter().map(|s| s.to_string()).collect();
        if let Some(reference) = reference {
            let pos = treatment_labels
                .iter()
                .position(|t| t == reference)
                .ok_or_else(|| Error::Dataset(format!("reference treatment {reference} not found")))?;
            let r = treatment_labels.remove(pos);
            treatment_labels.insert(0, r);
        }
        let study_labels: Vec<String> = studies.iter().map(|s| s.to_string()).collect();
        let study_id: BTreeMap<&str, usize> =
            study_labels.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let trt_id: BTreeMap<&str, usize> =
            treatment_labels.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let records = rows
            .iter()
            .map(|r| Record {
                study: study_id[r.study.as_str()],
                treatment: trt_id[r.treatment.as_str()],
                time: r.time,
                event: r.event,
                covariates: r.covariates.clone(),
            })
            .collect();
        Self::new(study_labels, treatment_labels, covariate_names, records)
    }

    fn components(&self) -> Vec<Vec<usize>> {
        let k = self.treatment_labels.len();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for a in &self.arms {
            for w in a.windows(2) {
                let (x, y) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                parent[x.max(y)] = x.min(y);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for t in 0..k {
            let root = find(&mut parent, t);
            groups.entry(root).or_default().push(t);
        }
        groups.into_values().collect()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn n_studies(&self) -> usize {
        self.study_labels.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.treatment_labels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn study_labels(&self) -> &[String] {
        &self.study_labels
    }

    pub fn treatment_labels(&self) -> &[String] {
        &self.treatment_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn study_id(&self, label: &str) -> Option<usize> {
        self.study_labels.iter().position(|s| s == label)
    }

    pub fn treatment_id(&self, label: &str) -> Option<usize> {
        self.treatment_labels.iter().position(|s| s == label)
    }

    pub fn covariate_id(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|s| s == name)
    }

    /// Sorted treatments in study `j`.
    pub fn arms(&self, study: usize) -> &[usize] {
        &self.arms[study]
    }

    /// Treatment of the study's baseline arm.
    pub fn baseline(&self, study: usize) -> usize {
        self.arms[study][0]
    }

    pub fn has_arm(&self, study: usize, treatment: usize) -> bool {
        self.arms[study].binary_search(&treatment).is_ok()
    }

    /// Records of one study.
    pub fn study_records(&self, study: usize) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.study == study)
    }

    /// Event (non-censored) times of one study.
    pub fn event_times(&self, study: usize) -> Vec<f64> {
        self.study_records(study).filter(|r| r.event).map(|r| r.time).collect()
    }

    /// Last event or censoring time in one study.
    pub fn last_time(&self, study: usize) -> f64 {
        self.study_records(study).map(|r| r.time).fold(0.0, f64::max)
    }

    pub fn max_time(&self) -> f64 {
        self.records.iter().map(|r| r.time).fold(0.0, f64::max)
    }

    /// Returns a copy with every record duplicated `times` times.
    pub fn replicated(&self, times: usize) -> Self {
        let mut out = self.clone();
        out.records = self
            .records
            .iter()
            .flat_map(|r| std::iter::repeat_n(r.clone(), times))
            .collect();
        out
    }

    /// Returns the dataset without record `index` (used for leave-one-out refits).
    pub fn without_record(&self, index: usize) -> Result<Self> {
        let mut records = self.records.clone();
        records.remove(index);
        Self::new(
            self.study_labels.clone(),
            self.treatment_labels.clone(),
            self.covariate_names.clone(),
            records,
        )
    }

    pub fn summary(&self) -> NetworkSummary {
        let mut arms = Vec::new();
        for j in 0..self.n_studies() {
            for &t in self.arms(j) {
                let (n, events) = self
                    .study_records(j)
                    .filter(|r| r.treatment == t)
                    .fold((0, 0), |(n, e), r| (n + 1, e + r.event as usize));
                arms.push(ArmSummary {
                    study: self.study_labels[j].clone(),
                    treatment: self.treatment_labels[t].clone(),
                    n,
                    events,
                });
            }
        }
        let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for a in &self.arms {
            for (i, &x) in a.iter().enumerate() {
                for &y in &a[i + 1..] {
                    *edges.entry((x, y)).or_default() += 1;
                }
            }
        }
        NetworkSummary {
            n_studies: self.n_studies(),
            n_treatments: self.n_treatments(),
            reference: self.treatment_labels[0].clone(),
            arms,
            edges: edges
                .into_iter()
                .map(|((a, b), n)| Edge {
                    a: self.treatment_labels[a].clone(),
                    b: self.treatment_labels[b].clone(),
                    n_studies: n,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub study: String,
    pub treatment: String,
    pub n: usize,
    pub events: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub n_studies: usize,
}

/// Network structure and per-arm event counts.
#[derive(Debug, Clone, Serialize)]
pub struct NetworkSummary {
    pub n_studies: usize,
    pub n_treatments: usize,
    pub reference: String,
    pub arms: Vec<ArmSummary>,
    pub edges: Vec<Edge>,
}

impl fmt::Display for NetworkSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "J={} studies, K={} treatments (reference: {})",
            self.n_studies, self.n_treatments, self.reference
        )?;
        for a in &self.arms {
            writeln!(f, "  {:<16} {:<16} n={:<6} events={}", a.study, a.treatment, a.n, a.events)?;
        }
        for e in &self.edges {
            writeln!(f, "  {} -- {}: {} stud{}", e.a, e.b, e.n_studies, if e.n_studies == 1 { "y" } else { "ies" })?;
        }
        Ok(())
    }
}
