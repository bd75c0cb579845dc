//! On-disk layout of a fitted model: draws, pointwise log-likelihoods,
//! metadata and a lossless copy of the data.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use msnma::data::SurvivalDataset;
use msnma::diagnostics::DiagnosticsReport;
use msnma::model::{ModelSpec, NmaModel};
use msnma::sampler::{Metric, PosteriorDraws, SamplerConfig};
use serde::{Deserialize, Serialize};

use crate::ingest::{dataset_csv, read_dataset};
use crate::output::{csv_manifest_hash, read_manifest, RunOutput};

pub const FIT_JSON: &str = "fit.json";
pub const DRAWS_CSV: &str = "draws.csv";
pub const POINTWISE_CSV: &str = "pointwise_loglik.csv";
pub const DATA_CSV: &str = "data.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const DERIVED_CSV: &str = "derived_summary.csv";

const SAMPLER_COLUMNS: [&str; 7] = ["chain", "iter", "lp__", "accept_stat__", "divergent__", "treedepth__", "n_leapfrog__"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub n_divergent: usize,
    pub depth_saturation: f64,
    pub max_rhat: Option<f64>,
    pub min_ess_bulk: Option<f64>,
    pub n_flagged: usize,
}

impl From<&DiagnosticsReport> for DiagnosticsSummary {
    fn from(r: &DiagnosticsReport) -> Self {
        Self {
            n_divergent: r.n_divergent,
            depth_saturation: r.depth_saturation,
            max_rhat: r.max_rhat,
            min_ess_bulk: r.min_ess_bulk,
            n_flagged: r.n_flagged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub name: String,
    pub spec: ModelSpec,
    pub sampler: SamplerConfig,
    pub data_sha256: String,
    pub study_labels: Vec<String>,
    pub treatment_labels: Vec<String>,
    pub covariate_names: Vec<String>,
    pub param_names: Vec<String>,
    pub n_chains: usize,
    pub n_iter: usize,
    pub n_records: usize,
    pub step_sizes: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub max_depth: usize,
    pub warnings: Vec<String>,
    pub diagnostics: DiagnosticsSummary,
}

pub fn draws_csv(draws: &PosteriorDraws) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = SAMPLER_COLUMNS.to_vec();
    header.extend(draws.param_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for d in 0..draws.n_draws() {
        let (c, i) = (d / draws.n_iter, d % draws.n_iter);
        let mut row = vec![
            c.to_string(),
            i.to_string(),
            draws.lp[d].to_string(),
            draws.accept_stat[d].to_string(),
            (draws.divergent[d] as u8).to_string(),
            draws.tree_depth[d].to_string(),
            draws.n_leapfrog[d].to_string(),
        ];
        row.extend(draws.draw(d).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

pub fn pointwise_csv(draws: &PosteriorDraws) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["chain".to_string(), "iter".to_string()];
    header.extend((0..draws.n_records).map(|r| format!("log_lik[{r}]")));
    w.write_record(&header)?;
    for d in 0..draws.n_draws() {
        let mut row = vec![(d / draws.n_iter).to_string(), (d % draws.n_iter).to_string()];
        row.extend(draws.pointwise_row(d).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

pub fn write_fit(
    out: &mut RunOutput,
    meta: &FitMetadata,
    data: &SurvivalDataset,
    draws: &PosteriorDraws,
    report: &DiagnosticsReport,
    derived: &[(String, Vec<f64>)],
) -> Result<()> {
    out.write_json(FIT_JSON, meta)?;
    out.write_csv(DRAWS_CSV, &draws_csv(draws)?)?;
    out.write_csv(POINTWISE_CSV, &pointwise_csv(draws)?)?;
    out.write_csv(DATA_CSV, &dataset_csv(data)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param", "mean", "sd", "rhat", "ess_bulk", "ess_tail", "flagged"])?;
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for p in &report.params {
        w.write_record([
            p.name.clone(),
            p.mean.to_string(),
            p.sd.to_string(),
            opt(p.rhat),
            opt(p.ess_bulk),
            opt(p.ess_tail),
            p.flagged.to_string(),
        ])?;
    }
    out.write_csv(SUMMARY_CSV, &w.into_inner()?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["quantity", "mean", "sd", "q2.5", "q50", "q97.5"])?;
    for (name, values) in derived {
        let mut v = values.clone();
        v.sort_by(f64::total_cmp);
        let mean = msnma::stats::mean(&v);
        let sd = if v.len() > 1 { msnma::stats::variance(&v).sqrt() } else { 0.0 };
        let q = |p| msnma::stats::quantile_sorted(&v, p).to_string();
        w.write_record([name.clone(), mean.to_string(), sd.to_string(), q(0.025), q(0.5), q(0.975)])?;
    }
    out.write_csv(DERIVED_CSV, &w.into_inner()?)?;
    Ok(())
}

/// Per-draw derived quantities, grouped by name.
pub fn derived_draws(model: &NmaModel, draws: &PosteriorDraws) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (d, theta) in draws.iter_draws().enumerate() {
        for (j, (name, v)) in model.derived_quantities(theta).into_iter().enumerate() {
            if d == 0 {
                out.push((name, Vec::with_capacity(draws.n_draws())));
            }
            out[j].1.push(v);
        }
    }
    out
}

/// A fit read back from disk.
pub struct StoredFit {
    pub dir: PathBuf,
    pub manifest_sha256: String,
    pub meta: FitMetadata,
    pub data: SurvivalDataset,
    pub model: NmaModel,
    pub draws: PosteriorDraws,
}

fn read_tagged(dir: &Path, name: &str, expect: &str) -> Result<String> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).with_context(|| format!("missing fit artifact {}", path.display()))?;
    match csv_manifest_hash(&text) {
        Some(h) if h == expect => Ok(text),
        _ => bail!("{} was not produced by the fit recorded in {}", path.display(), dir.display()),
    }
}

fn parse_rows(text: &str, skip: usize, width: usize, name: &str) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.len() != skip + width {
        bail!("{name}: expected {} columns, found {}", skip + width, header.len());
    }
    rdr.records()
        .map(|r| Ok(r.with_context(|| format!("reading {name}"))?.iter().map(String::from).collect()))
        .collect()
}

fn num<T: std::str::FromStr>(s: &str, name: &str) -> Result<T> {
    s.parse().ok().with_context(|| format!("{name}: cannot parse `{s}`"))
}

pub fn read_fit(dir: &Path) -> Result<StoredFit> {
    let stored = read_manifest(dir, "fit")?
        .with_context(|| format!("{} holds no fit; run `msnma fit` first", dir.display()))?;
    let hash = stored.manifest_sha256;
    let meta_text = std::fs::read(dir.join(FIT_JSON)).with_context(|| format!("missing {FIT_JSON} in {}", dir.display()))?;
    let meta_value: serde_json::Value = serde_json::from_slice(&meta_text)?;
    if meta_value["manifest_sha256"] != hash.as_str() {
        bail!("{FIT_JSON} in {} was not produced by the recorded fit", dir.display());
    }
    let meta: FitMetadata = serde_json::from_value(meta_value)?;

    let data_text = read_tagged(dir, DATA_CSV, &hash)?;
    let data = read_dataset(data_text.as_bytes(), Some(&meta.covariate_names), meta.treatment_labels.first().map(String::as_str))?;
    if data.study_labels() != meta.study_labels || data.treatment_labels() != meta.treatment_labels {
        bail!("stored data labels do not match {FIT_JSON}");
    }
    let model = NmaModel::new(meta.spec.clone(), &data)?;
    if model.layout().names() != meta.param_names {
        bail!("parameter layout differs from the stored fit; was it produced by another version?");
    }

    let dim = meta.param_names.len();
    let n = meta.n_chains * meta.n_iter;
    let rows = parse_rows(&read_tagged(dir, DRAWS_CSV, &hash)?, SAMPLER_COLUMNS.len(), dim, DRAWS_CSV)?;
    if rows.len() != n {
        bail!("{DRAWS_CSV}: expected {n} draws, found {}", rows.len());
    }
    let mut draws = PosteriorDraws {
        param_names: meta.param_names.clone(),
        n_chains: meta.n_chains,
        n_iter: meta.n_iter,
        n_records: meta.n_records,
        draws: Vec::with_capacity(n * dim),
        pointwise: Vec::with_capacity(n * meta.n_records),
        lp: Vec::with_capacity(n),
        accept_stat: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        tree_depth: Vec::with_capacity(n),
        n_leapfrog: Vec::with_capacity(n),
        step_sizes: meta.step_sizes.clone(),
        metrics: meta.metrics.clone(),
        max_depth: meta.max_depth,
        warnings: meta.warnings.clone(),
    };
    for row in &rows {
        draws.lp.push(num(&row[2], DRAWS_CSV)?);
        draws.accept_stat.push(num(&row[3], DRAWS_CSV)?);
        draws.divergent.push(num::<u8>(&row[4], DRAWS_CSV)? != 0);
        draws.tree_depth.push(num(&row[5], DRAWS_CSV)?);
        draws.n_leapfrog.push(num(&row[6], DRAWS_CSV)?);
        for v in &row[SAMPLER_COLUMNS.len()..] {
            draws.draws.push(num(v, DRAWS_CSV)?);
        }
    }
    let rows = parse_rows(&read_tagged(dir, POINTWISE_CSV, &hash)?, 2, meta.n_records, POINTWISE_CSV)?;
    if rows.len() != n {
        bail!("{POINTWISE_CSV}: expected {n} rows, found {}", rows.len());
    }
    for row in &rows {
        for v in &row[2..] {
            draws.pointwise.push(num(v, POINTWISE_CSV)?);
        }
    }
    Ok(StoredFit { dir: dir.to_path_buf(), manifest_sha256: hash, meta, data, model, draws })
}
