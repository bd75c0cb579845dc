//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use msnma::basis::KnotVector;
use msnma::data::{LabeledRecord, SurvivalDataset};
use msnma::diagnostics::diagnostics;
use msnma::knots::{kaplan_meier, plan_common_knots};
use msnma::prior_predictive::{
    hazard_ratio_range_quantile, sample_prior_hazards, sample_prior_log_hr, variant_seed, PriorVariant,
};
use msnma::products::{
    default_grid, export_mvn, format_exact, log_hazard_ratio_curves, predict_curves, psis_loo, round_trip_gaps,
    simulate_arm, CurveEstimate, LooReport, MvnExport, Ribbon, SplineHazard,
};
use msnma::sampler::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cli::{CurveArgs, ExportArgs, FitArgs, KnotsArgs, LooArgs, PredictArgs, PriorPredictiveArgs, SimulateArgs};
use crate::config::RunConfig;
use crate::fit_store::{derived_draws, read_fit, write_fit, DiagnosticsSummary, FitMetadata, StoredFit};
use crate::ingest::{dataset_csv, read_dataset};
use crate::output::{read_manifest, sha256_hex, RunManifest, RunOutput};

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn config_hash(config: &RunConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

/// Reads the data file, returning the dataset and the hash of its bytes.
fn load_data(path: &Path, config: &RunConfig) -> Result<(SurvivalDataset, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("opening data file {}", path.display()))?;
    let data = read_dataset(
        bytes.as_slice(),
        config.covariate_columns.as_deref(),
        config.reference_treatment.as_deref(),
    )
    .with_context(|| format!("reading {}", path.display()))?;
    Ok((data, sha256_hex(&bytes)))
}

/// Replaces characters that are awkward in file names.
pub fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn ribbon_header(lead: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    h.extend(["q2.5", "q10", "q25", "q50", "q75", "q90", "q97.5"].map(String::from));
    h
}

fn ribbon_row(r: &Ribbon, t: usize) -> Vec<String> {
    let iv = |level: f64| r.interval(level).expect("standard ribbon level");
    let (i95, i80, i50) = (iv(0.95), iv(0.8), iv(0.5));
    [i95.lower[t], i80.lower[t], i50.lower[t], r.median[t], i50.upper[t], i80.upper[t], i95.upper[t]]
        .iter()
        .map(|v| v.to_string())
        .collect()
}

pub fn run_knots(args: &KnotsArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let (data, data_hash) = load_data(&args.data, &config)?;
    println!("{}", data.summary());
    let plan = config.knot_plan(&data)?;
    let warnings = config.audit(&plan, &data);
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut manifest = RunManifest::new("knots");
    manifest.config_sha256 = Some(config_hash(&config));
    manifest.data_sha256 = Some(data_hash);
    manifest.knot_plan = Some(plan.clone());
    let mut out = RunOutput::new(&args.out_dir, manifest, None);

    #[derive(Serialize)]
    struct KnotReport<'a> {
        plan: &'a msnma::knots::KnotPlan,
        studies: Vec<(String, Vec<f64>)>,
        audit_fraction: f64,
        warnings: Vec<(String, msnma::knots::KnotWarning)>,
        network: msnma::data::NetworkSummary,
    }
    let studies = (0..data.n_studies())
        .map(|j| (data.study_labels()[j].clone(), plan.for_study(j).all()))
        .collect();
    out.write_json(
        "knots.json",
        &KnotReport {
            plan: &plan,
            studies,
            audit_fraction: config.knots.audit_fraction,
            warnings: warnings.iter().map(|w| (w.to_string(), w.clone())).collect(),
            network: data.summary(),
        },
    )?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["study", "treatment", "time", "survival", "n_risk", "n_events"])?;
    for j in 0..data.n_studies() {
        for &k in data.arms(j) {
            let obs: Vec<(f64, bool)> = data
                .study_records(j)
                .filter(|r| r.treatment == k)
                .map(|r| (r.time, r.event))
                .collect();
            for p in kaplan_meier(&obs) {
                w.write_record([
                    data.study_labels()[j].clone(),
                    data.treatment_labels()[k].clone(),
                    p.time.to_string(),
                    p.survival.to_string(),
                    p.n_risk.to_string(),
                    p.n_events.to_string(),
                ])?;
            }
        }
    }
    out.write_csv("km.csv", &w.into_inner()?)?;
    out.finish()?;
    Ok(())
}

pub fn run_fit(args: &FitArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.sampler.seed = s;
    }
    if let Some(c) = args.chains {
        config.sampler.n_chains = c;
    }
    if let Some(w) = args.iter_warmup {
        config.sampler.warmup = w;
    }
    if let Some(s) = args.iter_sampling {
        config.sampler.sampling = s;
    }
    if let Some(r) = &args.reference {
        config.reference_treatment = Some(r.clone());
    }
    config.sampler.validate()?;
    let (data, data_hash) = load_data(&args.data, &config)?;
    println!("{}", data.summary());
    let spec = config.model_spec(&data)?;
    for w in config.audit(&spec.knots, &data) {
        log::warn!("{w}");
    }
    let model = msnma::model::NmaModel::new(spec.clone(), &data)?;
    let name = config.name.clone().unwrap_or_else(|| {
        args.out_dir.file_name().map_or_else(|| "fit".to_string(), |n| n.to_string_lossy().into_owned())
    });

    let mut manifest = RunManifest::new("fit");
    manifest.config_sha256 = Some(config_hash(&config));
    manifest.data_sha256 = Some(data_hash.clone());
    manifest.knot_plan = Some(spec.knots.clone());
    manifest.seed = Some(config.sampler.seed);
    manifest.settings = serde_json::json!({ "name": name });
    if let Some(prev) = read_manifest(&args.out_dir, "fit")? {
        if prev.manifest_sha256 != manifest.hash() && !args.force {
            bail!(
                "{} already holds a fit with different settings or data; use --force to replace it",
                args.out_dir.display()
            );
        }
    }

    log::info!(
        "sampling {} chains x ({} warmup + {} draws), {} parameters",
        config.sampler.n_chains,
        config.sampler.warmup,
        config.sampler.sampling,
        model.layout().dim()
    );
    let draws = sample(&model, &config.sampler)?;
    let report = diagnostics(&draws);
    let summary = DiagnosticsSummary::from(&report);
    println!(
        "divergent: {}, max R-hat: {}, min bulk ESS: {}, flagged parameters: {}",
        summary.n_divergent,
        summary.max_rhat.map_or("NA".into(), |r| format!("{r:.3}")),
        summary.min_ess_bulk.map_or("NA".into(), |e| format!("{e:.0}")),
        summary.n_flagged
    );
    let meta = FitMetadata {
        name,
        spec,
        sampler: config.sampler.clone(),
        data_sha256: data_hash,
        study_labels: data.study_labels().to_vec(),
        treatment_labels: data.treatment_labels().to_vec(),
        covariate_names: data.covariate_names().to_vec(),
        param_names: draws.param_names.clone(),
        n_chains: draws.n_chains,
        n_iter: draws.n_iter,
        n_records: draws.n_records,
        step_sizes: draws.step_sizes.clone(),
        metrics: draws.metrics.clone(),
        max_depth: draws.max_depth,
        warnings: draws.warnings.clone(),
        diagnostics: summary,
    };
    let derived = derived_draws(&model, &draws);
    let mut out = RunOutput::new(&args.out_dir, manifest, None);
    write_fit(&mut out, &meta, &data, &draws, &report, &derived)?;
    out.finish()?;
    Ok(())
}

struct CurveRequest {
    fit: StoredFit,
    population: usize,
    treatments: Vec<usize>,
    grid: Vec<f64>,
    covariates: Option<Vec<f64>>,
}

fn curve_request(args: &CurveArgs) -> Result<CurveRequest> {
    let fit = read_fit(args.fit.as_deref().unwrap_or(&args.out_dir))?;
    if let Some(path) = &args.data {
        let bytes = std::fs::read(path).with_context(|| format!("opening {}", path.display()))?;
        if sha256_hex(&bytes) != fit.meta.data_sha256 {
            bail!("{} differs from the data the fit in {} was run on", path.display(), fit.dir.display());
        }
    }
    let data = &fit.data;
    let population = data
        .study_id(&args.population)
        .with_context(|| format!("unknown population `{}`; studies are {:?}", args.population, data.study_labels()))?;
    let treatments = match &args.treatments {
        Some(list) => list
            .iter()
            .map(|t| data.treatment_id(t).with_context(|| format!("unknown treatment `{t}`")))
            .collect::<Result<Vec<_>>>()?,
        None => (0..data.n_treatments()).collect(),
    };
    let covariates = match &args.covariates {
        None => None,
        Some(pairs) => {
            let mut values: BTreeMap<&str, f64> = BTreeMap::new();
            for p in pairs {
                let (k, v) = p.split_once('=').with_context(|| format!("covariate `{p}` is not name=value"))?;
                let v: f64 = v.trim().parse().with_context(|| format!("covariate `{p}`: bad number"))?;
                values.insert(k.trim(), v);
            }
            let x = data
                .covariate_names()
                .iter()
                .map(|n| values.remove(n.as_str()).with_context(|| format!("missing value for covariate `{n}`")))
                .collect::<Result<Vec<f64>>>()?;
            if let Some(extra) = values.keys().next() {
                bail!("unknown covariate `{extra}`");
            }
            Some(x)
        }
    };
    let horizon = args.grid_max.unwrap_or_else(|| data.max_time());
    let knots = fit.meta.spec.knots.for_study(population).all();
    let grid = default_grid(horizon, &knots, args.grid_points)?;
    Ok(CurveRequest { fit, population, treatments, grid, covariates })
}

fn curves_csv(curves: &[CurveEstimate], covariate_names: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = ribbon_header(&["quantity", "population", "treatment", "reference"]);
    header.extend(covariate_names.iter().cloned());
    header.insert(4, "time".into());
    w.write_record(&header)?;
    for c in curves {
        for t in 0..c.ribbon.times.len() {
            let mut row = vec![
                c.quantity.as_str().to_string(),
                c.population.clone(),
                c.treatment.clone(),
                c.reference.clone().unwrap_or_default(),
                c.ribbon.times[t].to_string(),
            ];
            row.extend(ribbon_row(&c.ribbon, t));
            if let Some(x) = &c.covariates {
                row.extend(x.iter().map(|v| v.to_string()));
            } else {
                row.extend(covariate_names.iter().map(|_| String::new()));
            }
            w.write_record(&row)?;
        }
    }
    Ok(w.into_inner()?)
}

pub fn run_predict(args: &PredictArgs) -> Result<()> {
    let req = curve_request(&args.curves)?;
    let data = &req.fit.data;
    let reference = match &args.reference {
        Some(r) => data.treatment_id(r).with_context(|| format!("unknown reference `{r}`"))?,
        None => 0,
    };
    let cov = req.covariates.as_deref();
    let mut curves = predict_curves(&req.fit.model, &req.fit.draws, req.population, &req.treatments, &req.grid, cov)?;
    let mut with_ref = req.treatments.clone();
    if !with_ref.contains(&reference) {
        with_ref.push(reference);
    }
    curves.extend(log_hazard_ratio_curves(&req.fit.model, &req.fit.draws, req.population, &with_ref, reference, &req.grid, cov)?);
    if data.n_covariates() > 0 && cov.is_none() {
        log::info!("curves use covariates at their sample means");
    }

    let pop = &data.study_labels()[req.population];
    let key = format!("predict_{}", file_label(pop));
    let mut manifest = RunManifest::new("predict");
    manifest.upstream = vec![req.fit.manifest_sha256.clone()];
    manifest.settings = serde_json::json!({
        "population": pop,
        "treatments": req.treatments.iter().map(|&t| &data.treatment_labels()[t]).collect::<Vec<_>>(),
        "reference": data.treatment_labels()[reference],
        "grid": req.grid,
        "covariates": req.covariates,
    });
    let mut out = RunOutput::new(&args.curves.out_dir, manifest, Some(&key));
    out.write_csv(&format!("curves_{}.csv", file_label(pop)), &curves_csv(&curves, data.covariate_names())?)?;
    out.write_json(&format!("curves_{}.json", file_label(pop)), &serde_json::json!({ "curves": curves }))?;
    out.finish()?;
    Ok(())
}

/// LOOIC table with one column per model and rows for each study, the total
/// and the effective number of parameters.
pub fn loo_table(models: &[(String, LooReport)]) -> Result<Vec<u8>> {
    let mut studies: Vec<String> = Vec::new();
    for (_, r) in models {
        for (s, _) in &r.per_study {
            if !studies.contains(s) {
                studies.push(s.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string()];
    header.extend(models.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for s in &studies {
        let mut row = vec![s.clone()];
        for (_, r) in models {
            row.push(r.per_study.iter().find(|(l, _)| l == s).map_or(String::new(), |(_, v)| v.to_string()));
        }
        w.write_record(&row)?;
    }
    let mut total = vec!["Total".to_string()];
    total.extend(models.iter().map(|(_, r)| r.looic.to_string()));
    w.write_record(&total)?;
    let mut p = vec!["p_loo".to_string()];
    p.extend(models.iter().map(|(_, r)| r.p_loo.to_string()));
    w.write_record(&p)?;
    Ok(w.into_inner()?)
}

pub fn run_loo(args: &LooArgs) -> Result<()> {
    let dirs = if args.fit.is_empty() { vec![args.out_dir.clone()] } else { args.fit.clone() };
    let mut models: Vec<(String, LooReport)> = Vec::new();
    let mut upstream = Vec::new();
    for dir in &dirs {
        let fit = read_fit(dir)?;
        let report = psis_loo(&fit.draws, &fit.model.record_studies(), fit.data.study_labels());
        for w in &report.warnings {
            log::warn!("{}: {w}", fit.meta.name);
        }
        let mut name = fit.meta.name.clone();
        let mut i = 2;
        while models.iter().any(|(n, _)| *n == name) {
            name = format!("{}_{i}", fit.meta.name);
            i += 1;
        }
        println!("{name}: LOOIC {:.1} (SE {:.1}), p_loo {:.1}", report.looic, report.se_looic, report.p_loo);
        upstream.push(fit.manifest_sha256);
        models.push((name, report));
    }
    let mut manifest = RunManifest::new("loo");
    manifest.upstream = upstream;
    manifest.settings = serde_json::json!({ "models": models.iter().map(|(n, _)| n).collect::<Vec<_>>() });
    let mut out = RunOutput::new(&args.out_dir, manifest, None);
    out.write_csv("loo.csv", &loo_table(&models)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "record", "study", "elpd", "lpd", "pareto_k"])?;
    for (name, r) in &models {
        for (i, p) in r.points.iter().enumerate() {
            w.write_record([
                name.clone(),
                i.to_string(),
                p.study.clone(),
                p.elpd.to_string(),
                p.lpd.to_string(),
                p.pareto_k.map_or_else(|| "NA".into(), |k| k.to_string()),
            ])?;
        }
    }
    out.write_csv("loo_pointwise.csv", &w.into_inner()?)?;
    #[derive(Serialize)]
    struct ModelLoo<'a> {
        model: &'a str,
        looic: f64,
        se_looic: f64,
        elpd: f64,
        p_loo: f64,
        n_high_k: usize,
        per_study: &'a [(String, f64)],
        warnings: &'a [String],
    }
    let summary: Vec<ModelLoo> = models
        .iter()
        .map(|(n, r)| ModelLoo {
            model: n,
            looic: r.looic,
            se_looic: r.se_looic,
            elpd: r.elpd,
            p_loo: r.p_loo,
            n_high_k: r.n_high_k,
            per_study: &r.per_study,
            warnings: &r.warnings,
        })
        .collect();
    out.write_json("loo.json", &serde_json::json!({ "models": summary }))?;
    out.finish()?;
    Ok(())
}

pub fn run_prior_predictive(args: &PriorPredictiveArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let pp = &config.prior_predictive;
    let mut data_hash = None;
    let knots = match (&pp.knots, &args.data) {
        (Some(k), _) => {
            if k.len() < 2 {
                bail!("prior_predictive.knots needs at least the two boundary knots");
            }
            KnotVector::new(k[0], k[k.len() - 1], k[1..k.len() - 1].to_vec())?
        }
        (None, Some(path)) => {
            let (data, hash) = load_data(path, &config)?;
            data_hash = Some(hash);
            plan_common_knots(&data, config.knots.n_internal, config.knots.quantile)?
        }
        (None, None) => bail!("prior-predictive needs `prior_predictive.knots` in the config or --data"),
    };
    let kappa = pp.kappa.unwrap_or(config.model.kappa);
    let seed = args.seed.unwrap_or(config.sampler.seed);
    let horizon = args.grid_max.map_or(knots.upper(), |g| g.min(knots.upper()));
    let grid: Vec<f64> = default_grid(horizon, &knots.all(), pp.grid_points)?
        .into_iter()
        .filter(|t| knots.contains(*t))
        .collect();

    let mut manifest = RunManifest::new("prior_predictive");
    manifest.config_sha256 = Some(config_hash(&config));
    manifest.data_sha256 = data_hash;
    manifest.seed = Some(seed);
    manifest.settings = serde_json::json!({ "knots": knots.all(), "kappa": kappa, "grid": grid });
    let mut out = RunOutput::new(&args.out_dir, manifest, None);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ribbon_header(&["variant", "time"]))?;
    let mut ranges = serde_json::Map::new();
    for v in PriorVariant::ALL {
        let h = sample_prior_hazards(&knots, kappa, v, pp.n_draws, pp.sigma_sd, &grid, variant_seed(seed, v))?;
        let ribbon = Ribbon::from_draws(&grid, &h);
        for t in 0..grid.len() {
            let mut row = vec![v.as_str().to_string(), grid[t].to_string()];
            row.extend(ribbon_row(&ribbon, t));
            w.write_record(&row)?;
        }
        ranges.insert(v.as_str().into(), hazard_ratio_range_quantile(&h, grid.len(), 0.95).into());
    }
    out.write_csv("prior_hazard.csv", &w.into_inner()?)?;

    let lhr = sample_prior_log_hr(&knots, kappa, pp.n_draws, pp.sigma_sd, &grid, seed.wrapping_add(1))?;
    let ribbon = Ribbon::from_draws(&grid, &lhr);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ribbon_header(&["time"]))?;
    for t in 0..grid.len() {
        let mut row = vec![grid[t].to_string()];
        row.extend(ribbon_row(&ribbon, t));
        w.write_record(&row)?;
    }
    out.write_csv("prior_log_hr.csv", &w.into_inner()?)?;
    out.write_json(
        "prior_summary.json",
        &serde_json::json!({
            "knots": knots.all(),
            "kappa": kappa,
            "n_draws": pp.n_draws,
            "sigma_sd": pp.sigma_sd,
            "hazards_scaled_to": "unit cumulative hazard over the knot span",
            "q95_max_min_hazard_ratio": ranges,
        }),
    )?;
    out.finish()?;
    Ok(())
}

/// File names of an export bundle for one population.
pub struct MvnFiles {
    pub metadata: String,
    pub mean: String,
    pub ispline: String,
    pub covariance: Vec<String>,
}

pub fn mvn_files(population: &str, treatments: &[String]) -> MvnFiles {
    let p = file_label(population);
    MvnFiles {
        metadata: format!("mvn_{p}.json"),
        mean: format!("mvn_{p}_mean.csv"),
        ispline: format!("mvn_{p}_ispline.csv"),
        covariance: treatments.iter().map(|t| format!("mvn_{p}_cov_{}.csv", file_label(t))).collect(),
    }
}

fn matrix_text(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner()?)
}

pub fn run_export(args: &ExportArgs) -> Result<()> {
    let req = curve_request(&args.curves)?;
    let data = &req.fit.data;
    let cov = req.covariates.as_deref();
    let export = export_mvn(&req.fit.model, &req.fit.draws, req.population, &req.treatments, &req.grid, cov)?;
    let gaps = round_trip_gaps(
        &req.fit.model,
        &req.fit.draws,
        &export,
        req.population,
        &req.treatments,
        args.n_resample,
        args.seed,
    )?;
    let pop = data.study_labels()[req.population].clone();
    let trts: Vec<String> = req.treatments.iter().map(|&t| data.treatment_labels()[t].clone()).collect();
    let files = mvn_files(&pop, &trts);
    let mut manifest = RunManifest::new("export_mvn");
    manifest.upstream = vec![req.fit.manifest_sha256.clone()];
    manifest.seed = Some(args.seed);
    manifest.settings = serde_json::json!({
        "population": pop, "treatments": trts, "grid": req.grid, "covariates": req.covariates,
        "n_resample": args.n_resample,
    });
    let mut out = RunOutput::new(&args.curves.out_dir, manifest, Some(&format!("export_mvn_{}", file_label(&pop))));

    let dim = export.n_basis;
    let mut names: Vec<String> = (1..dim).map(|l| format!("alpha_star[{l}]")).collect();
    names.push("eta".into());
    let mut header = vec!["treatment".to_string()];
    header.extend(names.iter().cloned());
    out.write_csv(
        &files.mean,
        &matrix_text(
            &header,
            export.entries.iter().map(|e| {
                let mut r = vec![e.treatment.clone()];
                r.extend(e.mean.iter().map(|v| format_exact(*v)));
                r
            }),
        )?,
    )?;
    for (e, name) in export.entries.iter().zip(&files.covariance) {
        out.write_csv(
            name,
            &matrix_text(&names, e.covariance.chunks(dim).map(|row| row.iter().map(|v| format_exact(*v)).collect()))?,
        )?;
    }
    let mut header = vec!["time".to_string()];
    header.extend((1..=dim).map(|j| format!("I[{j}]")));
    out.write_csv(
        &files.ispline,
        &matrix_text(
            &header,
            export.grid.iter().zip(export.ispline_grid.chunks(dim)).map(|(t, row)| {
                let mut r = vec![format_exact(*t)];
                r.extend(row.iter().map(|v| format_exact(*v)));
                r
            }),
        )?,
    )?;
    out.write_json(
        &files.metadata,
        &serde_json::json!({
            "population": pop,
            "treatments": trts,
            "kappa": export.kappa,
            "knots": export.knots.iter().map(|v| format_exact(*v)).collect::<Vec<_>>(),
            "covariates": export.covariates.as_ref().map(|x| x.iter().map(|v| format_exact(*v)).collect::<Vec<_>>()),
            "n_basis": dim,
            "vector": names,
            "survival": "S(t) = exp(-exp(eta) * I(t) . softmax([0, alpha_star]))",
            "files": { "mean": files.mean, "covariance": files.covariance, "ispline": files.ispline },
            "normal_approximation_max_median_gap": trts.iter().cloned().zip(gaps.iter().copied()).collect::<BTreeMap<_, _>>(),
        }),
    )?;
    for (t, g) in trts.iter().zip(&gaps) {
        println!("{t}: largest survival-median gap of the Normal approximation {g:.4}");
    }
    out.finish()?;
    Ok(())
}

fn read_matrix(path: &Path, skip: usize) -> Result<Vec<(Vec<String>, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    rdr.records()
        .map(|r| {
            let r = r?;
            let lead = r.iter().take(skip).map(String::from).collect();
            let vals = r
                .iter()
                .skip(skip)
                .map(|v| v.parse::<f64>().with_context(|| format!("{}: bad number `{v}`", path.display())))
                .collect::<Result<_>>()?;
            Ok((lead, vals))
        })
        .collect()
}

/// Reads an export bundle written by `export-mvn`.
pub fn read_mvn_bundle(dir: &Path, population: &str) -> Result<MvnExport> {
    let meta_path = dir.join(format!("mvn_{}.json", file_label(population)));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?)?;
    let parse_list = |v: &serde_json::Value| -> Result<Vec<f64>> {
        v.as_array()
            .context("expected an array")?
            .iter()
            .map(|x| Ok(x.as_str().context("expected a string")?.parse::<f64>()?))
            .collect()
    };
    let trts: Vec<String> = serde_json::from_value(meta["treatments"].clone())?;
    let files = mvn_files(population, &trts);
    let means = read_matrix(&dir.join(&files.mean), 1)?;
    let ispline = read_matrix(&dir.join(&files.ispline), 0)?;
    let n_basis = meta["n_basis"].as_u64().context("n_basis")? as usize;
    let mut entries = Vec::new();
    for ((lead, mean), cov_file) in means.into_iter().zip(&files.covariance) {
        let covariance = read_matrix(&dir.join(cov_file), 0)?.into_iter().flat_map(|(_, r)| r).collect();
        entries.push(msnma::products::MvnEntry { population: population.to_string(), treatment: lead[0].clone(), mean, covariance });
    }
    Ok(MvnExport {
        kappa: meta["kappa"].as_u64().context("kappa")? as usize,
        knots: parse_list(&meta["knots"])?,
        covariates: if meta["covariates"].is_null() { None } else { Some(parse_list(&meta["covariates"])?) },
        grid: ispline.iter().map(|(_, r)| r[0]).collect(),
        ispline_grid: ispline.iter().flat_map(|(_, r)| r[1..].to_vec()).collect(),
        n_basis,
        entries,
    })
}

pub fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    if config.simulate.arms.is_empty() {
        bail!("the config has no [[simulate.arms]]");
    }
    let seed = args.seed.unwrap_or(config.sampler.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (i, arm) in config.simulate.arms.iter().enumerate() {
        let knots = match &arm.knots {
            Some(k) if k.len() >= 2 => KnotVector::new(k[0], k[k.len() - 1], k[1..k.len() - 1].to_vec())?,
            Some(_) => bail!("arm {i}: knots need at least the two boundary knots"),
            None => KnotVector::new(0.0, 1.0, vec![])?,
        };
        let hazard = match (arm.rate, &arm.coefficients) {
            (Some(rate), None) => SplineHazard::constant(knots, arm.kappa.unwrap_or(1), rate)?,
            (None, Some(coef)) => {
                let kappa = arm.kappa.with_context(|| format!("arm {i}: spline hazards need `kappa`"))?;
                SplineHazard::new(knots, kappa, coef.clone(), arm.log_rate.unwrap_or(0.0))?
            }
            _ => bail!("arm {i}: give exactly one of `rate` or `coefficients`"),
        };
        for r in simulate_arm(&hazard, 0, 0, arm.n, &mut rng, arm.censor_at)? {
            rows.push(LabeledRecord {
                study: arm.study.clone(),
                treatment: arm.treatment.clone(),
                time: r.time,
                event: r.event,
                covariates: vec![],
            });
        }
    }
    let data = SurvivalDataset::from_labeled(rows, vec![], config.reference_treatment.as_deref())?;
    println!("{}", data.summary());
    let mut manifest = RunManifest::new("simulate");
    manifest.config_sha256 = Some(config_hash(&config));
    manifest.seed = Some(seed);
    let mut out = RunOutput::new(&args.out_dir, manifest, None);
    out.write_csv("simulated.csv", &dataset_csv(&data)?)?;
    out.finish()?;
    Ok(())
}
