//! Reading and writing individual-level survival data as CSV.

use std::io::Read;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use msnma::data::{LabeledRecord, SurvivalDataset};

const REQUIRED: [&str; 4] = ["study", "treatment", "time", "status"];

/// Parses a data file. Columns `study`, `treatment`, `time` and `status`
/// are required; other columns are covariates, restricted to
/// `covariate_columns` when given. Lines starting with `#` are skipped.
pub fn read_dataset<R: Read>(
    reader: R,
    covariate_columns: Option<&[String]>,
    reference: Option<&str>,
) -> Result<SurvivalDataset> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().context("reading header")?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let mut idx = [0usize; 4];
    for (i, name) in REQUIRED.iter().enumerate() {
        idx[i] = col(name).ok_or_else(|| anyhow!("missing required column `{name}`"))?;
    }
    let covariate_names: Vec<String> = match covariate_columns {
        Some(cols) => cols.to_vec(),
        None => header.iter().filter(|h| !REQUIRED.contains(h)).map(String::from).collect(),
    };
    let cov_idx: Vec<usize> = covariate_names
        .iter()
        .map(|n| col(n).ok_or_else(|| anyhow!("covariate column `{n}` not found")))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for result in rdr.records() {
        let rec = result?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<&str> {
            match rec.get(i) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => bail!("line {line}: missing value for `{name}`"),
            }
        };
        let study = field(idx[0], "study")?.to_string();
        let treatment = field(idx[1], "treatment")?.to_string();
        let time: f64 = field(idx[2], "time")?
            .parse()
            .map_err(|_| anyhow!("line {line}: time `{}` is not a number", &rec[idx[2]]))?;
        if !time.is_finite() || time < 0.0 {
            bail!("line {line}: time must be finite and nonnegative, got {time}");
        }
        let event = match field(idx[3], "status")? {
            "1" => true,
            "0" => false,
            other => bail!("line {line}: status must be 0 or 1, got `{other}`"),
        };
        let covariates = cov_idx
            .iter()
            .zip(&covariate_names)
            .map(|(&i, n)| {
                let v: f64 = field(i, n)?
                    .parse()
                    .map_err(|_| anyhow!("line {line}: covariate `{n}` value `{}` is not a number", &rec[i]))?;
                if !v.is_finite() {
                    bail!("line {line}: covariate `{n}` is not finite");
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(LabeledRecord { study, treatment, time, event, covariates });
    }
    if rows.is_empty() {
        bail!("data file has no records");
    }
    if reference.is_none() {
        let first = rows.iter().map(|r| r.treatment.as_str()).min().unwrap_or_default();
        log::info!("no reference treatment configured; using `{first}`");
    }
    Ok(SurvivalDataset::from_labeled(rows, covariate_names, reference)?)
}

pub fn load_dataset(path: &Path, covariate_columns: Option<&[String]>, reference: Option<&str>) -> Result<SurvivalDataset> {
    let file = std::fs::File::open(path).with_context(|| format!("opening data file {}", path.display()))?;
    read_dataset(file, covariate_columns, reference).with_context(|| format!("reading {}", path.display()))
}

/// Data rows as CSV. Times and covariates use the shortest representation
/// that parses back to the same value.
pub fn dataset_csv(data: &SurvivalDataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = REQUIRED.to_vec();
    header.extend(data.covariate_names().iter().map(String::as_str));
    w.write_record(&header)?;
    for r in data.records() {
        let mut row = vec![
            data.study_labels()[r.study].clone(),
            data.treatment_labels()[r.treatment].clone(),
            r.time.to_string(),
            if r.event { "1" } else { "0" }.to_string(),
        ];
        row.extend(r.covariates.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}
