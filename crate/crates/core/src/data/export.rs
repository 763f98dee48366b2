//! Deterministic CSV tables and JSON run metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Dic, FitResult, HyperSummary, Waic};
use crate::marginal::Quantiles;
use crate::model::AssembledModel;
use crate::products::{CellRate, ExceedanceReport, PatternRate, VarianceShare};

pub const METADATA_SCHEMA_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "metadata.json";
pub const LATENT_FILE: &str = "latent_summary.csv";
pub const HYPER_FILE: &str = "hyperparameters.csv";
pub const PATTERN_RATES_FILE: &str = "pattern_rates.csv";
pub const CELL_RATES_FILE: &str = "cell_rates.csv";
pub const EXCEEDANCE_FILE: &str = "exceedance.csv";
pub const VARIANCE_SHARES_FILE: &str = "variance_shares.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub theta: Vec<f64>,
    pub weight: f64,
    pub log_marginal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub package_version: String,
    pub spec: String,
    pub seed: u64,
    pub n_draws: usize,
    pub grid_step: f64,
    pub hyperparameters: Vec<String>,
    pub theta_mode: Vec<f64>,
    pub grid: Vec<GridEntry>,
    pub hyper_summaries: Vec<HyperSummary>,
    pub dic: Option<Dic>,
    pub waic: Option<Waic>,
    pub warnings: Vec<String>,
}

impl RunMetadata {
    pub fn from_fit(model: &AssembledModel, fit: &FitResult, dic: Option<Dic>, waic: Option<Waic>) -> Self {
        Self {
            schema_version: METADATA_SCHEMA_VERSION,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            spec: model.spec.to_config(),
            seed: fit.config.seed,
            n_draws: fit.config.n_draws,
            grid_step: fit.config.step,
            hyperparameters: model.hyper_names.clone(),
            theta_mode: fit.theta_mode.clone(),
            grid: fit
                .points
                .iter()
                .map(|p| GridEntry {
                    theta: p.theta.clone(),
                    weight: p.weight,
                    log_marginal: p.log_marginal,
                })
                .collect(),
            hyper_summaries: fit.hyper.clone(),
            dic,
            waic,
            warnings: fit.warnings.clone(),
        }
    }
}

pub fn read_metadata(path: &Path) -> Result<RunMetadata> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_file(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Posterior mean, sd and quantiles of every latent coordinate.
pub fn latent_summary_csv(model: &AssembledModel, fit: &FitResult) -> String {
    let mut out = String::from("block,index,label,mean,sd,q025,median,q975\n");
    for b in &model.blocks {
        for i in 0..b.len {
            let j = b.offset + i;
            let label = match b.role {
                crate::model::BlockRole::Age => model.age_labels[i].clone(),
                crate::model::BlockRole::Time | crate::model::BlockRole::Space => model.second_labels[i].clone(),
                crate::model::BlockRole::Interaction => {
                    let a = i % model.n_age();
                    format!("{}:{}", model.second_labels[i / model.n_age()], model.age_labels[a])
                }
                _ => b.name.clone(),
            };
            let m = fit.marginal(j);
            out.push_str(&format!(
                "{},{i},{},{},{},{},{},{}\n",
                csv_field(&b.name),
                csv_field(&label),
                fit.mean[j],
                fit.sd[j],
                m.quantile(0.025),
                m.quantile(0.5),
                m.quantile(0.975)
            ));
        }
    }
    out
}

pub fn hyper_csv(hyper: &[HyperSummary]) -> String {
    let mut out = String::from("name,mean_log_precision,median_log_precision,q025_log_precision,q975_log_precision,mean_precision,median_precision\n");
    for h in hyper {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&h.name),
            h.mean_log_precision,
            h.median_log_precision,
            h.q025_log_precision,
            h.q975_log_precision,
            h.mean_precision,
            h.median_precision
        ));
    }
    out
}

pub fn pattern_rates_csv(rows: &[PatternRate]) -> String {
    let mut out = String::from("block,index,label,median,q025,q975\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.block.name(),
            r.index,
            csv_field(&r.label),
            r.median,
            r.lower,
            r.upper
        ));
    }
    out
}

pub fn cell_rates_csv(rows: &[CellRate]) -> String {
    let mut out = String::from("age_group,second,observed,median,q025,q975\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.age),
            csv_field(&r.second),
            r.observed,
            r.median,
            r.lower,
            r.upper
        ));
    }
    out
}

#[derive(Debug, Deserialize)]
struct CellRateRecord {
    age_group: String,
    second: String,
    observed: bool,
    median: f64,
    q025: f64,
    q975: f64,
}

/// Parses a table written by [`cell_rates_csv`].
pub fn read_cell_rates(text: &str) -> Result<Vec<CellRate>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize::<CellRateRecord>()
        .enumerate()
        .map(|(k, r)| {
            let r = r.map_err(|e| Error::Parse {
                line: k + 2,
                message: e.to_string(),
            })?;
            Ok(CellRate {
                age: r.age_group,
                second: r.second,
                observed: r.observed,
                median: r.median,
                lower: r.q025,
                upper: r.q975,
            })
        })
        .collect()
}

pub fn exceedance_csv(reports: &[ExceedanceReport]) -> String {
    let mut out = String::from("threshold,age_group,unit,probability\n");
    for rep in reports {
        for r in &rep.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                csv_field(&rep.threshold),
                csv_field(&r.age),
                csv_field(&r.unit),
                r.probability
            ));
        }
    }
    out
}

pub fn variance_shares_csv(rows: &[VarianceShare]) -> String {
    let mut out = String::from("component,median_precision,share,share_excluding_age\n");
    for r in rows {
        let ex = r.share_excluding_age.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", csv_field(&r.component), r.precision, r.share, ex));
    }
    out
}

/// Writes the fit archive: latent and hyperparameter summaries plus
/// metadata with the θ grid.
pub fn export_fit(out_dir: &Path, model: &AssembledModel, fit: &FitResult, metadata: &RunMetadata) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(out_dir.join(LATENT_FILE), &latent_summary_csv(model, fit))?;
    write_file(out_dir.join(HYPER_FILE), &hyper_csv(&fit.hyper))?;
    write_file(out_dir.join(METADATA_FILE), &(serde_json::to_string_pretty(metadata)? + "\n"))
}

/// Report tables produced by the `report` command.
#[derive(Debug, Clone, Default)]
pub struct ReportTables {
    pub pattern_rates: Vec<PatternRate>,
    pub cell_rates: Vec<CellRate>,
    pub exceedance: Vec<ExceedanceReport>,
    pub variance_shares: Vec<VarianceShare>,
}

pub fn export_report(out_dir: &Path, tables: &ReportTables, metadata: &RunMetadata) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(out_dir.join(PATTERN_RATES_FILE), &pattern_rates_csv(&tables.pattern_rates))?;
    write_file(out_dir.join(CELL_RATES_FILE), &cell_rates_csv(&tables.cell_rates))?;
    write_file(out_dir.join(EXCEEDANCE_FILE), &exceedance_csv(&tables.exceedance))?;
    write_file(out_dir.join(VARIANCE_SHARES_FILE), &variance_shares_csv(&tables.variance_shares))?;
    write_file(out_dir.join(METADATA_FILE), &(serde_json::to_string_pretty(metadata)? + "\n"))
}
