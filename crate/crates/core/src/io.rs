//! Reading and writing datasets, fit documents and Monte Carlo summaries.
//!
//! Datasets are CSV with header `time,status,r,s,x1..xp,w1..wm`; `s` is
//! 1-based and empty when `r = 0`. Floats are written in shortest
//! round-trip form so every document re-parses to identical values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::{FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::mc::{McSummary, ParamSummary, ReplicationFailure};
use crate::model::{Dataset, DatasetOptions, Observation, Params};
use crate::variance::{lambda_se, v_squared, VarianceDiagnostics, VarianceResult};

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn numbered_columns(header: &csv::StringRecord, prefix: char) -> Vec<usize> {
    header
        .iter()
        .enumerate()
        .filter(|(_, h)| {
            let mut chars = h.chars();
            chars.next() == Some(prefix) && !h[1..].is_empty() && h[1..].bytes().all(|b| b.is_ascii_digit())
        })
        .map(|(i, _)| i)
        .collect()
}

/// Parses the observations of a dataset file; strata are returned 0-based.
pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let file = File::open(path).map_err(|e| parse_err(path, 0, format!("cannot open: {e}")))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let expect = ["time", "status", "r", "s"];
    if header.len() < 4 || header.iter().take(4).ne(expect) {
        return Err(parse_err(path, 1, "header must start with time,status,r,s"));
    }
    let xs = numbered_columns(&header, 'x');
    let ws = numbered_columns(&header, 'w');
    if 4 + xs.len() + ws.len() != header.len() {
        return Err(parse_err(path, 1, "unrecognized columns; expected x1..xp and w1..wm"));
    }
    for (cols, prefix) in [(&xs, 'x'), (&ws, 'w')] {
        for (a, &c) in cols.iter().enumerate() {
            if header[c] != format!("{prefix}{}", a + 1) {
                return Err(parse_err(path, 1, format!("column `{}` out of order", &header[c])));
            }
        }
    }

    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let num = |c: usize| -> Result<f64> {
            record[c]
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("`{}` is not a number in column {}", &record[c], &header[c])))
        };
        let flag = |c: usize| -> Result<bool> {
            match &record[c] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(path, line, format!("{} must be 0 or 1, got `{other}`", &header[c]))),
            }
        };
        let time = num(0)?;
        let status = flag(1)?;
        let observed = flag(2)?;
        let stratum = match (observed, &record[3]) {
            (false, "") => None,
            (false, s) => return Err(parse_err(path, line, format!("s = `{s}` given for a subject with r = 0"))),
            (true, "") => return Err(parse_err(path, line, "s is empty for a subject with r = 1")),
            (true, s) => match s.parse::<usize>() {
                Ok(k) if k >= 1 => Some(k - 1),
                _ => return Err(parse_err(path, line, format!("s = `{s}` is not a stratum label 1..K"))),
            },
        };
        out.push(Observation {
            time,
            status,
            x: xs.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            w: ws.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            stratum,
        });
    }
    if out.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    Ok(out)
}

/// Reads and validates a dataset. `k_strata` defaults to the largest
/// stratum label present.
pub fn read_dataset(path: &Path, k_strata: Option<usize>, options: &DatasetOptions) -> Result<Dataset> {
    let obs = read_observations(path)?;
    let k = match k_strata {
        Some(k) => k,
        None => obs.iter().filter_map(|o| o.stratum).max().map_or(1, |s| s + 1),
    };
    Dataset::with_options(obs, k, options)
}

/// Writes a dataset in the CSV format read by [`read_dataset`].
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["time".to_string(), "status".into(), "r".into(), "s".into()];
    header.extend((1..=data.p()).map(|a| format!("x{a}")));
    header.extend((1..=data.m()).map(|a| format!("w{a}")));
    w.write_record(&header)?;
    for o in data.observations() {
        let mut row = vec![
            o.time.to_string(),
            u8::from(o.status).to_string(),
            u8::from(o.observed()).to_string(),
            o.stratum.map_or(String::new(), |s| (s + 1).to_string()),
        ];
        row.extend(o.x.iter().chain(&o.w).map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub param: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub time: f64,
    pub jump: f64,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    /// 1-based stratum label.
    pub stratum: usize,
    pub rows: Vec<BaselineRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub stratum: usize,
    pub time: f64,
    pub cumulative: f64,
    pub v_squared: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDocument {
    pub sigma_beta: Vec<Vec<f64>>,
    pub sigma_gamma: Vec<Vec<f64>>,
    pub lambda: Vec<LambdaRow>,
    pub diagnostics: VarianceDiagnostics,
    pub warnings: Vec<String>,
}

/// Everything produced by one fit, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub tool_version: String,
    pub data: String,
    pub config: FitConfig,
    pub dataset_options: DatasetOptions,
    pub n: usize,
    pub converged: bool,
    pub em_iterations: usize,
    pub loglik: f64,
    pub estimates: Vec<Estimate>,
    pub baselines: Vec<BaselineTable>,
    pub loglik_trace: Vec<f64>,
    pub score_residuals: BTreeMap<String, f64>,
    pub score_time: f64,
    pub warnings: Vec<String>,
    pub variance: Option<VarianceDocument>,
    /// Full parameter, for exact reuse.
    pub theta: Params,
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl FitDocument {
    pub fn new(
        data_label: &str,
        data: &Dataset,
        config: &FitConfig,
        dataset_options: &DatasetOptions,
        result: &FitResult,
        variance: Option<(&VarianceResult, &[f64])>,
    ) -> Result<Self> {
        let theta = &result.theta_hat;
        let m = data.m();
        let se_b = variance.map(|(v, _)| v.se_beta.clone());
        let se_g = variance.map(|(v, _)| v.se_gamma.clone());
        let mut estimates = Vec::new();
        for (r, b) in theta.beta.iter().enumerate() {
            estimates.push(Estimate {
                param: format!("beta_{}", r + 1),
                estimate: *b,
                se: se_b.as_ref().and_then(|s| s[r]),
            });
        }
        for (r, g) in theta.gamma.iter().enumerate() {
            estimates.push(Estimate {
                param: format!("gamma_{}_{}", r / m + 1, r % m + 1),
                estimate: *g,
                se: se_g.as_ref().and_then(|s| s[r]),
            });
        }
        let baselines = theta
            .baselines
            .iter()
            .enumerate()
            .map(|(k, lam)| BaselineTable {
                stratum: k + 1,
                rows: lam
                    .jump_times()
                    .iter()
                    .zip(lam.jump_sizes())
                    .map(|(&t, &a)| BaselineRow {
                        time: t,
                        jump: a,
                        cumulative: lam.eval(t),
                    })
                    .collect(),
            })
            .collect();
        let variance = match variance {
            None => None,
            Some((v, grid)) => {
                let mut lambda = Vec::new();
                for j in 0..data.k_strata() {
                    for &t in grid {
                        lambda.push(LambdaRow {
                            stratum: j + 1,
                            time: t,
                            cumulative: theta.baselines[j].eval(t),
                            v_squared: v_squared(v, theta, j, t)?,
                            se: lambda_se(v, theta, j, t)?,
                        });
                    }
                }
                Some(VarianceDocument {
                    sigma_beta: rows_of(&v.sigma_beta),
                    sigma_gamma: rows_of(&v.sigma_gamma),
                    lambda,
                    diagnostics: v.diagnostics.clone(),
                    warnings: v.warnings.clone(),
                })
            }
        };
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            data: data_label.to_string(),
            config: config.clone(),
            dataset_options: dataset_options.clone(),
            n: data.n(),
            converged: result.converged,
            em_iterations: result.em_iterations,
            loglik: result.final_loglik(),
            estimates,
            baselines,
            loglik_trace: result.loglik_trace.clone(),
            score_residuals: result.score_residuals.clone(),
            score_time: result.score_time,
            warnings: result.warnings.clone(),
            variance,
            theta: theta.clone(),
        })
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the summary rows with columns
/// `param,true,mean,bias,emp_sd,mean_se,coverage`.
pub fn write_summary_csv(path: &Path, summary: &McSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in &summary.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<ParamSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Writes one row per failed replication: `rep,seed,reason`.
pub fn write_failures_csv(path: &Path, failures: &[ReplicationFailure]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["rep", "seed", "reason"])?;
    for f in failures {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}
