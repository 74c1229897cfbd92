//! Monte Carlo replication harness: simulate, fit, estimate variances and
//! summarize bias, spread and Wald coverage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit, FitConfig};
use crate::error::{Error, Result};
use crate::sim::{generate, replication_seed, SimConfig};
use crate::variance::{estimate_variance, lambda_se, VarianceOptions};

/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub reps: usize,
    /// Worker threads; `None` uses all available cores.
    pub workers: Option<usize>,
    /// Times at which every baseline is summarized; `None` uses the
    /// quartiles of the event times of a pilot sample.
    pub lambda_times: Option<Vec<f64>>,
    pub variance: VarianceOptions,
}

impl McOptions {
    pub fn new(reps: usize) -> Self {
        Self {
            reps,
            workers: None,
            lambda_times: None,
            variance: VarianceOptions {
                check_full_system: false,
                ..VarianceOptions::default()
            },
        }
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub param: String,
    #[serde(rename = "true")]
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub emp_sd: f64,
    /// Mean of the available standard errors.
    pub mean_se: f64,
    /// Fraction of successful replications whose 95% Wald interval covers
    /// the truth; a missing standard error counts as a miss.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub rep: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub master_seed: u64,
    pub reps: usize,
    pub successes: usize,
    pub failures: Vec<ReplicationFailure>,
    pub lambda_times: Vec<f64>,
    pub rows: Vec<ParamSummary>,
}

impl McSummary {
    pub fn failure_rate(&self) -> f64 {
        self.failures.len() as f64 / self.reps as f64
    }

    pub fn row(&self, param: &str) -> Option<&ParamSummary> {
        self.rows.iter().find(|r| r.param == param)
    }

    /// Aligned plain-text table of the summary rows.
    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.param.len()).max().unwrap_or(0).max(5);
        let mut out = format!(
            "{:<w$} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}\n",
            "param", "true", "mean", "bias", "emp_sd", "mean_se", "coverage"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<w$} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>9.3}\n",
                r.param, r.truth, r.mean, r.bias, r.emp_sd, r.mean_se, r.coverage
            ));
        }
        out.push_str(&format!(
            "{} of {} replications succeeded\n",
            self.successes, self.reps
        ));
        out
    }
}

/// Label of the baseline summary row for stratum `j` (0-based) at `t`.
pub fn lambda_label(j: usize, t: f64) -> String {
    format!("lambda_{}@{}", j + 1, t)
}

fn labels_and_truth(config: &SimConfig, times: &[f64]) -> (Vec<String>, Vec<f64>) {
    let m = config.m();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    for (r, b) in config.beta.iter().enumerate() {
        labels.push(format!("beta_{}", r + 1));
        truth.push(*b);
    }
    for (r, g) in config.gamma_flat().iter().enumerate() {
        labels.push(format!("gamma_{}_{}", r / m + 1, r % m + 1));
        truth.push(*g);
    }
    for j in 0..config.k_strata {
        for &t in times {
            labels.push(lambda_label(j, t));
            truth.push(config.true_cumulative(j, t));
        }
    }
    (labels, truth)
}

struct Replication {
    estimates: Vec<f64>,
    ses: Vec<Option<f64>>,
}

fn replicate(config: &SimConfig, fit_config: &FitConfig, opts: &McOptions, times: &[f64]) -> Result<Replication> {
    let data = generate(config)?;
    let result = fit(&data, fit_config)?;
    if !result.converged {
        return Err(Error::Rejected(format!(
            "EM did not converge in {} iterations",
            result.em_iterations
        )));
    }
    let theta = &result.theta_hat;
    let var = estimate_variance(theta, &data, &opts.variance)?;
    let mut estimates: Vec<f64> = theta.beta.iter().chain(&theta.gamma).copied().collect();
    let mut ses: Vec<Option<f64>> = var.se_beta.iter().chain(&var.se_gamma).copied().collect();
    for j in 0..config.k_strata {
        for &t in times {
            estimates.push(theta.baselines[j].eval(t));
            ses.push(lambda_se(&var, theta, j, t)?);
        }
    }
    Ok(Replication { estimates, ses })
}

/// Quartiles of the event times of a pilot sample drawn with seeds derived
/// from the master seed.
pub fn default_lambda_times(config: &SimConfig) -> Result<Vec<f64>> {
    let mut last = None;
    for i in 0..10 {
        let pilot = SimConfig {
            seed: replication_seed(config.seed, u64::MAX - i),
            ..config.clone()
        };
        match generate(&pilot) {
            Ok(data) => {
                let times = data.event_times();
                let at = |q: f64| times[((times.len() - 1) as f64 * q).round() as usize];
                return Ok(vec![at(0.25), at(0.5), at(0.75)]);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one pilot attempt"))
}

/// Runs `opts.reps` replications. Replication `i` uses the seed
/// `splitmix64(master ^ i)`; failed replications are recorded and excluded,
/// and the run aborts when more than half fail.
pub fn run_monte_carlo(config: &SimConfig, fit_config: &FitConfig, opts: &McOptions) -> Result<McSummary> {
    config.validate()?;
    fit_config.validate()?;
    if opts.reps < 2 {
        return Err(Error::Config {
            field: "reps".into(),
            reason: format!("need at least 2 replications, got {}", opts.reps),
        });
    }
    let times = match &opts.lambda_times {
        Some(t) => t.clone(),
        None => default_lambda_times(config)?,
    };
    if let Some(&bad) = times.iter().find(|&&t| !(t > 0.0 && t < config.tau)) {
        return Err(Error::Config {
            field: "lambda_times".into(),
            reason: format!("{bad} is not inside (0, tau)"),
        });
    }

    let run = |i: usize| {
        let cfg = SimConfig {
            seed: replication_seed(config.seed, i as u64),
            ..config.clone()
        };
        let out = replicate(&cfg, fit_config, opts, &times);
        if let Err(e) = &out {
            log::warn!("replication {i} failed: {e}");
        }
        (cfg.seed, out)
    };
    let workers = opts.workers.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config {
            field: "workers".into(),
            reason: e.to_string(),
        })?;
    let outcomes: Vec<(u64, Result<Replication>)> =
        pool.install(|| (0..opts.reps).into_par_iter().map(run).collect());

    let mut failures = Vec::new();
    let mut done = Vec::new();
    for (rep, (seed, out)) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => done.push(r),
            Err(e) => failures.push(ReplicationFailure {
                rep,
                seed,
                reason: e.to_string(),
            }),
        }
    }
    if 2 * failures.len() > opts.reps {
        return Err(Error::TooManyFailures(failures.len(), opts.reps));
    }

    let (labels, truth) = labels_and_truth(config, &times);
    let count = done.len() as f64;
    let rows = labels
        .into_iter()
        .enumerate()
        .map(|(c, param)| {
            let mean = done.iter().map(|r| r.estimates[c]).sum::<f64>() / count;
            let ss = done.iter().map(|r| (r.estimates[c] - mean).powi(2)).sum::<f64>();
            let emp_sd = (ss / (count - 1.0)).sqrt();
            let ses: Vec<f64> = done.iter().filter_map(|r| r.ses[c]).collect();
            let mean_se = ses.iter().sum::<f64>() / ses.len() as f64;
            let covered = done
                .iter()
                .filter(|r| r.ses[c].is_some_and(|se| (r.estimates[c] - truth[c]).abs() <= Z_975 * se))
                .count();
            ParamSummary {
                param,
                truth: truth[c],
                mean,
                bias: mean - truth[c],
                emp_sd,
                mean_se,
                coverage: covered as f64 / count,
            }
        })
        .collect();

    Ok(McSummary {
        master_seed: config.seed,
        reps: opts.reps,
        successes: done.len(),
        failures,
        lambda_times: times,
        rows,
    })
}
