//! Data generation from the stratified proportional hazards model with a
//! multinomial logistic stratum model and covariate-driven missingness.
//!
//! Every subject consumes exactly `m + p + 4` uniform draws from a ChaCha8
//! stream seeded by [`SimConfig::seed`], in the order `W` (one per
//! component), `X` (one per component), `S`, `T⁰`, `C`, `R`. Components that
//! do not need randomness still consume their draw, so the stream position
//! of each subject depends only on its index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, stratum_probs, Dataset, DatasetOptions, Observation};

/// Baseline hazard family for one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Baseline {
    /// `Λ(t) = rate t`.
    Exponential { rate: f64 },
    /// `Λ(t) = (t / scale)^shape`.
    Weibull { shape: f64, scale: f64 },
}

impl Baseline {
    pub fn cumulative(&self, t: f64) -> f64 {
        match *self {
            Self::Exponential { rate } => rate * t,
            Self::Weibull { shape, scale } => (t / scale).powf(shape),
        }
    }

    /// Time at which the cumulative hazard reaches `h`.
    pub fn inverse(&self, h: f64) -> f64 {
        match *self {
            Self::Exponential { rate } => h / rate,
            Self::Weibull { shape, scale } => scale * h.powf(1.0 / shape),
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let ok = match *self {
            Self::Exponential { rate } => rate > 0.0 && rate.is_finite(),
            Self::Weibull { shape, scale } => {
                shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config {
                field: field.into(),
                reason: "parameters must be positive and finite".into(),
            })
        }
    }
}

/// Distribution of one covariate component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum Covariate {
    Uniform { low: f64, high: f64 },
    Bernoulli { p: f64 },
    Constant { value: f64 },
    /// Copy of component `index` (1-based) of `W`; only valid for `X`.
    SharedW { index: usize },
}

impl Covariate {
    fn draw(&self, u: f64, w: &[f64]) -> f64 {
        match *self {
            Self::Uniform { low, high } => low + (high - low) * u,
            Self::Bernoulli { p } => f64::from(u8::from(u < p)),
            Self::Constant { value } => value,
            Self::SharedW { index } => w[index - 1],
        }
    }

    fn validate(&self, field: &str, m: Option<usize>) -> Result<()> {
        let reason = match *self {
            Self::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low <= high) => {
                Some("uniform bounds must be finite with low <= high".to_string())
            }
            Self::Bernoulli { p } if !(0.0..=1.0).contains(&p) => Some(format!("probability {p} is outside [0, 1]")),
            Self::Constant { value } if !value.is_finite() => Some("constant must be finite".into()),
            Self::SharedW { index } => match m {
                None => Some("shared_w is only allowed for x components".into()),
                Some(m) if index == 0 || index > m => Some(format!("index {index} is outside 1..={m}")),
                _ => None,
            },
            _ => None,
        };
        match reason {
            Some(reason) => Err(Error::Config {
                field: field.into(),
                reason,
            }),
            None => Ok(()),
        }
    }
}

/// Random censoring, applied before the administrative cutoff at `τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Censoring {
    None,
    Uniform { max: f64 },
    Exponential { rate: f64 },
}

impl Censoring {
    fn draw(&self, u: f64) -> f64 {
        match *self {
            Self::None => f64::INFINITY,
            Self::Uniform { max } => max * u,
            Self::Exponential { rate } => -(1.0 - u).ln() / rate,
        }
    }
}

/// `P(R = 1 | W) = min(max(expit(intercept + coef'W), ε), 1 - ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingModel {
    #[serde(default)]
    pub intercept: f64,
    pub coef: Vec<f64>,
    #[serde(default)]
    pub epsilon: f64,
}

impl MissingModel {
    pub fn observed_prob(&self, w: &[f64]) -> f64 {
        let eta = self.intercept + dot(&self.coef, w);
        let p = 1.0 / (1.0 + (-eta).exp());
        p.clamp(self.epsilon, 1.0 - self.epsilon)
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub k_strata: usize,
    pub beta: Vec<f64>,
    /// `K - 1` rows of length `m`; the last stratum is the reference.
    pub gamma: Vec<Vec<f64>>,
    pub baselines: Vec<Baseline>,
    pub x: Vec<Covariate>,
    pub w: Vec<Covariate>,
    pub censoring: Censoring,
    /// Administrative end of follow-up.
    pub tau: f64,
    pub missing: MissingModel,
    pub seed: u64,
    /// Reject samples where some stratum has no subject with known stratum
    /// still at risk at `τ`.
    #[serde(default = "default_true")]
    pub require_positivity: bool,
}

impl SimConfig {
    pub fn p(&self) -> usize {
        self.x.len()
    }

    pub fn m(&self) -> usize {
        self.w.len()
    }

    /// `γ` flattened row-major, as stored in `Params`.
    pub fn gamma_flat(&self) -> Vec<f64> {
        self.gamma.concat()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, reason: String| Error::Config {
            field: field.into(),
            reason,
        };
        if self.n == 0 {
            return Err(cfg("n", "must be positive".into()));
        }
        if self.k_strata == 0 {
            return Err(cfg("k_strata", "must be positive".into()));
        }
        if self.beta.len() != self.p() {
            return Err(cfg(
                "beta",
                format!("has length {} but there are {} x components", self.beta.len(), self.p()),
            ));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(cfg("beta", "entries must be finite".into()));
        }
        if self.gamma.len() != self.k_strata - 1 {
            return Err(cfg(
                "gamma",
                format!("needs {} rows, found {}", self.k_strata - 1, self.gamma.len()),
            ));
        }
        for (k, row) in self.gamma.iter().enumerate() {
            if row.len() != self.m() || row.iter().any(|g| !g.is_finite()) {
                return Err(cfg(
                    "gamma",
                    format!("row {} must hold {} finite values", k + 1, self.m()),
                ));
            }
        }
        if self.baselines.len() != self.k_strata {
            return Err(cfg(
                "baselines",
                format!("needs {} entries, found {}", self.k_strata, self.baselines.len()),
            ));
        }
        for (k, b) in self.baselines.iter().enumerate() {
            b.validate(&format!("baselines[{}]", k + 1))?;
        }
        for (a, c) in self.x.iter().enumerate() {
            c.validate(&format!("x[{}]", a + 1), Some(self.m()))?;
        }
        for (a, c) in self.w.iter().enumerate() {
            c.validate(&format!("w[{}]", a + 1), None)?;
        }
        match self.censoring {
            Censoring::None => {}
            Censoring::Uniform { max } if max > 0.0 && max.is_finite() => {}
            Censoring::Exponential { rate } if rate > 0.0 && rate.is_finite() => {}
            _ => return Err(cfg("censoring", "parameter must be positive and finite".into())),
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(cfg("tau", format!("must be positive and finite, got {}", self.tau)));
        }
        if self.missing.coef.len() != self.m() {
            return Err(cfg(
                "missing.coef",
                format!("has length {} but there are {} w components", self.missing.coef.len(), self.m()),
            ));
        }
        if !(0.0..0.5).contains(&self.missing.epsilon) {
            return Err(cfg("missing.epsilon", "must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    /// True cumulative baseline hazard of stratum `k` (0-based).
    pub fn true_cumulative(&self, k: usize, t: f64) -> f64 {
        self.baselines[k].cumulative(t)
    }
}

/// A generated sample together with its latent quantities.
#[derive(Debug, Clone)]
pub struct SimSample {
    pub dataset: Dataset,
    /// Stratum of every subject, including those reported as missing.
    pub true_strata: Vec<usize>,
    /// Uncensored failure times `T⁰`.
    pub latent_times: Vec<f64>,
    pub censoring_times: Vec<f64>,
}

/// Generates one sample, keeping the latent strata and times.
pub fn generate_with_truth(config: &SimConfig) -> Result<SimSample> {
    config.validate()?;
    let (p, m, k_strata) = (config.p(), config.m(), config.k_strata);
    let gamma = config.gamma_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut obs = Vec::with_capacity(config.n);
    let mut true_strata = Vec::with_capacity(config.n);
    let mut latent_times = Vec::with_capacity(config.n);
    let mut censoring_times = Vec::with_capacity(config.n);

    for _ in 0..config.n {
        let mut w = Vec::with_capacity(m);
        for c in &config.w {
            let u: f64 = rng.random();
            w.push(c.draw(u, &[]));
        }
        let mut x = Vec::with_capacity(p);
        for c in &config.x {
            let u: f64 = rng.random();
            x.push(c.draw(u, &w));
        }

        let pi = stratum_probs(&gamma, k_strata, &w)?;
        let u: f64 = rng.random();
        let mut s = k_strata - 1;
        let mut acc = 0.0;
        for (k, pk) in pi.iter().enumerate() {
            acc += pk;
            if u < acc {
                s = k;
                break;
            }
        }

        let u: f64 = rng.random();
        let h = -(1.0 - u).ln() * (-dot(&config.beta, &x)).exp();
        let t0 = config.baselines[s].inverse(h);
        let c = config.censoring.draw(rng.random());
        let r = rng.random::<f64>() < config.missing.observed_prob(&w);

        let end = c.min(config.tau);
        let status = t0 <= end;
        obs.push(Observation {
            time: if status { t0 } else { end },
            status,
            x,
            w,
            stratum: r.then_some(s),
        });
        true_strata.push(s);
        latent_times.push(t0);
        censoring_times.push(c);
    }

    let options = DatasetOptions {
        jitter_ties: true,
        jitter_seed: config.seed,
        tau: Some(config.tau),
    };
    let dataset = Dataset::with_options(obs, k_strata, &options).map_err(|e| match e {
        Error::Validation(reason) => Error::Rejected(reason),
        other => other,
    })?;
    if config.require_positivity {
        let at_risk = dataset.observed_at_risk_at_tau();
        if let Some(k) = at_risk.iter().position(|&c| c == 0) {
            return Err(Error::Rejected(format!(
                "no subject with known stratum {} is at risk at tau = {}",
                k + 1,
                config.tau
            )));
        }
    }
    Ok(SimSample {
        dataset,
        true_strata,
        latent_times,
        censoring_times,
    })
}

/// Generates a dataset from `config`; deterministic given the seed.
pub fn generate(config: &SimConfig) -> Result<Dataset> {
    generate_with_truth(config).map(|s| s.dataset)
}

/// SplitMix64 output function, used to derive independent seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `i` under master seed `master`.
pub fn replication_seed(master: u64, i: u64) -> u64 {
    splitmix64(master ^ i)
}
