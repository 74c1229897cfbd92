//! Domain types for the stratified proportional hazards model with a
//! partially observed stratum, plus the observed-data log-likelihood over
//! step-function baselines.
//!
//! Strata are 0-based everywhere in the library; the last stratum (`K - 1`)
//! is the reference category of the multinomial logistic stratum model, so
//! `gamma` stores only the first `K - 1` coefficient rows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject's record `(T, Δ, X, W, R, R·S)`.
///
/// `stratum` is `Some` exactly when the stratum was observed (`R = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub status: bool,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub stratum: Option<usize>,
}

impl Observation {
    pub fn observed(&self) -> bool {
        self.stratum.is_some()
    }

    /// `Δ` as a float.
    pub fn delta(&self) -> f64 {
        if self.status {
            1.0
        } else {
            0.0
        }
    }
}

/// Options applied while validating a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Break tied event times by subtracting small deterministic offsets.
    pub jitter_ties: bool,
    /// Seed for the order in which tied subjects receive offsets.
    pub jitter_seed: u64,
    /// Study horizon; defaults to the largest observed time.
    pub tau: Option<f64>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            jitter_ties: false,
            jitter_seed: 0,
            tau: None,
        }
    }
}

/// Relative size of the offset used to break ties, in units of `tau`.
pub const JITTER_SCALE: f64 = 1e-9;

/// A validated sample. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    observations: Vec<Observation>,
    p: usize,
    m: usize,
    k_strata: usize,
    tau: f64,
    /// Subject indices sorted by decreasing time (ties by index).
    order_desc: Vec<usize>,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>, k_strata: usize) -> Result<Self> {
        Self::with_options(observations, k_strata, &DatasetOptions::default())
    }

    pub fn with_options(
        mut observations: Vec<Observation>,
        k_strata: usize,
        options: &DatasetOptions,
    ) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Validation("dataset has no observations".into()));
        }
        if k_strata == 0 {
            return Err(Error::Validation("number of strata must be at least 1".into()));
        }
        let p = observations[0].x.len();
        let m = observations[0].w.len();
        for (i, obs) in observations.iter().enumerate() {
            if obs.x.len() != p || obs.w.len() != m {
                return Err(Error::Validation(format!(
                    "subject {i}: covariate lengths ({}, {}) differ from ({p}, {m})",
                    obs.x.len(),
                    obs.w.len()
                )));
            }
            if !obs.time.is_finite() || obs.time < 0.0 {
                return Err(Error::Validation(format!(
                    "subject {i}: time {} must be finite and nonnegative",
                    obs.time
                )));
            }
            if obs.x.iter().chain(obs.w.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("subject {i}: non-finite covariate")));
            }
            if let Some(s) = obs.stratum {
                if s >= k_strata {
                    return Err(Error::Validation(format!(
                        "subject {i}: stratum {} outside 1..={k_strata}",
                        s + 1
                    )));
                }
            }
        }

        let max_time = observations.iter().map(|o| o.time).fold(0.0, f64::max);
        let tau = match options.tau {
            Some(tau) if tau < max_time => {
                return Err(Error::Validation(format!(
                    "tau = {tau} is smaller than the largest observed time {max_time}"
                )))
            }
            Some(tau) => tau,
            None => max_time,
        };

        if options.jitter_ties {
            jitter_tied_events(&mut observations, tau, options.jitter_seed)?;
        }
        check_distinct_event_times(&observations)?;

        for k in 0..k_strata {
            let known_event = observations
                .iter()
                .any(|o| o.status && o.stratum == Some(k));
            if !known_event {
                return Err(Error::Validation(format!(
                    "stratum {} has no event among subjects with observed stratum",
                    k + 1
                )));
            }
        }

        let mut order_desc: Vec<usize> = (0..observations.len()).collect();
        order_desc.sort_by(|&a, &b| {
            observations[b]
                .time
                .total_cmp(&observations[a].time)
                .then(a.cmp(&b))
        });

        Ok(Self {
            observations,
            p,
            m,
            k_strata,
            tau,
            order_desc,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k_strata(&self) -> usize {
        self.k_strata
    }

    /// Number of logistic coefficients, `(K - 1) * m`.
    pub fn q(&self) -> usize {
        (self.k_strata - 1) * self.m
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Subject indices ordered by decreasing time.
    pub fn order_desc(&self) -> &[usize] {
        &self.order_desc
    }

    /// Sorted event times (`Δ = 1`), all strata pooled.
    pub fn event_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .observations
            .iter()
            .filter(|o| o.status)
            .map(|o| o.time)
            .collect();
        t.sort_by(f64::total_cmp);
        t
    }

    /// Per stratum, the number of subjects with known stratum still at risk
    /// at `tau`.
    pub fn observed_at_risk_at_tau(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k_strata];
        for obs in &self.observations {
            if let Some(s) = obs.stratum {
                if obs.time >= self.tau {
                    counts[s] += 1;
                }
            }
        }
        counts
    }

    pub fn missing_fraction(&self) -> f64 {
        let missing = self.observations.iter().filter(|o| !o.observed()).count();
        missing as f64 / self.n() as f64
    }

    pub fn event_fraction(&self) -> f64 {
        let events = self.observations.iter().filter(|o| o.status).count();
        events as f64 / self.n() as f64
    }
}

fn check_distinct_event_times(observations: &[Observation]) -> Result<()> {
    let mut events: Vec<(f64, usize)> = observations
        .iter()
        .enumerate()
        .filter(|(_, o)| o.status)
        .map(|(i, o)| (o.time, i))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for pair in events.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::TiedEventTimes {
                time: pair[0].0,
                first: pair[0].1,
                second: pair[1].1,
            });
        }
    }
    Ok(())
}

fn jitter_tied_events(observations: &mut [Observation], tau: f64, seed: u64) -> Result<()> {
    let scale = if tau > 0.0 { tau } else { 1.0 };
    let eps = JITTER_SCALE * scale;
    let mut events: Vec<usize> = (0..observations.len())
        .filter(|&i| observations[i].status)
        .collect();
    events.sort_by(|&a, &b| observations[a].time.total_cmp(&observations[b].time).then(a.cmp(&b)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = 0;
    let mut jittered = 0;
    while start < events.len() {
        let t = observations[events[start]].time;
        let mut end = start + 1;
        while end < events.len() && observations[events[end]].time == t {
            end += 1;
        }
        if end - start > 1 {
            let mut group = events[start..end].to_vec();
            group.shuffle(&mut rng);
            for (j, &i) in group.iter().enumerate().skip(1) {
                let shifted = t - j as f64 * eps;
                if shifted < 0.0 {
                    return Err(Error::Validation(format!(
                        "cannot jitter tied event times at t = {t}"
                    )));
                }
                observations[i].time = shifted;
                jittered += 1;
            }
        }
        start = end;
    }
    if jittered > 0 {
        log::warn!("jittered {jittered} tied event times by multiples of {eps:e}");
    }
    Ok(())
}

/// A right-continuous nondecreasing step function starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<(f64, f64)>", try_from = "Vec<(f64, f64)>")]
pub struct StepFunction {
    jump_times: Vec<f64>,
    jump_sizes: Vec<f64>,
    cumulative: Vec<f64>,
}

impl StepFunction {
    /// Jump times must be strictly increasing and positive; jump sizes
    /// finite and nonnegative.
    pub fn new(jump_times: Vec<f64>, jump_sizes: Vec<f64>) -> Result<Self> {
        if jump_times.len() != jump_sizes.len() {
            return Err(Error::Dimension(format!(
                "{} jump times but {} jump sizes",
                jump_times.len(),
                jump_sizes.len()
            )));
        }
        if jump_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Validation("jump times must be strictly increasing".into()));
        }
        if jump_times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::Validation("jump times must be positive and finite".into()));
        }
        if jump_sizes.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::Validation("jump sizes must be finite and nonnegative".into()));
        }
        let mut acc = 0.0;
        let cumulative = jump_sizes
            .iter()
            .map(|a| {
                acc += a;
                acc
            })
            .collect();
        Ok(Self {
            jump_times,
            jump_sizes,
            cumulative,
        })
    }

    pub fn zero() -> Self {
        Self {
            jump_times: Vec::new(),
            jump_sizes: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn jump_sizes(&self) -> &[f64] {
        &self.jump_sizes
    }

    /// `Λ(t)`, the sum of jumps at times `<= t`.
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&s| s <= t);
        if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        }
    }

    /// `Λ(t-)`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&s| s < t);
        if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        }
    }

    /// Registered jump at exactly `t`, zero elsewhere.
    pub fn jump_at(&self, t: f64) -> f64 {
        match self.jump_times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => self.jump_sizes[i],
            Err(_) => 0.0,
        }
    }

    /// `Λ` at the last jump.
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

impl From<StepFunction> for Vec<(f64, f64)> {
    fn from(f: StepFunction) -> Self {
        f.jump_times.into_iter().zip(f.jump_sizes).collect()
    }
}

impl TryFrom<Vec<(f64, f64)>> for StepFunction {
    type Error = Error;

    fn try_from(pairs: Vec<(f64, f64)>) -> Result<Self> {
        let (times, sizes) = pairs.into_iter().unzip();
        StepFunction::new(times, sizes)
    }
}

/// The full parameter `(β, γ, Λ_1..Λ_K)`.
///
/// `gamma` is the row-major flattening of the `(K - 1) × m` coefficient
/// matrix; the reference stratum's row is implicitly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub baselines: Vec<StepFunction>,
}

impl Params {
    pub fn k_strata(&self) -> usize {
        self.baselines.len()
    }

    /// Checks that the parameter dimensions agree with `data`.
    pub fn check_dims(&self, data: &Dataset) -> Result<()> {
        if self.beta.len() != data.p() {
            return Err(Error::Dimension(format!(
                "beta has length {} but the data have p = {}",
                self.beta.len(),
                data.p()
            )));
        }
        if self.baselines.len() != data.k_strata() {
            return Err(Error::Dimension(format!(
                "{} baselines for K = {}",
                self.baselines.len(),
                data.k_strata()
            )));
        }
        if self.gamma.len() != data.q() {
            return Err(Error::Dimension(format!(
                "gamma has length {} but (K - 1) * m = {}",
                self.gamma.len(),
                data.q()
            )));
        }
        Ok(())
    }

    /// Checks that every baseline jumps only inside its support set.
    pub fn check_support(&self, data: &Dataset) -> Result<()> {
        for (k, base) in self.baselines.iter().enumerate() {
            let support = jump_support(data, k);
            for &t in base.jump_times() {
                if support.binary_search_by(|s| s.total_cmp(&t)).is_err() {
                    return Err(Error::Validation(format!(
                        "baseline {} jumps at t = {t}, outside its support",
                        k + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        dot(&self.beta, x)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log stratum probabilities `log π_k(w)` for the multinomial logistic model
/// with the last stratum as reference.
pub fn log_stratum_probs(gamma: &[f64], k_strata: usize, w: &[f64]) -> Result<Vec<f64>> {
    if k_strata == 0 || gamma.len() != (k_strata - 1) * w.len() {
        return Err(Error::Dimension(format!(
            "gamma has length {} but (K - 1) * m = {}",
            gamma.len(),
            k_strata.saturating_sub(1) * w.len()
        )));
    }
    let m = w.len();
    let mut eta: Vec<f64> = (0..k_strata)
        .map(|k| {
            if k + 1 == k_strata {
                0.0
            } else {
                dot(&gamma[k * m..(k + 1) * m], w)
            }
        })
        .collect();
    let lse = log_sum_exp(&eta);
    for e in &mut eta {
        *e -= lse;
    }
    Ok(eta)
}

/// Stratum probabilities `π_k(w) = exp(γ_k'w) / Σ_j exp(γ_j'w)`, `γ_K = 0`.
pub fn stratum_probs(gamma: &[f64], k_strata: usize, w: &[f64]) -> Result<Vec<f64>> {
    Ok(log_stratum_probs(gamma, k_strata, w)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Legal jump locations for `Λ_k`: times of events whose stratum is known to
/// be `k`, or unknown. Sorted ascending.
pub fn jump_support(data: &Dataset, k: usize) -> Vec<f64> {
    let mut times: Vec<f64> = data
        .observations()
        .iter()
        .filter(|o| o.status && (o.stratum.is_none() || o.stratum == Some(k)))
        .map(|o| o.time)
        .collect();
    times.sort_by(f64::total_cmp);
    times
}

/// Log of the complete-data density of one subject assuming stratum `k`,
/// with `λ_k(T)` replaced by the jump of `Λ_k` at `T`.
pub(crate) fn stratum_log_density(theta: &Params, obs: &Observation, k: usize, log_pi: f64) -> f64 {
    let base = &theta.baselines[k];
    let eta = theta.linear_predictor(&obs.x);
    let survival = -eta.exp() * base.eval(obs.time);
    if obs.status {
        let jump = base.jump_at(obs.time);
        if jump <= 0.0 {
            return f64::NEG_INFINITY;
        }
        jump.ln() + eta + survival + log_pi
    } else {
        survival + log_pi
    }
}

/// One subject's contribution to the observed-data log-likelihood.
pub fn subject_log_likelihood(theta: &Params, obs: &Observation) -> Result<f64> {
    let k_strata = theta.k_strata();
    let log_pi = log_stratum_probs(&theta.gamma, k_strata, &obs.w)?;
    Ok(match obs.stratum {
        Some(s) => stratum_log_density(theta, obs, s, log_pi[s]),
        None => {
            let terms: Vec<f64> = (0..k_strata)
                .map(|k| stratum_log_density(theta, obs, k, log_pi[k]))
                .collect();
            log_sum_exp(&terms)
        }
    })
}

/// Observed-data log-likelihood with step-function baselines. Returns
/// `-inf` when some event has zero jump in every stratum it may belong to.
pub fn observed_log_likelihood(theta: &Params, data: &Dataset) -> Result<f64> {
    theta.check_dims(data)?;
    let mut total = 0.0;
    for obs in data.observations() {
        total += subject_log_likelihood(theta, obs)?;
    }
    Ok(total)
}
