//! EM algorithm for the NPMLE.
//!
//! Each iteration computes the posterior stratum weights `Q(O_i, k, θ)`,
//! then maximizes the expected complete-data log-likelihood: the logistic
//! part in `γ`, and the hazard part in `(β, Λ)` jointly by profiling the
//! baselines out through their closed-form weighted Breslow update.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cox::{fit_complete_case, fit_complete_gamma, fit_multinomial, GammaFit};
use crate::error::{Error, Result};
use crate::model::{
    dot, jump_support, log_stratum_probs, log_sum_exp, observed_log_likelihood,
    stratum_log_density, Dataset, Params, StepFunction,
};
use crate::optim::{maximize, Evaluation, NewtonOptions};

/// Posterior stratum membership weights, one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    k_strata: usize,
    values: Vec<f64>,
}

impl WeightMatrix {
    /// Builds a matrix from row-major values.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k_strata = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != k_strata) {
            return Err(Error::Dimension("weight rows have unequal lengths".into()));
        }
        Ok(Self {
            k_strata,
            values: rows.concat(),
        })
    }

    /// Indicator rows for known strata; `fill` gives the row of a subject
    /// with unknown stratum.
    pub(crate) fn with_unknown_rows(data: &Dataset, mut fill: impl FnMut(usize) -> Vec<f64>) -> Self {
        let k_strata = data.k_strata();
        let mut values = Vec::with_capacity(data.n() * k_strata);
        for (i, o) in data.observations().iter().enumerate() {
            match o.stratum {
                Some(s) => values.extend((0..k_strata).map(|k| if k == s { 1.0 } else { 0.0 })),
                None => values.extend(fill(i)),
            }
        }
        Self { k_strata, values }
    }

    pub fn n(&self) -> usize {
        if self.k_strata == 0 {
            0
        } else {
            self.values.len() / self.k_strata
        }
    }

    pub fn k_strata(&self) -> usize {
        self.k_strata
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k_strata..(i + 1) * self.k_strata]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.k_strata + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        if self.k_strata != data.k_strata() || self.n() != data.n() {
            return Err(Error::Dimension(format!(
                "weights are {} x {} but the data have n = {}, K = {}",
                self.n(),
                self.k_strata,
                data.n(),
                data.k_strata()
            )));
        }
        Ok(())
    }
}

/// How the EM iteration is started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// Complete-case Cox and logistic fits, falling back to zeros.
    CompleteCase,
    UserSupplied { theta: Params },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_em_iters: usize,
    /// Relative change of the observed log-likelihood between iterations.
    pub em_tol: f64,
    /// Largest change of any `β`, `γ` or `Λ_k(t)` value between iterations.
    pub param_tol: f64,
    /// Largest absolute score over the canonical directions.
    pub score_tol: f64,
    pub newton_max_iters: usize,
    pub newton_tol: f64,
    pub norm_cap: f64,
    pub init: Init,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 10_000,
            em_tol: 1e-8,
            param_tol: 1e-6,
            score_tol: 1e-7,
            newton_max_iters: 200,
            newton_tol: 1e-8,
            norm_cap: 50.0,
            init: Init::CompleteCase,
        }
    }
}

impl FitConfig {
    pub fn newton_options(&self) -> NewtonOptions {
        NewtonOptions {
            max_iters: self.newton_max_iters,
            tol: self.newton_tol,
            norm_cap: self.norm_cap,
            ..NewtonOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("em_tol", self.em_tol),
            ("param_tol", self.param_tol),
            ("score_tol", self.score_tol),
            ("newton_tol", self.newton_tol),
            ("norm_cap", self.norm_cap),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Config {
                    field: field.into(),
                    reason: format!("must be positive, got {value}"),
                });
            }
        }
        if self.max_em_iters == 0 || self.newton_max_iters == 0 {
            return Err(Error::Config {
                field: "max_em_iters".into(),
                reason: "iteration limits must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Params,
    /// Observed-data log-likelihood at the starting value and after each
    /// iteration.
    pub loglik_trace: Vec<f64>,
    pub em_iterations: usize,
    pub converged: bool,
    /// Score `S_n(θ̂)(h)` for each canonical direction `h`.
    pub score_residuals: BTreeMap<String, f64>,
    /// Time `t` of the baseline directions `1{· <= t}`.
    pub score_time: f64,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn max_score_residual(&self) -> f64 {
        self.score_residuals.values().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds the starting value")
    }
}

/// E-step: `Q(O_i, k, θ)`. Rows of subjects with known stratum are
/// indicators; the others are posterior probabilities computed in log
/// space.
pub fn e_step(theta: &Params, data: &Dataset) -> Result<WeightMatrix> {
    theta.check_dims(data)?;
    let k_strata = data.k_strata();
    let mut values = Vec::with_capacity(data.n() * k_strata);
    for (i, o) in data.observations().iter().enumerate() {
        match o.stratum {
            Some(s) => values.extend((0..k_strata).map(|k| if k == s { 1.0 } else { 0.0 })),
            None => {
                let log_pi = log_stratum_probs(&theta.gamma, k_strata, &o.w)?;
                let log_dens: Vec<f64> = (0..k_strata)
                    .map(|k| stratum_log_density(theta, o, k, log_pi[k]))
                    .collect();
                let lse = log_sum_exp(&log_dens);
                if !lse.is_finite() {
                    return Err(Error::ZeroDensity { subject: i });
                }
                values.extend(log_dens.iter().map(|v| (v - lse).exp()));
            }
        }
    }
    Ok(WeightMatrix { k_strata, values })
}

/// Weighted Breslow update of every baseline at fixed weights and `β`.
/// Each `Λ_k` carries one (possibly zero) jump per time in its support.
pub fn m_step_lambda(weights: &WeightMatrix, beta: &[f64], data: &Dataset) -> Result<Vec<StepFunction>> {
    weights.check(data)?;
    let obs = data.observations();
    let order = data.order_desc();
    let risk: Vec<f64> = obs.iter().map(|o| dot(beta, &o.x).exp()).collect();
    (0..data.k_strata())
        .map(|k| {
            let mut jumps: Vec<(f64, f64)> = Vec::new();
            let mut denom = 0.0;
            let mut start = 0;
            while start < order.len() {
                let t = obs[order[start]].time;
                let mut end = start;
                while end < order.len() && obs[order[end]].time == t {
                    let j = order[end];
                    denom += weights.get(j, k) * risk[j];
                    end += 1;
                }
                for &i in &order[start..end] {
                    let o = &obs[i];
                    if !o.status || !(o.stratum.is_none() || o.stratum == Some(k)) {
                        continue;
                    }
                    let q = weights.get(i, k);
                    let jump = if q > 0.0 {
                        if !(denom > 0.0) {
                            return Err(Error::ZeroDenominator { time: t, stratum: k + 1 });
                        }
                        q / denom
                    } else {
                        0.0
                    };
                    jumps.push((t, jump));
                }
                start = end;
            }
            jumps.reverse();
            StepFunction::try_from(jumps)
        })
        .collect()
}

/// Weighted stratified log partial likelihood: the hazard part of the
/// expected complete-data log-likelihood with the baselines profiled out.
pub fn profile_objective(weights: &WeightMatrix, data: &Dataset, beta: &[f64]) -> Evaluation {
    let p = data.p();
    let obs = data.observations();
    let order = data.order_desc();
    let etas: Vec<f64> = obs.iter().map(|o| dot(beta, &o.x)).collect();
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);

    for k in 0..data.k_strata() {
        let mut s0 = 0.0;
        let mut s1 = DVector::<f64>::zeros(p);
        let mut s2 = DMatrix::<f64>::zeros(p, p);
        let mut start = 0;
        while start < order.len() {
            let t = obs[order[start]].time;
            let mut end = start;
            while end < order.len() && obs[order[end]].time == t {
                let j = order[end];
                let wr = weights.get(j, k) * etas[j].exp();
                if wr > 0.0 {
                    let x = DVector::from_column_slice(&obs[j].x);
                    s0 += wr;
                    s1.axpy(wr, &x, 1.0);
                    s2.ger(wr, &x, &x, 1.0);
                }
                end += 1;
            }
            for &i in &order[start..end] {
                let q = weights.get(i, k);
                if !obs[i].status || q <= 0.0 {
                    continue;
                }
                let mean = &s1 / s0;
                value += q * (etas[i] - s0.ln());
                gradient.axpy(q, &(DVector::from_column_slice(&obs[i].x) - &mean), 1.0);
                hessian -= (&s2 / s0 - &mean * mean.transpose()) * q;
            }
            start = end;
        }
    }
    Evaluation {
        value,
        gradient,
        hessian,
    }
}

/// Result of the `β` update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub beta: Vec<f64>,
    pub converged: bool,
    pub capped: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// M-step for `β`: maximizes the profile objective by damped Newton from
/// `beta_init`.
pub fn m_step_beta(
    weights: &WeightMatrix,
    data: &Dataset,
    beta_init: &[f64],
    opts: &NewtonOptions,
) -> Result<BetaFit> {
    weights.check(data)?;
    if beta_init.len() != data.p() {
        return Err(Error::Dimension(format!(
            "beta_init has length {}, expected {}",
            beta_init.len(),
            data.p()
        )));
    }
    let out = maximize(|b| profile_objective(weights, data, b), beta_init.to_vec(), opts);
    Ok(BetaFit {
        beta: out.x,
        converged: out.converged,
        capped: out.capped,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
    })
}

/// M-step for `γ`: weighted multinomial logistic regression of the
/// posterior weights on `W`.
pub fn m_step_gamma(
    weights: &WeightMatrix,
    data: &Dataset,
    gamma_init: &[f64],
    opts: &NewtonOptions,
) -> Result<GammaFit> {
    weights.check(data)?;
    if gamma_init.len() != data.q() {
        return Err(Error::Dimension(format!(
            "gamma_init has length {}, expected {}",
            gamma_init.len(),
            data.q()
        )));
    }
    let rows: Vec<&[f64]> = data.observations().iter().map(|o| o.w.as_slice()).collect();
    Ok(fit_multinomial(
        &rows,
        weights.as_slice(),
        data.k_strata(),
        gamma_init.to_vec(),
        opts,
    ))
}

/// Perturbation of one baseline in a score direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaDirection {
    Zero,
    Constant(f64),
    /// `h(s) = 1{s <= t}`.
    Indicator(f64),
}

impl LambdaDirection {
    fn at(&self, s: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Constant(c) => c,
            Self::Indicator(t) => {
                if s <= t {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `∫_0^upper h dΛ`.
    fn integrate(&self, lambda: &StepFunction, upper: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Constant(c) => c * lambda.eval(upper),
            Self::Indicator(t) => lambda.eval(upper.min(t)),
        }
    }
}

/// A direction `h = (h_β, h_γ, h_Λ1..h_ΛK)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<LambdaDirection>,
}

impl Direction {
    pub fn zero(data: &Dataset) -> Self {
        Self {
            beta: vec![0.0; data.p()],
            gamma: vec![0.0; data.q()],
            lambda: vec![LambdaDirection::Zero; data.k_strata()],
        }
    }

    pub fn beta(data: &Dataset, r: usize) -> Self {
        let mut h = Self::zero(data);
        h.beta[r] = 1.0;
        h
    }

    pub fn gamma(data: &Dataset, r: usize) -> Self {
        let mut h = Self::zero(data);
        h.gamma[r] = 1.0;
        h
    }

    pub fn lambda_indicator(data: &Dataset, j: usize, t: f64) -> Self {
        let mut h = Self::zero(data);
        h.lambda[j] = LambdaDirection::Indicator(t);
        h
    }
}

/// `S_n(θ)(h)`: empirical mean of the score in direction `h`, with the
/// posterior weights evaluated at `θ`.
pub fn score_at(theta: &Params, data: &Dataset, direction: &Direction) -> Result<f64> {
    let weights = e_step(theta, data)?;
    score_with_weights(theta, data, &weights, direction)
}

pub(crate) fn score_with_weights(
    theta: &Params,
    data: &Dataset,
    weights: &WeightMatrix,
    direction: &Direction,
) -> Result<f64> {
    if direction.beta.len() != data.p()
        || direction.gamma.len() != data.q()
        || direction.lambda.len() != data.k_strata()
    {
        return Err(Error::Dimension("direction does not match the data".into()));
    }
    let k_strata = data.k_strata();
    let m = data.m();
    let mut total = 0.0;
    for (i, o) in data.observations().iter().enumerate() {
        let q = weights.row(i);
        let r = theta.linear_predictor(&o.x).exp();
        let delta = o.delta();

        let mut cum = 0.0;
        for k in 0..k_strata {
            cum += q[k] * theta.baselines[k].eval(o.time);
        }
        total += dot(&direction.beta, &o.x) * (delta - r * cum);

        if m > 0 && k_strata > 1 {
            let pi = log_stratum_probs(&theta.gamma, k_strata, &o.w)?;
            for k in 0..k_strata - 1 {
                let hw = dot(&direction.gamma[k * m..(k + 1) * m], &o.w);
                total += hw * (q[k] - pi[k].exp());
            }
        }

        for (k, h) in direction.lambda.iter().enumerate() {
            if q[k] == 0.0 || matches!(h, LambdaDirection::Zero) {
                continue;
            }
            total += q[k] * (h.at(o.time) * delta - r * h.integrate(&theta.baselines[k], o.time));
        }
    }
    Ok(total / data.n() as f64)
}

/// Event time used for the canonical baseline directions: the lower median
/// of the pooled event times.
pub fn median_event_time(data: &Dataset) -> f64 {
    let times = data.event_times();
    times[(times.len() - 1) / 2]
}

/// Scores in every canonical direction: each `β` coordinate, each `γ`
/// coordinate, and `1{· <= t}` for each baseline.
pub fn canonical_scores(theta: &Params, data: &Dataset, t: f64) -> Result<BTreeMap<String, f64>> {
    let weights = e_step(theta, data)?;
    let m = data.m();
    let mut out = BTreeMap::new();
    for r in 0..data.p() {
        let s = score_with_weights(theta, data, &weights, &Direction::beta(data, r))?;
        out.insert(format!("beta_{}", r + 1), s);
    }
    for r in 0..data.q() {
        let s = score_with_weights(theta, data, &weights, &Direction::gamma(data, r))?;
        out.insert(format!("gamma_{}_{}", r / m + 1, r % m + 1), s);
    }
    for j in 0..data.k_strata() {
        let s = score_with_weights(theta, data, &weights, &Direction::lambda_indicator(data, j, t))?;
        out.insert(format!("lambda_{}", j + 1), s);
    }
    Ok(out)
}

fn initial_params(data: &Dataset, config: &FitConfig, warnings: &mut Vec<String>) -> Result<Params> {
    if let Init::UserSupplied { theta } = &config.init {
        theta.check_dims(data)?;
        theta.check_support(data)?;
        return Ok(theta.clone());
    }
    let opts = config.newton_options();
    let k_strata = data.k_strata();
    let complete = fit_complete_case(data, &opts)?;
    let gamma_fit = fit_complete_gamma(data, &opts);
    let (beta, gamma, weights) = if complete.converged && gamma_fit.converged {
        let gamma = gamma_fit.gamma;
        let mut failure = None;
        let weights = WeightMatrix::with_unknown_rows(data, |i| {
            match crate::model::stratum_probs(&gamma, k_strata, &data.observations()[i].w) {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(e);
                    vec![0.0; k_strata]
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        (complete.beta, gamma, weights)
    } else {
        warnings.push(
            "complete-case initial fit did not converge; starting from zero coefficients".into(),
        );
        let weights = WeightMatrix::with_unknown_rows(data, |_| vec![1.0 / k_strata as f64; k_strata]);
        (vec![0.0; data.p()], vec![0.0; data.q()], weights)
    };
    let baselines = m_step_lambda(&weights, &beta, data)?;
    Ok(Params {
        beta,
        gamma,
        baselines,
    })
}

fn max_param_change(a: &Params, b: &Params, support: &[Vec<f64>]) -> f64 {
    let mut change: f64 = 0.0;
    for (x, y) in a.beta.iter().zip(&b.beta).chain(a.gamma.iter().zip(&b.gamma)) {
        change = change.max((x - y).abs());
    }
    for (k, times) in support.iter().enumerate() {
        for &t in times {
            change = change.max((a.baselines[k].eval(t) - b.baselines[k].eval(t)).abs());
        }
    }
    change
}

/// Runs EM to convergence. Convergence requires the relative log-likelihood
/// change, the largest parameter change and the largest canonical score to
/// fall below their thresholds.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let opts = config.newton_options();
    let mut warnings = Vec::new();
    let mut theta = initial_params(data, config, &mut warnings)?;
    let support: Vec<Vec<f64>> = (0..data.k_strata()).map(|k| jump_support(data, k)).collect();
    let score_time = median_event_time(data);

    let mut loglik = observed_log_likelihood(&theta, data)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;
    let mut scores = BTreeMap::new();
    let mut last_capped = false;

    while iterations < config.max_em_iters {
        iterations += 1;
        let weights = e_step(&theta, data)?;
        let gamma_fit = m_step_gamma(&weights, data, &theta.gamma, &opts)?;
        let beta_fit = m_step_beta(&weights, data, &theta.beta, &opts)?;
        let baselines = m_step_lambda(&weights, &beta_fit.beta, data)?;
        last_capped = gamma_fit.capped || beta_fit.capped;
        let next = Params {
            beta: beta_fit.beta,
            gamma: gamma_fit.gamma,
            baselines,
        };

        let next_loglik = observed_log_likelihood(&next, data)?;
        if next_loglik < loglik - 1e-10 {
            warnings.push(format!(
                "log-likelihood decreased by {:e} at iteration {iterations}",
                loglik - next_loglik
            ));
        }
        let rel_change = (next_loglik - loglik).abs() / loglik.abs().max(f64::MIN_POSITIVE);
        let param_change = max_param_change(&theta, &next, &support);
        theta = next;
        loglik = next_loglik;
        trace.push(loglik);

        if rel_change < config.em_tol && param_change < config.param_tol {
            scores = canonical_scores(&theta, data, score_time)?;
            let worst = scores.values().fold(0.0f64, |a, v| a.max(v.abs()));
            if worst < config.score_tol {
                converged = !last_capped;
                break;
            }
        }
    }
    if scores.is_empty() || !converged {
        scores = canonical_scores(&theta, data, score_time)?;
    }
    if last_capped {
        warnings.push("a coefficient reached the norm cap; estimates may be infinite".into());
    }
    if !converged {
        log::warn!("EM stopped after {iterations} iterations without converging");
    }

    Ok(FitResult {
        theta_hat: theta,
        loglik_trace: trace,
        em_iterations: iterations,
        converged,
        score_residuals: scores,
        score_time,
        warnings,
    })
}
