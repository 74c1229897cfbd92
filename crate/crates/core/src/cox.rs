//! Complete-case estimation: stratified Cox partial likelihood with the
//! Breslow baseline, and the multinomial logistic stratum model. Used to
//! initialize the EM fit and as the full-data reference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{dot, log_stratum_probs, Dataset, StepFunction};
use crate::optim::{maximize, Evaluation, NewtonOptions, NewtonOutcome};

/// Complete-case stratified Cox fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteFit {
    pub beta: Vec<f64>,
    pub breslow: Vec<StepFunction>,
    pub converged: bool,
    /// `‖β‖` reached the cap: the partial likelihood is likely monotone.
    pub capped: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Logistic stratum-model fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub gamma: Vec<f64>,
    pub converged: bool,
    /// `‖γ‖` reached the cap: the strata are (quasi-)separated by `W`.
    pub capped: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl GammaFit {
    pub(crate) fn from_outcome(out: NewtonOutcome) -> Self {
        Self {
            gamma: out.x,
            converged: out.converged,
            capped: out.capped,
            iterations: out.iterations,
            grad_norm: out.grad_norm,
        }
    }
}

/// Subjects with known stratum `k`, ordered by decreasing time.
fn stratum_members(data: &Dataset, k: usize) -> Vec<usize> {
    data.order_desc()
        .iter()
        .copied()
        .filter(|&i| data.observations()[i].stratum == Some(k))
        .collect()
}

/// Stratified log partial likelihood over subjects with known stratum,
/// with its gradient and Hessian.
pub fn partial_log_likelihood(data: &Dataset, beta: &[f64]) -> Evaluation {
    let p = data.p();
    let obs = data.observations();
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);

    for k in 0..data.k_strata() {
        let members = stratum_members(data, k);
        let mut s0 = 0.0;
        let mut s1 = DVector::<f64>::zeros(p);
        let mut s2 = DMatrix::<f64>::zeros(p, p);
        let mut start = 0;
        while start < members.len() {
            let t = obs[members[start]].time;
            let mut end = start;
            while end < members.len() && obs[members[end]].time == t {
                let o = &obs[members[end]];
                let x = DVector::from_column_slice(&o.x);
                let r = dot(beta, &o.x).exp();
                s0 += r;
                s1.axpy(r, &x, 1.0);
                s2.ger(r, &x, &x, 1.0);
                end += 1;
            }
            for &i in &members[start..end] {
                let o = &obs[i];
                if !o.status {
                    continue;
                }
                let mean = &s1 / s0;
                value += dot(beta, &o.x) - s0.ln();
                gradient += DVector::from_column_slice(&o.x) - &mean;
                hessian -= &s2 / s0 - &mean * mean.transpose();
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

/// Breslow estimator of each stratum's cumulative baseline at `beta`, using
/// subjects with known stratum only.
pub fn breslow(data: &Dataset, beta: &[f64]) -> Result<Vec<StepFunction>> {
    let obs = data.observations();
    (0..data.k_strata())
        .map(|k| {
            let members = stratum_members(data, k);
            let mut jumps: Vec<(f64, f64)> = Vec::new();
            let mut s0 = 0.0;
            let mut start = 0;
            while start < members.len() {
                let t = obs[members[start]].time;
                let mut end = start;
                while end < members.len() && obs[members[end]].time == t {
                    s0 += dot(beta, &obs[members[end]].x).exp();
                    end += 1;
                }
                for &i in &members[start..end] {
                    if obs[i].status {
                        jumps.push((obs[i].time, 1.0 / s0));
                    }
                }
                start = end;
            }
            jumps.reverse();
            StepFunction::try_from(jumps)
        })
        .collect()
}

/// Maximizes the stratified partial likelihood over subjects with known
/// stratum and returns the Breslow baselines at the maximizer.
pub fn fit_complete_case(data: &Dataset, opts: &NewtonOptions) -> Result<CompleteFit> {
    let out = maximize(
        |beta| partial_log_likelihood(data, beta),
        vec![0.0; data.p()],
        opts,
    );
    let breslow = breslow(data, &out.x)?;
    Ok(CompleteFit {
        beta: out.x,
        breslow,
        converged: out.converged,
        capped: out.capped,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
    })
}

/// `Σ_i Σ_k weights[i][k] log π_k(w_i)` with gradient and Hessian in the
/// flattened `(K - 1) × m` coefficient vector.
pub(crate) fn multinomial_objective(
    rows: &[&[f64]],
    weights: &[f64],
    k_strata: usize,
    gamma: &[f64],
) -> Evaluation {
    let m = rows.first().map_or(0, |r| r.len());
    let q = (k_strata - 1) * m;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(q);
    let mut hessian = DMatrix::zeros(q, q);
    for (i, w) in rows.iter().enumerate() {
        let qi = &weights[i * k_strata..(i + 1) * k_strata];
        let total: f64 = qi.iter().sum();
        if total == 0.0 {
            continue;
        }
        let log_pi = log_stratum_probs(gamma, k_strata, w).expect("dimensions checked by caller");
        let pi: Vec<f64> = log_pi.iter().map(|v| v.exp()).collect();
        for k in 0..k_strata {
            if qi[k] > 0.0 {
                value += qi[k] * log_pi[k];
            }
        }
        for k in 0..k_strata - 1 {
            let resid = qi[k] - total * pi[k];
            for a in 0..m {
                gradient[k * m + a] += w[a] * resid;
            }
            for l in 0..k_strata - 1 {
                let c = total * pi[k] * (if k == l { 1.0 } else { 0.0 } - pi[l]);
                for a in 0..m {
                    for b in 0..m {
                        hessian[(k * m + a, l * m + b)] -= c * w[a] * w[b];
                    }
                }
            }
        }
    }
    Evaluation {
        value,
        gradient,
        hessian,
    }
}

pub(crate) fn fit_multinomial(
    rows: &[&[f64]],
    weights: &[f64],
    k_strata: usize,
    init: Vec<f64>,
    opts: &NewtonOptions,
) -> GammaFit {
    let out = maximize(
        |g| multinomial_objective(rows, weights, k_strata, g),
        init,
        opts,
    );
    GammaFit::from_outcome(out)
}

/// Multinomial logistic fit of the stratum on `W` among subjects with known
/// stratum.
pub fn fit_complete_gamma(data: &Dataset, opts: &NewtonOptions) -> GammaFit {
    let k_strata = data.k_strata();
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for o in data.observations() {
        if let Some(s) = o.stratum {
            rows.push(o.w.as_slice());
            weights.extend((0..k_strata).map(|k| if k == s { 1.0 } else { 0.0 }));
        }
    }
    fit_multinomial(&rows, &weights, k_strata, vec![0.0; data.q()], opts)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::Observation;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn subject(time: f64, status: bool, x: Vec<f64>, w: Vec<f64>, s: Option<usize>) -> Observation {
        Observation {
            time,
            status,
            x,
            w,
            stratum: s,
        }
    }

    #[test]
    fn two_subject_monotone_likelihood_is_flagged() {
        let data = Dataset::new(
            vec![
                subject(1.0, true, vec![0.0], vec![], Some(0)),
                subject(2.0, false, vec![1.0], vec![], Some(0)),
            ],
            1,
        )
        .unwrap();
        let at_zero = partial_log_likelihood(&data, &[0.0]);
        assert_abs_diff_eq!(at_zero.gradient[0], -0.5, epsilon = 1e-15);
        let fit = fit_complete_case(&data, &NewtonOptions::default()).unwrap();
        assert!(fit.capped);
        assert!(!fit.converged);
        assert_abs_diff_eq!(fit.beta[0], -50.0, epsilon = 1e-9);
    }

    #[test]
    fn no_covariates_gives_nelson_aalen() {
        let times = [0.5, 1.0, 1.5, 2.0, 2.5];
        let status = [true, false, true, true, false];
        let data = Dataset::new(
            times
                .iter()
                .zip(status)
                .map(|(&t, d)| subject(t, d, vec![], vec![], Some(0)))
                .collect(),
            1,
        )
        .unwrap();
        let fit = fit_complete_case(&data, &NewtonOptions::default()).unwrap();
        assert!(fit.converged);
        let b = &fit.breslow[0];
        assert_eq!(b.jump_times(), &[0.5, 1.5, 2.0]);
        assert_abs_diff_eq!(b.jump_at(0.5), 1.0 / 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.jump_at(1.5), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.jump_at(2.0), 1.0 / 2.0, epsilon = 1e-15);
    }

    /// Partial likelihood evaluated from the definition with explicit risk
    /// sets.
    fn brute_partial_loglik(subjects: &[Observation], beta: f64) -> f64 {
        let mut total = 0.0;
        for i in subjects.iter().filter(|o| o.status) {
            let denom: f64 = subjects
                .iter()
                .filter(|j| j.stratum == i.stratum && j.time >= i.time)
                .map(|j| (beta * j.x[0]).exp())
                .sum();
            total += beta * i.x[0] - denom.ln();
        }
        total
    }

    /// Grid search followed by golden-section polish.
    pub(crate) fn grid_polish(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        let steps = 400;
        let h = (hi - lo) / steps as f64;
        let best = (0..=steps)
            .map(|s| lo + s as f64 * h)
            .max_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        let (mut a, mut b) = (best - h, best + h);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-11 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn single_stratum_beta_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let subjects: Vec<Observation> = (0..50)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let t0 = -rng.random::<f64>().ln() / (0.7 * x).exp();
                let c = rng.random_range(0.0..3.0);
                subject(t0.min(c), t0 <= c, vec![x], vec![], Some(0))
            })
            .collect();
        let data = Dataset::new(subjects.clone(), 1).unwrap();
        let fit = fit_complete_case(&data, &NewtonOptions::default()).unwrap();
        assert!(fit.converged);
        let oracle = grid_polish(|b| brute_partial_loglik(&subjects, b), -5.0, 5.0);
        assert_abs_diff_eq!(fit.beta[0], oracle, epsilon = 1e-6);
        let ev = partial_log_likelihood(&data, &[0.37]);
        assert_abs_diff_eq!(ev.value, brute_partial_loglik(&subjects, 0.37), epsilon = 1e-10);
    }

    #[test]
    fn breslow_has_one_jump_per_stratum_event() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let subjects: Vec<Observation> = (0..40)
            .map(|i| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let t = rng.random_range(0.1..2.0);
                subject(t, rng.random::<f64>() < 0.7, vec![x], vec![], Some(i % 2))
            })
            .collect();
        let data = Dataset::new(subjects.clone(), 2).unwrap();
        let b = breslow(&data, &[0.3]).unwrap();
        for k in 0..2 {
            let n_events = subjects
                .iter()
                .filter(|o| o.status && o.stratum == Some(k))
                .count();
            assert_eq!(b[k].jump_times().len(), n_events);
            assert!(b[k].jump_sizes().iter().all(|&a| a > 0.0));
        }
    }

    #[test]
    fn intercept_only_gamma_is_logit() {
        let mut subjects = Vec::new();
        for i in 0..10 {
            let s = if i < 7 { 0 } else { 1 };
            subjects.push(subject(1.0 + i as f64, true, vec![], vec![1.0], Some(s)));
        }
        let data = Dataset::new(subjects, 2).unwrap();
        let fit = fit_complete_gamma(&data, &NewtonOptions::default());
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.gamma[0], (0.7f64 / 0.3).ln(), epsilon = 1e-9);
    }

    #[test]
    fn all_in_reference_stratum_is_separated() {
        let subjects: Vec<Observation> = (0..6)
            .map(|i| subject(1.0 + i as f64, true, vec![], vec![1.0], Some(1)))
            .collect();
        // stratum 1 needs a known event for validation; use K = 2 data where
        // the logistic fit only sees reference-stratum rows
        let rows: Vec<&[f64]> = subjects.iter().map(|o| o.w.as_slice()).collect();
        let weights: Vec<f64> = subjects.iter().flat_map(|_| [0.0, 1.0]).collect();
        let fit = fit_multinomial(&rows, &weights, 2, vec![0.0], &NewtonOptions::default());
        assert!(fit.capped);
        assert!(!fit.converged);
    }

    /// Weighted multinomial logistic regression by iteratively reweighted
    /// least squares on the stacked K-1 equations.
    pub(crate) fn irls_oracle(rows: &[Vec<f64>], weights: &[Vec<f64>], k_strata: usize) -> Vec<f64> {
        let m = rows[0].len();
        let q = (k_strata - 1) * m;
        let mut gamma = DVector::<f64>::zeros(q);
        for _ in 0..100 {
            let mut xtwx = DMatrix::<f64>::zeros(q, q);
            let mut xtwz = DVector::<f64>::zeros(q);
            for (w, qi) in rows.iter().zip(weights) {
                let total: f64 = qi.iter().sum();
                let eta: Vec<f64> = (0..k_strata)
                    .map(|k| {
                        if k + 1 == k_strata {
                            0.0
                        } else {
                            (0..m).map(|a| gamma[k * m + a] * w[a]).sum()
                        }
                    })
                    .collect();
                let z: f64 = eta.iter().map(|e| e.exp()).sum();
                let pi: Vec<f64> = eta.iter().map(|e| e.exp() / z).collect();
                // design block: X_i = I_{K-1} ⊗ w'
                let mut design = DMatrix::<f64>::zeros(k_strata - 1, q);
                for k in 0..k_strata - 1 {
                    for a in 0..m {
                        design[(k, k * m + a)] = w[a];
                    }
                }
                let mut v = DMatrix::<f64>::zeros(k_strata - 1, k_strata - 1);
                for k in 0..k_strata - 1 {
                    for l in 0..k_strata - 1 {
                        v[(k, l)] = total * pi[k] * (if k == l { 1.0 } else { 0.0 } - pi[l]);
                    }
                }
                let resid = DVector::from_iterator(
                    k_strata - 1,
                    (0..k_strata - 1).map(|k| qi[k] - total * pi[k]),
                );
                let eta_v = DVector::from_iterator(k_strata - 1, eta[..k_strata - 1].iter().copied());
                // working response z = η + V^{-1} r
                let vinv = v.clone().try_inverse().unwrap();
                let work = eta_v + &vinv * resid;
                xtwx += design.transpose() * &v * &design;
                xtwz += design.transpose() * &v * work;
            }
            let next = xtwx.lu().solve(&xtwz).unwrap();
            let change = (&next - &gamma).norm();
            gamma = next;
            if change < 1e-14 {
                break;
            }
        }
        gamma.iter().copied().collect()
    }

    #[test]
    fn gamma_matches_irls_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let true_gamma = [0.4, 1.0, -0.3, 0.5];
        let mut subjects = Vec::new();
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for i in 0..100 {
            let w = vec![1.0, rng.random_range(-1.0..1.0)];
            let pi = crate::model::stratum_probs(&true_gamma, 3, &w).unwrap();
            let u: f64 = rng.random();
            let s = if u < pi[0] { 0 } else if u < pi[0] + pi[1] { 1 } else { 2 };
            rows.push(w.clone());
            weights.push((0..3).map(|k| if k == s { 1.0 } else { 0.0 }).collect::<Vec<_>>());
            subjects.push(subject(1.0 + i as f64, true, vec![], w, Some(s)));
        }
        let data = Dataset::new(subjects, 3).unwrap();
        let fit = fit_complete_gamma(&data, &NewtonOptions::default());
        assert!(fit.converged);
        let oracle = irls_oracle(&rows, &weights, 3);
        for (a, b) in fit.gamma.iter().zip(&oracle) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn partial_likelihood_ascends_along_newton_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let subjects: Vec<Observation> = (0..60)
            .map(|i| {
                let x: Vec<f64> = vec![rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)];
                let t0 = -rng.random::<f64>().ln() / (0.5 * x[0] - x[1]).exp();
                subject(t0.min(2.0), t0 <= 2.0, x, vec![], Some(i % 2))
            })
            .collect();
        let data = Dataset::new(subjects, 2).unwrap();
        let mut values = Vec::new();
        for iters in 0..6 {
            let opts = NewtonOptions {
                max_iters: iters,
                ..Default::default()
            };
            let fit = fit_complete_case(&data, &opts).unwrap();
            values.push(partial_log_likelihood(&data, &fit.beta).value);
        }
        assert!(values.windows(2).all(|v| v[1] >= v[0]));
    }
}
