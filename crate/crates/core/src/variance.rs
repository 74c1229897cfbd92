//! Plug-in variance estimation from the empirical information block matrix.
//!
//! The matrix has order `p + q + K n`: the `β` block, the `γ` block, then one
//! block of `n` rows per baseline, indexed by the observation times
//! `T_1..T_n` in data order. The variance blocks are extracted by Schur
//! complements rather than by inverting the whole matrix.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::em::{e_step, WeightMatrix};
use crate::error::{Error, Result};
use crate::model::{dot, log_stratum_probs, Dataset, Params};

/// Per-subject ingredients of the information matrix at `θ̂`.
#[derive(Debug, Clone)]
pub struct ScoreKernels {
    /// `ψ_i = Δ_i - Σ_k Q_ik e^{β'X_i} Λ_k(T_i)`.
    pub psi: Vec<f64>,
    pub weights: WeightMatrix,
    /// `e^{β'X_i}`.
    pub risk: Vec<f64>,
    /// `S_{γ,i}`, one row per subject.
    pub s_gamma: DMatrix<f64>,
    pub times: Vec<f64>,
}

impl ScoreKernels {
    pub fn new(theta: &Params, data: &Dataset) -> Result<Self> {
        let weights = e_step(theta, data)?;
        let k_strata = data.k_strata();
        let m = data.m();
        let n = data.n();
        let mut psi = Vec::with_capacity(n);
        let mut risk = Vec::with_capacity(n);
        let mut s_gamma = DMatrix::zeros(n, data.q());
        for (i, o) in data.observations().iter().enumerate() {
            let r = dot(&theta.beta, &o.x).exp();
            let q = weights.row(i);
            let cum: f64 = (0..k_strata)
                .map(|k| q[k] * theta.baselines[k].eval(o.time))
                .sum();
            psi.push(o.delta() - r * cum);
            risk.push(r);
            if k_strata > 1 {
                let log_pi = log_stratum_probs(&theta.gamma, k_strata, &o.w)?;
                for k in 0..k_strata - 1 {
                    let resid = q[k] - log_pi[k].exp();
                    for a in 0..m {
                        s_gamma[(i, k * m + a)] = o.w[a] * resid;
                    }
                }
            }
        }
        Ok(Self {
            psi,
            weights,
            risk,
            s_gamma,
            times: data.observations().iter().map(|o| o.time).collect(),
        })
    }

    /// `φ(u, O_i, k) = Y_i(u) Q_ik e^{β'X_i}`.
    pub fn phi(&self, u: f64, i: usize, k: usize) -> f64 {
        if self.times[i] >= u {
            self.weights.get(i, k) * self.risk[i]
        } else {
            0.0
        }
    }
}

/// For every subject `r`, `Σ_i values_i 1{T_i >= T_r}`.
fn at_risk_sums(times: &[f64], order_desc: &[usize], values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; times.len()];
    let mut acc = 0.0;
    let mut start = 0;
    while start < order_desc.len() {
        let t = times[order_desc[start]];
        let mut end = start;
        while end < order_desc.len() && times[order_desc[end]] == t {
            acc += values[order_desc[end]];
            end += 1;
        }
        for &r in &order_desc[start..end] {
            out[r] = acc;
        }
        start = end;
    }
    out
}

/// The empirical information matrix with its block layout.
#[derive(Debug, Clone)]
pub struct BlockMatrix {
    pub matrix: DMatrix<f64>,
    pub p: usize,
    pub q: usize,
    pub k_strata: usize,
    pub n: usize,
    /// Observation times indexing the rows of each baseline block.
    pub times: Vec<f64>,
    pub tau: f64,
}

/// Row/column groups of a [`BlockMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Beta,
    Gamma,
    /// All baseline blocks together.
    Lambda,
    /// Baseline block of one stratum (0-based).
    LambdaK(usize),
}

impl BlockMatrix {
    pub fn order(&self) -> usize {
        self.p + self.q + self.k_strata * self.n
    }

    pub fn range(&self, part: Part) -> Range<usize> {
        let base = self.p + self.q;
        match part {
            Part::Beta => 0..self.p,
            Part::Gamma => self.p..base,
            Part::Lambda => base..base + self.k_strata * self.n,
            Part::LambdaK(k) => base + k * self.n..base + (k + 1) * self.n,
        }
    }

    /// Copy of the sub-matrix with rows in `rows` and columns in `cols`.
    pub fn block(&self, rows: Part, cols: Part) -> DMatrix<f64> {
        let r = self.range(rows);
        let c = self.range(cols);
        self.matrix.view((r.start, c.start), (r.len(), c.len())).into_owned()
    }
}

/// Settings for the variance computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceOptions {
    /// Largest permitted order `p + q + K n`.
    pub max_order: usize,
    /// Condition estimates above this attach a warning.
    pub condition_warning: f64,
    /// Also solve the full linear system for `Σ_β` as a cross-check.
    pub check_full_system: bool,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self {
            max_order: 5000,
            condition_warning: 1e12,
            check_full_system: true,
        }
    }
}

/// Assembles the information block matrix at `θ̂`.
pub fn build_block_matrix(theta: &Params, data: &Dataset, opts: &VarianceOptions) -> Result<BlockMatrix> {
    theta.check_dims(data)?;
    let (n, p, q, kk) = (data.n(), data.p(), data.q(), data.k_strata());
    let order = p + q + kk * n;
    if order > opts.max_order {
        return Err(Error::TooLarge {
            order,
            cap: opts.max_order,
        });
    }
    let ker = ScoreKernels::new(theta, data)?;
    let obs = data.observations();
    let inv_n = 1.0 / n as f64;
    let times = &ker.times;
    let order_desc = data.order_desc();
    let qw = |i: usize, k: usize| ker.weights.get(i, k);
    let x = |i: usize, r: usize| obs[i].x[r];

    let mut a = DMatrix::<f64>::zeros(order, order);
    let lam0 = p + q;

    for r in 0..p {
        for s in 0..p {
            a[(r, s)] = inv_n * (0..n).map(|i| ker.psi[i].powi(2) * x(i, r) * x(i, s)).sum::<f64>();
        }
        for s in 0..q {
            let v = inv_n * (0..n).map(|i| ker.psi[i] * x(i, r) * ker.s_gamma[(i, s)]).sum::<f64>();
            a[(r, p + s)] = v;
            a[(p + s, r)] = v;
        }
    }
    for r in 0..q {
        for s in 0..q {
            a[(p + r, p + s)] =
                inv_n * (0..n).map(|i| ker.s_gamma[(i, r)] * ker.s_gamma[(i, s)]).sum::<f64>();
        }
    }

    for k in 0..kk {
        let col0 = lam0 + k * n;
        // β/γ rows against Λ_k columns
        for s in 0..n {
            let ds = obs[s].delta() * qw(s, k);
            if ds == 0.0 {
                continue;
            }
            for r in 0..p {
                a[(r, col0 + s)] = 2.0 * inv_n * x(s, r) * ker.psi[s] * ds;
            }
            for r in 0..q {
                a[(p + r, col0 + s)] = 2.0 * inv_n * ker.s_gamma[(s, r)] * ds;
            }
        }
        // Λ_k rows against β/γ columns
        for s in 0..p {
            let vals: Vec<f64> = (0..n)
                .map(|i| x(i, s) * ker.psi[i] * qw(i, k) * ker.risk[i])
                .collect();
            let sums = at_risk_sums(times, order_desc, &vals);
            for r in 0..n {
                a[(col0 + r, s)] = -2.0 * inv_n * sums[r];
            }
        }
        for s in 0..q {
            let vals: Vec<f64> = (0..n)
                .map(|i| ker.s_gamma[(i, s)] * qw(i, k) * ker.risk[i])
                .collect();
            let sums = at_risk_sums(times, order_desc, &vals);
            for r in 0..n {
                a[(col0 + r, p + s)] = -2.0 * inv_n * sums[r];
            }
        }
        // diagonal Λ_k Λ_k block
        let vals: Vec<f64> = (0..n).map(|i| qw(i, k) * ker.phi(0.0, i, k)).collect();
        let sums = at_risk_sums(times, order_desc, &vals);
        for r in 0..n {
            a[(col0 + r, col0 + r)] = inv_n * sums[r];
        }
        // Λ_k Λ_j blocks for j > k
        for j in k + 1..kk {
            let colj = lam0 + j * n;
            let cross: Vec<f64> = (0..n).map(|i| qw(i, k) * ker.risk[i] * qw(i, j)).collect();
            let cross_sums = at_risk_sums(times, order_desc, &cross);
            let sq: Vec<f64> = (0..n).map(|i| cross[i] * ker.risk[i]).collect();
            let sq_sums = at_risk_sums(times, order_desc, &sq);
            let jumps: Vec<f64> = times.iter().map(|&t| theta.baselines[j].jump_at(t)).collect();
            for r in 0..n {
                a[(col0 + r, colj + r)] += 2.0 * inv_n * cross_sums[r];
                for s in 0..n {
                    let mut v = 0.0;
                    if jumps[s] != 0.0 && times[s] > times[r] {
                        // Σ_i φ(T_r,i,k) Q_ij e_i ΔΛ_j(T_s)(1{T_s<=T_i} - 1{T_s<=T_r})
                        v += jumps[s] * sq_sums[s];
                    }
                    if obs[s].status {
                        v -= ker.phi(times[r], s, k) * qw(s, j);
                    }
                    if v != 0.0 {
                        a[(col0 + r, colj + s)] += 2.0 * inv_n * v;
                    }
                }
            }
        }
    }

    Ok(BlockMatrix {
        matrix: a,
        p,
        q,
        k_strata: kk,
        n,
        times: times.clone(),
        tau: data.tau(),
    })
}

/// Summary numbers about the quality of a variance computation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiagnostics {
    /// `max |Σ - Σ'| / max |Σ|` for `Σ_β`.
    pub asymmetry_beta: f64,
    pub asymmetry_gamma: f64,
    /// Largest relative difference between `Σ_β` and the `β` part of the
    /// full-system solution, when computed.
    pub full_system_beta: Option<f64>,
    /// Ratio of extreme pivots of the baseline Schur complement.
    pub lambda_pivot_ratio: f64,
}

/// Variance estimates extracted from the information matrix.
#[derive(Debug, Clone)]
pub struct VarianceResult {
    pub n: usize,
    pub k_strata: usize,
    pub sigma_beta: DMatrix<f64>,
    pub sigma_gamma: DMatrix<f64>,
    /// Standard errors `sqrt(Σ_rr / n)`; `None` where the diagonal is not
    /// positive.
    pub se_beta: Vec<Option<f64>>,
    pub se_gamma: Vec<Option<f64>>,
    pub times: Vec<f64>,
    pub tau: f64,
    pub warnings: Vec<String>,
    pub diagnostics: VarianceDiagnostics,
    lambda_lu: LU<f64, Dyn, Dyn>,
}

impl VarianceResult {
    /// `Σ_Λ` as an explicit `K n × K n` matrix.
    pub fn sigma_lambda(&self) -> DMatrix<f64> {
        let dim = self.k_strata * self.n;
        self.lambda_lu
            .solve(&DMatrix::identity(dim, dim))
            .expect("factorization checked at construction")
    }

    /// `Σ_Λ rhs` without forming `Σ_Λ`.
    pub fn sigma_lambda_apply(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.lambda_lu
            .solve(rhs)
            .expect("factorization checked at construction")
    }
}

fn invert(m: DMatrix<f64>, block: &str) -> Result<DMatrix<f64>> {
    if m.is_empty() {
        return Ok(m);
    }
    let inv = m.lu().try_inverse().ok_or_else(|| Error::Singular { block: block.into() })?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular { block: block.into() });
    }
    Ok(inv)
}

fn factor(m: DMatrix<f64>, block: &str) -> Result<LU<f64, Dyn, Dyn>> {
    let lu = m.lu();
    if !lu.is_invertible() {
        return Err(Error::Singular { block: block.into() });
    }
    Ok(lu)
}

fn solve(lu: &LU<f64, Dyn, Dyn>, rhs: &DMatrix<f64>, block: &str) -> Result<DMatrix<f64>> {
    if rhs.is_empty() {
        return Ok(rhs.clone());
    }
    let x = lu.solve(rhs).ok_or_else(|| Error::Singular { block: block.into() })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular { block: block.into() });
    }
    Ok(x)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn condition_check(m: &DMatrix<f64>, inv: &DMatrix<f64>, block: &str, opts: &VarianceOptions, warnings: &mut Vec<String>) {
    if m.is_empty() {
        return;
    }
    let cond = norm1(m) * norm1(inv);
    if !(cond < opts.condition_warning) {
        warnings.push(format!("block {block} is ill-conditioned (condition estimate {cond:.3e})"));
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

fn standard_errors(sigma: &DMatrix<f64>, n: usize, label: &str, warnings: &mut Vec<String>) -> Vec<Option<f64>> {
    (0..sigma.nrows())
        .map(|r| {
            let v = sigma[(r, r)];
            if v > 0.0 && v.is_finite() {
                Some((v / n as f64).sqrt())
            } else {
                warnings.push(format!("{label}[{}] has non-positive variance {v:e}", r + 1));
                None
            }
        })
        .collect()
}

/// `Σ_β`, `Σ_γ` and (in factored form) `Σ_Λ` from the Schur-complement
/// formulas.
pub fn schur_variances(a: &BlockMatrix, opts: &VarianceOptions) -> Result<VarianceResult> {
    use Part::{Beta as B, Gamma as G, Lambda as L};
    let mut warnings = Vec::new();

    let abb = a.block(B, B);
    let abg = a.block(B, G);
    let abl = a.block(B, L);
    let agb = a.block(G, B);
    let agg = a.block(G, G);
    let agl = a.block(G, L);
    let alb = a.block(L, B);
    let alg = a.block(L, G);
    let all = a.block(L, L);

    let agg_inv = invert(agg.clone(), "A^{γγ}")?;
    condition_check(&agg, &agg_inv, "A^{γγ}", opts, &mut warnings);
    let abb_inv = invert(abb.clone(), "A^{ββ}")?;
    condition_check(&abb, &abb_inv, "A^{ββ}", opts, &mut warnings);

    // Σ_β: eliminate γ, then Λ
    let sigma_beta = {
        let bb = &abb - &abg * &agg_inv * &agb;
        let bl = &abl - &abg * &agg_inv * &agl;
        let lb = &alb - &alg * &agg_inv * &agb;
        let ll = &all - &alg * &agg_inv * &agl;
        let lu = factor(ll, "A^{ΛΛ} - A^{Λγ}(A^{γγ})^{-1}A^{γΛ}")?;
        let inner = bb - &bl * solve(&lu, &lb, "A^{ΛΛ} - A^{Λγ}(A^{γγ})^{-1}A^{γΛ}")?;
        let sigma = invert(inner.clone(), "Σ_β complement")?;
        condition_check(&inner, &sigma, "Σ_β complement", opts, &mut warnings);
        sigma
    };

    // Σ_γ: eliminate β, then Λ
    let sigma_gamma = {
        let gg = &agg - &agb * &abb_inv * &abg;
        let gl = &agl - &agb * &abb_inv * &abl;
        let lg = &alg - &alb * &abb_inv * &abg;
        let ll = &all - &alb * &abb_inv * &abl;
        if gg.is_empty() {
            gg
        } else {
            let lu = factor(ll, "A^{ΛΛ} - A^{Λβ}(A^{ββ})^{-1}A^{βΛ}")?;
            let inner = gg - &gl * solve(&lu, &lg, "A^{ΛΛ} - A^{Λβ}(A^{ββ})^{-1}A^{βΛ}")?;
            let sigma = invert(inner.clone(), "Σ_γ complement")?;
            condition_check(&inner, &sigma, "Σ_γ complement", opts, &mut warnings);
            sigma
        }
    };

    // Σ_Λ: eliminate β, then γ; kept factored
    let lambda_lu = {
        let ll = &all - &alb * &abb_inv * &abl;
        let lg = &alg - &alb * &abb_inv * &abg;
        let gg = &agg - &agb * &abb_inv * &abg;
        let gl = &agl - &agb * &abb_inv * &abl;
        let gg_inv = invert(gg, "A^{γγ} - A^{γβ}(A^{ββ})^{-1}A^{βγ}")?;
        let complement = ll - &lg * gg_inv * gl;
        factor(complement, "Σ_Λ complement")?
    };
    let pivots = lambda_lu.u().diagonal().map(f64::abs);
    let lambda_pivot_ratio = pivots.max() / pivots.min();
    if !(lambda_pivot_ratio < opts.condition_warning) {
        warnings.push(format!(
            "baseline Schur complement is ill-conditioned (pivot ratio {lambda_pivot_ratio:.3e})"
        ));
    }

    let full_system_beta = if opts.check_full_system && a.p > 0 {
        let lu = a.matrix.clone().lu();
        let mut rhs = DMatrix::zeros(a.order(), a.p);
        for r in 0..a.p {
            rhs[(r, r)] = 1.0;
        }
        lu.solve(&rhs).map(|sol| {
            let top = sol.rows(0, a.p).into_owned();
            (&top - &sigma_beta).amax() / sigma_beta.amax().max(f64::MIN_POSITIVE)
        })
    } else {
        None
    };

    let se_beta = standard_errors(&sigma_beta, a.n, "beta", &mut warnings);
    let se_gamma = standard_errors(&sigma_gamma, a.n, "gamma", &mut warnings);
    let diagnostics = VarianceDiagnostics {
        asymmetry_beta: asymmetry(&sigma_beta),
        asymmetry_gamma: asymmetry(&sigma_gamma),
        full_system_beta,
        lambda_pivot_ratio,
    };

    Ok(VarianceResult {
        n: a.n,
        k_strata: a.k_strata,
        sigma_beta,
        sigma_gamma,
        se_beta,
        se_gamma,
        times: a.times.clone(),
        tau: a.tau,
        warnings,
        diagnostics,
        lambda_lu,
    })
}

/// Builds the information matrix at `θ̂` and extracts the variances.
pub fn estimate_variance(theta: &Params, data: &Dataset, opts: &VarianceOptions) -> Result<VarianceResult> {
    let a = build_block_matrix(theta, data, opts)?;
    schur_variances(&a, opts)
}

/// Indicator vector `U` and jump vector `Ξ` for stratum `j` at time `t`,
/// each of length `K n` with zeros outside the `j`-th block.
pub fn lambda_functional(result: &VarianceResult, theta: &Params, j: usize, t: f64) -> (DVector<f64>, DVector<f64>) {
    let n = result.n;
    let mut u = DVector::zeros(result.k_strata * n);
    let mut xi = DVector::zeros(result.k_strata * n);
    for (i, &ti) in result.times.iter().enumerate() {
        if ti <= t {
            u[j * n + i] = 1.0;
            xi[j * n + i] = theta.baselines[j].jump_at(ti);
        }
    }
    (u, xi)
}

/// `v̂²_j(t) = Ξ' Σ_Λ U`, the asymptotic variance of `√n (Λ̂_j(t) - Λ_j(t))`.
pub fn v_squared(result: &VarianceResult, theta: &Params, j: usize, t: f64) -> Result<f64> {
    if j >= result.k_strata {
        return Err(Error::Dimension(format!("stratum {} out of range", j + 1)));
    }
    if !(t > 0.0 && t < result.tau) {
        return Err(Error::Validation(format!(
            "t = {t} must lie strictly between 0 and tau = {}",
            result.tau
        )));
    }
    let (u, xi) = lambda_functional(result, theta, j, t);
    if xi.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    Ok(xi.dot(&result.sigma_lambda_apply(&u)))
}

/// Standard error of `Λ̂_j(t)`, `sqrt(v̂²_j(t) / n)`.
pub fn lambda_se(result: &VarianceResult, theta: &Params, j: usize, t: f64) -> Result<Option<f64>> {
    let v = v_squared(result, theta, j, t)?;
    Ok((v >= 0.0 && v.is_finite()).then(|| (v / result.n as f64).sqrt()))
}
