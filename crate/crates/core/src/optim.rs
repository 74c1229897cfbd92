//! Damped Newton ascent for smooth concave objectives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Settings for [`maximize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iters: usize,
    /// Convergence threshold on the Euclidean norm of the gradient.
    pub tol: f64,
    /// The Newton step must also be shorter than this before the iterate
    /// counts as converged; a vanishing gradient with long steps signals an
    /// objective that keeps increasing towards infinity.
    pub step_tol: f64,
    pub max_halvings: usize,
    /// Iterates are not allowed to leave the ball of this radius.
    pub norm_cap: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            step_tol: 1e-6,
            max_halvings: 30,
            norm_cap: 50.0,
        }
    }
}

/// Value, gradient and Hessian of an objective at one point.
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The iterate was pushed onto the norm cap.
    pub capped: bool,
}

/// Maximizes `objective` from `init` by Newton steps with step halving.
/// Every accepted step is an ascent step, up to the rounding of the
/// objective value.
pub fn maximize<F>(mut objective: F, init: Vec<f64>, opts: &NewtonOptions) -> NewtonOutcome
where
    F: FnMut(&[f64]) -> Evaluation,
{
    let dim = init.len();
    let mut x = init;
    let mut eval = objective(&x);
    let mut iterations = 0;
    let mut capped = false;

    if dim == 0 {
        return NewtonOutcome {
            x,
            value: eval.value,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            capped: false,
        };
    }

    let mut converged = false;
    while iterations < opts.max_iters && !capped {
        let direction = ascent_direction(&eval.hessian, &eval.gradient);
        if eval.gradient.norm() < opts.tol && direction.norm() < opts.step_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Near the optimum the predicted gain is below the resolution of the
        // objective; value comparisons are then noise and the gradient norm
        // decides instead.
        let predicted = eval.gradient.dot(&direction);
        let flat = predicted <= 8.0 * f64::EPSILON * (1.0 + eval.value.abs());
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let mut candidate: Vec<f64> = x
                .iter()
                .zip(direction.iter())
                .map(|(xi, di)| xi + step * di)
                .collect();
            let norm = candidate.iter().map(|v| v * v).sum::<f64>().sqrt();
            let hits_cap = norm > opts.norm_cap;
            if hits_cap {
                let scale = opts.norm_cap / norm;
                candidate.iter_mut().for_each(|v| *v *= scale);
            }
            let next = objective(&candidate);
            let better = if flat {
                next.value.is_finite() && next.gradient.norm() < eval.gradient.norm()
            } else {
                next.value.is_finite() && next.value >= eval.value
            };
            if better {
                x = candidate;
                eval = next;
                capped = hits_cap;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no ascent possible at working precision
            converged = eval.gradient.norm() < opts.tol;
            break;
        }
    }

    NewtonOutcome {
        x,
        value: eval.value,
        grad_norm: eval.gradient.norm(),
        iterations,
        converged: converged && !capped,
        capped,
    }
}

/// Solves `(-H) d = g`, regularizing `-H` when it is not positive definite.
fn ascent_direction(hessian: &DMatrix<f64>, gradient: &DVector<f64>) -> DVector<f64> {
    let neg = -hessian;
    if let Some(chol) = neg.clone().cholesky() {
        return chol.solve(gradient);
    }
    let scale = neg.diagonal().iter().map(|v| v.abs()).fold(1e-12, f64::max);
    let mut ridge = 1e-10 * scale;
    for _ in 0..20 {
        let shifted = &neg + DMatrix::identity(neg.nrows(), neg.ncols()) * ridge;
        if let Some(chol) = shifted.cholesky() {
            return chol.solve(gradient);
        }
        ridge *= 10.0;
    }
    gradient.clone()
}
