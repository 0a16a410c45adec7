//! Bound-constrained Levenberg–Marquardt least squares.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid fit setup: {0}")]
    InvalidSetup(String),
    #[error("residuals became non-finite after {iterations} iterations")]
    NonFinite {
        last_params: Vec<f64>,
        iterations: usize,
    },
}

/// Result of a least-squares search.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    /// Euclidean norm of the residual vector at `params`.
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitOutcome {
    pub fn cost(&self) -> f64 {
        self.residual_norm * self.residual_norm
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LsqOptions {
    pub max_iterations: usize,
    /// Relative reduction of the cost below which the search stops.
    pub ftol: f64,
    /// Relative step size below which the search stops.
    pub xtol: f64,
    /// Infinity norm of the scaled gradient below which the search stops.
    pub gtol: f64,
    pub initial_damping: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            ftol: 1e-15,
            xtol: 1e-15,
            gtol: 1e-15,
            initial_damping: 1e-3,
        }
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn all_finite(r: &[f64]) -> bool {
    r.iter().all(|v| v.is_finite())
}

/// Minimises `Σ residuals(p)²` subject to `lower ≤ p ≤ upper`.
///
/// Uses a forward-difference Jacobian and Marquardt's diagonal scaling; trial
/// points are projected back onto the box. Difference steps assume parameters
/// are scaled to order one.
pub fn fit_least_squares<F>(
    residuals: F,
    initial: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Result<FitOutcome, FitError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    fit_least_squares_with(residuals, initial, lower, upper, &LsqOptions::default())
}

pub fn fit_least_squares_with<F>(
    mut residuals: F,
    initial: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LsqOptions,
) -> Result<FitOutcome, FitError>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = initial.len();
    if lower.len() != n || upper.len() != n {
        return Err(FitError::InvalidSetup(
            "bound lengths differ from parameter count".into(),
        ));
    }
    for i in 0..n {
        if !(lower[i] <= initial[i] && initial[i] <= upper[i]) {
            return Err(FitError::InvalidSetup(format!(
                "parameter {i} = {} outside [{}, {}]",
                initial[i], lower[i], upper[i]
            )));
        }
    }

    let mut p = initial.to_vec();
    let mut r = residuals(&p);
    if !all_finite(&r) {
        return Err(FitError::InvalidSetup(
            "residuals non-finite at initial parameters".into(),
        ));
    }
    let m = r.len();
    let mut cost = sum_sq(&r);
    let mut lambda = opts.initial_damping;
    let sqrt_eps = f64::EPSILON.sqrt();

    let mut iterations = 0;
    let mut converged = false;
    let mut jac = DMatrix::<f64>::zeros(m, n);

    'outer: while iterations < opts.max_iterations {
        iterations += 1;

        // Forward-difference Jacobian; step backwards at an active upper bound.
        for j in 0..n {
            let mut h = sqrt_eps * p[j].abs().max(1.0);
            if p[j] + h > upper[j] {
                h = -h;
            }
            let mut probe = p.clone();
            probe[j] += h;
            let rj = residuals(&probe);
            if !all_finite(&rj) {
                return Err(FitError::NonFinite {
                    last_params: p,
                    iterations,
                });
            }
            for i in 0..m {
                jac[(i, j)] = (rj[i] - r[i]) / h;
            }
        }

        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &rv;

        let gmax = grad
            .iter()
            .enumerate()
            .map(|(j, g)| g.abs() * (p[j].abs().max(1.0)))
            .fold(0.0, f64::max);
        if gmax <= opts.gtol * cost.max(f64::MIN_POSITIVE) || gmax == 0.0 {
            converged = true;
            break;
        }

        // Inner loop: raise damping until a step lowers the cost.
        loop {
            let mut a = jtj.clone();
            for j in 0..n {
                let d = jtj[(j, j)].max(1e-12 * (1.0 + jtj.diagonal().amax()));
                a[(j, j)] += lambda * d;
            }
            let step = match a.clone().cholesky() {
                Some(ch) => ch.solve(&(-&grad)),
                None => match a.lu().solve(&(-&grad)) {
                    Some(s) => s,
                    None => {
                        lambda *= 10.0;
                        if lambda > 1e16 {
                            break 'outer;
                        }
                        continue;
                    }
                },
            };

            let trial: Vec<f64> = (0..n)
                .map(|j| (p[j] + step[j]).clamp(lower[j], upper[j]))
                .collect();
            let actual: f64 = (0..n)
                .map(|j| (trial[j] - p[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            let pnorm: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if actual <= opts.xtol * (pnorm + opts.xtol) {
                converged = true;
                break 'outer;
            }

            let r_trial = residuals(&trial);
            if !all_finite(&r_trial) {
                return Err(FitError::NonFinite {
                    last_params: p,
                    iterations,
                });
            }
            let cost_trial = sum_sq(&r_trial);
            if cost_trial < cost {
                let reduction = (cost - cost_trial) / cost.max(f64::MIN_POSITIVE);
                p = trial;
                r = r_trial;
                cost = cost_trial;
                lambda = (lambda / 3.0).max(1e-12);
                if reduction <= opts.ftol || cost == 0.0 {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                // No descent direction left at machine precision: a minimum.
                converged = true;
                break 'outer;
            }
        }
    }

    Ok(FitOutcome {
        residual_norm: cost.sqrt(),
        params: p,
        converged,
        iterations,
    })
}
