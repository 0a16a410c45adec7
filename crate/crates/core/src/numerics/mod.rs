//! Shared numerical kernels: fixed-step ODE integration, bounded least squares,
//! first-order digital filters and seeded random streams.

pub mod filter;
pub mod lsq;
pub mod ode;
pub mod rng;

pub use filter::{apply_filter, Filter, FilterError, FilterSpec};
pub use lsq::{fit_least_squares, fit_least_squares_with, FitError, FitOutcome, LsqOptions};
pub use ode::{integrate_ode, rk4_step, OdeError, Rk4Scratch, Trajectory};
pub use rng::{stream_id, substream, StreamRng};

/// Golden-section minimisation of a unimodal `f` on `[lo, hi]`.
///
/// Returns `(argmin, min)`; stops once the bracket is narrower than `tol`.
pub fn golden_section<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// `ln C(n, k)` via `lgamma`.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Exact binomial coefficient for small arguments.
pub fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
