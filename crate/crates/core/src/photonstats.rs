//! Click statistics of an `N`-element spatially multiplexed detector under
//! coherent (Poissonian) illumination.
//!
//! With `N` equally illuminated elements of efficiency `η`, each element
//! independently receives a Poisson number of detectable photons with mean
//! `η·μ̄/N`, so it stays dark with probability `q = exp(−η·μ̄/N)` and the
//! number of clicking elements is binomial:
//!
//! ```text
//! P(n) = C(N, n) · (1 − q)^n · q^(N − n)
//! ```
//!
//! Expanding `(1 − q)^n` gives the alternating-sum form obtained by summing
//! the photon-number series analytically:
//!
//! ```text
//! P(n) = C(N, n) · Σ_{j=0..n} (−1)^j · C(n, j) · exp(−η·μ̄·(N − n + j)/N)
//! ```
//!
//! Both are provided; debug builds assert they agree.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{binomial, golden_section, substream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("parameter out of range: {0}")]
    Domain(String),
}

/// Probability of `n = 0..=N` clicking elements, with the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickDistribution {
    pub n_elements: usize,
    pub eta: f64,
    pub mu_bar: f64,
    pub probs: Vec<f64>,
}

impl ClickDistribution {
    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "n,probability")?;
        for (n, p) in self.probs.iter().enumerate() {
            writeln!(w, "{n},{p}")?;
        }
        Ok(())
    }
}

fn check_params(n_elements: usize, eta: f64, mu_bar: f64) -> Result<(), StatsError> {
    if n_elements == 0 {
        return Err(StatsError::Domain("N must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(StatsError::Domain(format!(
            "eta must lie in [0, 1] (got {eta})"
        )));
    }
    if !(mu_bar >= 0.0 && mu_bar.is_finite()) {
        return Err(StatsError::Domain(format!(
            "mu_bar must be finite and >= 0 (got {mu_bar})"
        )));
    }
    Ok(())
}

/// `P(n)` for `n = 0..=N` in closed binomial form.
pub fn click_distribution(
    n_elements: usize,
    eta: f64,
    mu_bar: f64,
) -> Result<ClickDistribution, StatsError> {
    check_params(n_elements, eta, mu_bar)?;
    let x = eta * mu_bar;
    let q = (-x / n_elements as f64).exp();
    // 1 − q without cancellation for small x.
    let one_minus_q = -(-x / n_elements as f64).exp_m1();
    let big_n = n_elements as u64;
    let probs: Vec<f64> = (0..=big_n)
        .map(|n| binomial(big_n, n) * one_minus_q.powi(n as i32) * q.powi((big_n - n) as i32))
        .collect();
    debug_assert!(
        {
            let alt = click_distribution_alternating(n_elements, eta, mu_bar)?;
            alt.iter().zip(&probs).all(|(a, b)| (a - b).abs() <= 1e-9)
        },
        "binomial and alternating-sum click probabilities disagree"
    );
    Ok(ClickDistribution {
        n_elements,
        eta,
        mu_bar,
        probs,
    })
}

/// `P(n)` for `n = 0..=N` from the alternating sum over `j`.
pub fn click_distribution_alternating(
    n_elements: usize,
    eta: f64,
    mu_bar: f64,
) -> Result<Vec<f64>, StatsError> {
    check_params(n_elements, eta, mu_bar)?;
    let big_n = n_elements as u64;
    let x = eta * mu_bar;
    Ok((0..=big_n)
        .map(|n| {
            let sum: f64 = (0..=n)
                .map(|j| {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    sign * binomial(n, j) * (-x * (big_n - n + j) as f64 / big_n as f64).exp()
                })
                .sum();
            binomial(big_n, n) * sum
        })
        .collect())
}

/// Mean number of clicking elements, `N·(1 − exp(−η·μ̄/N))`.
pub fn expected_clicks(n_elements: usize, eta: f64, mu_bar: f64) -> f64 {
    let n = n_elements as f64;
    -n * (-eta * mu_bar / n).exp_m1()
}

/// Per-element photon routing and detection probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementEfficiencies {
    /// Probability that an incident photon lands on element `k` (sums to at most 1).
    pub routing: Vec<f64>,
    /// Probability that a photon routed to element `k` is detected.
    pub detection: Vec<f64>,
}

impl ElementEfficiencies {
    pub fn new(routing: Vec<f64>, detection: Vec<f64>) -> Result<Self, StatsError> {
        if routing.is_empty() || routing.len() != detection.len() {
            return Err(StatsError::Domain(
                "routing and detection must be non-empty and of equal length".into(),
            ));
        }
        if routing
            .iter()
            .chain(&detection)
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(StatsError::Domain(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        if routing.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(StatsError::Domain(
                "routing weights sum to more than 1".into(),
            ));
        }
        Ok(ElementEfficiencies { routing, detection })
    }

    /// Every photon reaches one of `n` elements with equal probability.
    pub fn uniform(n: usize, eta: f64) -> Result<Self, StatsError> {
        Self::new(vec![1.0 / n as f64; n], vec![eta; n])
    }

    pub fn len(&self) -> usize {
        self.routing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routing.is_empty()
    }

    /// Probability that an incident photon is detected by element `k`, `q_k·η_k`.
    pub fn click_weights(&self) -> Vec<f64> {
        self.routing
            .iter()
            .zip(&self.detection)
            .map(|(q, e)| q * e)
            .collect()
    }

    /// Overall probability that an incident photon produces a click.
    pub fn total_efficiency(&self) -> f64 {
        self.click_weights().iter().sum()
    }
}

/// Draws the set of clicking elements for one pulse of mean `mu_bar` photons.
///
/// `cumulative[k]` is the running sum of click weights; the returned mask is
/// reused between calls.
fn draw_clicks<R: Rng + ?Sized>(
    rng: &mut R,
    poisson: Option<&Poisson<f64>>,
    cumulative: &[f64],
    clicked: &mut [bool],
) -> usize {
    clicked.fill(false);
    let Some(poisson) = poisson else { return 0 };
    let photons = poisson.sample(rng) as u64;
    let total = *cumulative.last().unwrap_or(&0.0);
    let mut count = 0;
    for _ in 0..photons {
        let u: f64 = rng.random();
        if u >= total {
            continue;
        }
        let k = cumulative.partition_point(|&c| c <= u);
        if !clicked[k] {
            clicked[k] = true;
            count += 1;
        }
    }
    count
}

fn poisson_for(mu_bar: f64) -> Option<Poisson<f64>> {
    if mu_bar > 0.0 {
        Poisson::new(mu_bar).ok()
    } else {
        None
    }
}

fn cumulative_weights(eff: &ElementEfficiencies) -> Vec<f64> {
    eff.click_weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

const MC_CHUNK: usize = 1 << 16;

/// Monte Carlo estimate of the click distribution: Poisson photon number,
/// per-photon routing to an element (or loss), per-photon detection.
pub fn mc_click_distribution(
    eff: &ElementEfficiencies,
    mu_bar: f64,
    trials: usize,
    seed: u64,
) -> Result<ClickDistribution, StatsError> {
    if trials == 0 {
        return Err(StatsError::Domain("trials must be at least 1".into()));
    }
    if !(mu_bar >= 0.0 && mu_bar.is_finite()) {
        return Err(StatsError::Domain(format!(
            "mu_bar must be finite and >= 0 (got {mu_bar})"
        )));
    }
    let n = eff.len();
    let cumulative = cumulative_weights(eff);
    let poisson = poisson_for(mu_bar);
    let chunks = trials.div_ceil(MC_CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, c as u64);
            let mut clicked = vec![false; n];
            let mut hist = vec![0u64; n + 1];
            let len = MC_CHUNK.min(trials - c * MC_CHUNK);
            for _ in 0..len {
                hist[draw_clicks(&mut rng, poisson.as_ref(), &cumulative, &mut clicked)] += 1;
            }
            hist
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(vec![0u64; n + 1], |mut acc, h| {
            acc.iter_mut().zip(h).for_each(|(a, b)| *a += b);
            acc
        });
    Ok(ClickDistribution {
        n_elements: n,
        eta: eff.total_efficiency(),
        mu_bar,
        probs: counts.iter().map(|&c| c as f64 / trials as f64).collect(),
    })
}

/// Exact click distribution for independent, non-identical elements: element
/// `k` clicks with probability `1 − exp(−μ̄·q_k·η_k)` (Poisson–binomial).
pub fn exact_click_distribution(eff: &ElementEfficiencies, mu_bar: f64) -> ClickDistribution {
    let mut probs = vec![0.0; eff.len() + 1];
    probs[0] = 1.0;
    for (k, w) in eff.click_weights().into_iter().enumerate() {
        let p = -(-mu_bar * w).exp_m1();
        for n in (0..=k + 1).rev() {
            let stay = probs[n] * (1.0 - p);
            let from_below = if n > 0 { probs[n - 1] * p } else { 0.0 };
            probs[n] = stay + from_below;
        }
    }
    ClickDistribution {
        n_elements: eff.len(),
        eta: eff.total_efficiency(),
        mu_bar,
        probs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyFit {
    pub eta: f64,
    /// Σ (P_η(n) − measured(n))² at the optimum.
    pub residual: f64,
    /// The data carry no information about η (no clicks, no light), or only a
    /// lower bound on it (every trial saturated at `n = N`).
    pub degenerate: bool,
}

fn squared_misfit(n_elements: usize, x: f64, measured: &[f64]) -> f64 {
    let q = (-x / n_elements as f64).exp();
    let one_minus_q = -(-x / n_elements as f64).exp_m1();
    let big_n = n_elements as u64;
    (0..=big_n)
        .map(|n| {
            let p = binomial(big_n, n) * one_minus_q.powi(n as i32) * q.powi((big_n - n) as i32);
            (p - measured[n as usize]).powi(2)
        })
        .sum()
}

/// Single-parameter least-squares fit of `η` to a measured click distribution.
///
/// The model depends on `η` only through `x = η·μ̄`, so the search runs over
/// `x ∈ [0, μ̄]`: a logarithmic scan followed by golden-section refinement.
pub fn fit_efficiency(
    n_elements: usize,
    mu_bar: f64,
    measured: &[f64],
) -> Result<EfficiencyFit, StatsError> {
    check_params(n_elements, 0.0, mu_bar)?;
    if measured.len() != n_elements + 1 {
        return Err(StatsError::Domain(format!(
            "measured distribution has {} entries, expected {}",
            measured.len(),
            n_elements + 1
        )));
    }
    if measured.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(StatsError::Domain(
            "measured probabilities must be finite and non-negative".into(),
        ));
    }
    let at_zero = squared_misfit(n_elements, 0.0, measured);
    let clicks: f64 = measured[1..].iter().sum();
    if mu_bar == 0.0 || clicks <= 1e-15 {
        return Ok(EfficiencyFit {
            eta: 0.0,
            residual: at_zero,
            degenerate: true,
        });
    }

    const GRID: usize = 400;
    let x_min = mu_bar * 1e-10;
    let grid: Vec<f64> = std::iter::once(0.0)
        .chain((0..GRID).map(|i| x_min * (mu_bar / x_min).powf(i as f64 / (GRID - 1) as f64)))
        .collect();
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(i, &x)| (i, squared_misfit(n_elements, x, measured)))
        .fold(
            (0, f64::INFINITY),
            |acc, (i, s)| if s < acc.1 { (i, s) } else { acc },
        );
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(grid.len() - 1)];
    let (x, residual) = golden_section(
        |x| squared_misfit(n_elements, x, measured),
        lo,
        hi,
        1e-13 * hi.max(1e-300),
    );
    let (x, residual) = if residual <= at_zero {
        (x, residual)
    } else {
        (0.0, at_zero)
    };
    // All mass on n = N only bounds η from below.
    let saturated = measured[n_elements] >= clicks * (1.0 - 1e-12);
    Ok(EfficiencyFit {
        eta: (x / mu_bar).clamp(0.0, 1.0),
        residual,
        degenerate: saturated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vacuum_and_blind_detector() {
        for (eta, mu) in [(0.5, 0.0), (0.0, 10.0)] {
            let d = click_distribution(12, eta, mu).unwrap();
            assert_eq!(d.probs[0], 1.0);
            assert!(d.probs[1..].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn domain_errors() {
        assert!(click_distribution(0, 0.5, 1.0).is_err());
        assert!(click_distribution(4, 1.5, 1.0).is_err());
        assert!(click_distribution(4, 0.5, -1.0).is_err());
        assert!(
            mc_click_distribution(&ElementEfficiencies::uniform(4, 0.5).unwrap(), 1.0, 0, 1)
                .is_err()
        );
    }

    #[test]
    fn single_element_reduces_to_one_minus_exp() {
        for (eta, mu) in [(0.1, 0.1), (0.5, 4.0), (1.0, 50.0)] {
            let d = click_distribution(1, eta, mu).unwrap();
            assert!((d.probs[1] - (1.0 - (-eta * mu).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn expected_clicks_matches_first_moment() {
        let d = click_distribution(12, 0.4, 3.0).unwrap();
        assert!((expected_clicks(12, 0.4, 3.0) - d.mean()).abs() < 1e-10);
        assert_eq!(expected_clicks(12, 0.4, 0.0), 0.0);
        // Large-N limit approaches η·μ̄.
        assert!((expected_clicks(1000, 1.0, 1.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mc_edge_cases() {
        let eff = ElementEfficiencies::uniform(12, 0.5).unwrap();
        let d = mc_click_distribution(&eff, 0.0, 1000, 3).unwrap();
        assert_eq!(d.probs[0], 1.0);

        let dead = ElementEfficiencies::new(vec![0.5, 0.5], vec![1.0, 0.0]).unwrap();
        let d = mc_click_distribution(&dead, 20.0, 10_000, 3).unwrap();
        assert_eq!(d.probs[2], 0.0);
    }

    #[test]
    fn mc_is_reproducible() {
        let eff = ElementEfficiencies::uniform(12, 0.3).unwrap();
        let a = mc_click_distribution(&eff, 5.0, 200_000, 11).unwrap();
        let b = mc_click_distribution(&eff, 5.0, 200_000, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_nonuniform_reduces_to_binomial() {
        let eff = ElementEfficiencies::uniform(12, 0.7).unwrap();
        let a = exact_click_distribution(&eff, 6.0);
        let b = click_distribution(12, 0.7, 6.0).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn fit_recovers_eta() {
        let d = click_distribution(12, 0.3, 5.0).unwrap();
        let fit = fit_efficiency(12, 5.0, &d.probs).unwrap();
        assert!((fit.eta - 0.3).abs() < 1e-3, "eta {}", fit.eta);
        assert!(!fit.degenerate);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn fit_handles_tiny_efficiency() {
        let mu = 26_000.0;
        let d = click_distribution(12, 3.8e-5, mu).unwrap();
        let fit = fit_efficiency(12, mu, &d.probs).unwrap();
        assert!((fit.eta / 3.8e-5 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fit_point_mass_at_zero_is_degenerate() {
        let mut m = vec![0.0; 13];
        m[0] = 1.0;
        let fit = fit_efficiency(12, 5.0, &m).unwrap();
        assert_eq!(fit.eta, 0.0);
        assert!(fit.degenerate);
        assert!(fit_efficiency(12, 5.0, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn fit_point_mass_at_n_is_degenerate() {
        let mut m = vec![0.0; 13];
        m[12] = 1.0;
        let fit = fit_efficiency(12, 500.0, &m).unwrap();
        assert!(fit.degenerate);
    }

    #[test]
    fn one_strong_element_gives_falling_then_flat_eta() {
        // One element ten times more efficient than the other eleven.
        let mut det = [0.1; 12];
        det[0] = 1.0;
        // Σ w_k = 0.15; saturation scales with μ̄·w, hence the μ̄ grid.
        let scale = 0.15 * 12.0 / det.iter().sum::<f64>();
        let eff = ElementEfficiencies::new(
            vec![1.0 / 12.0; 12],
            det.iter().map(|d| d * scale).collect(),
        )
        .unwrap();
        let etas: Vec<f64> = [1.0, 5.0, 25.0, 120.0, 350.0]
            .iter()
            .map(|&m| {
                let mu = m * 0.5 / 0.15;
                fit_efficiency(12, mu, &exact_click_distribution(&eff, mu).probs)
                    .unwrap()
                    .eta
            })
            .collect();
        assert!(etas.windows(2).all(|w| w[1] < w[0]), "{etas:?}");
        let floor = 0.1 * scale;
        assert!(
            (etas[4] / floor - 1.0).abs() < 0.02,
            "{etas:?} floor {floor}"
        );
    }

    proptest! {
        #[test]
        fn normalised_and_forms_agree(n in 1usize..=12, eta in 0.0f64..=1.0, mu in 0.0f64..60.0) {
            let d = click_distribution(n, eta, mu).unwrap();
            prop_assert_eq!(d.probs.len(), n + 1);
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(d.probs.iter().all(|&p| p >= 0.0));
            let alt = click_distribution_alternating(n, eta, mu).unwrap();
            for (a, b) in alt.iter().zip(&d.probs) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn expected_clicks_increasing(eta in 0.01f64..0.99, mu in 0.01f64..50.0) {
            let base = expected_clicks(12, eta, mu);
            prop_assert!(expected_clicks(12, eta + 0.01, mu) > base);
            prop_assert!(expected_clicks(12, eta, mu * 1.01) > base);
        }
    }
}
