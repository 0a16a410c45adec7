//! Combinatorial excess-noise model.
//!
//! Elements fire with slightly different single-photon pulse heights. An
//! `n`-photon event fires some `n`-subset of the `N` elements, so the output
//! level is a subset sum; its spread over the `C(N, n)` subsets is the excess
//! noise of level `n`. It vanishes at `n = 0` and `n = N` and is largest in
//! the middle.

use std::io::{self, Write};

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::histogram::Histogram;
use crate::peaks::{fit_peaks, GaussianPeak, FWHM_PER_SIGMA};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseModelError {
    #[error("invalid height profile: {0}")]
    InvalidProfile(String),
    #[error("photon number {n} exceeds element count {n_elements}")]
    PhotonNumber { n: usize, n_elements: usize },
}

/// Gaussian profile the element heights are drawn from (normalized units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightProfile {
    pub center: f64,
    pub fwhm: f64,
}

impl Default for HeightProfile {
    fn default() -> Self {
        HeightProfile {
            center: 1.0,
            fwhm: 0.1,
        }
    }
}

impl HeightProfile {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.center > 0.0 && self.center.is_finite()) {
            v.push(format!("heights.center must be > 0 (got {})", self.center));
        }
        if !(self.fwhm >= 0.0 && self.fwhm.is_finite()) {
            v.push(format!("heights.fwhm must be >= 0 (got {})", self.fwhm));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementHeights {
    pub heights: Vec<f64>,
    pub profile: HeightProfile,
}

impl ElementHeights {
    /// All elements at the same height.
    pub fn uniform(n_elements: usize, center: f64) -> Self {
        ElementHeights {
            heights: vec![center; n_elements],
            profile: HeightProfile { center, fwhm: 0.0 },
        }
    }

    pub fn len(&self) -> usize {
        self.heights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heights.is_empty()
    }

    /// Population standard deviation of the heights.
    pub fn population_std(&self) -> f64 {
        let n = self.heights.len() as f64;
        let mean = self.heights.iter().sum::<f64>() / n;
        (self.heights.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Deterministic quantile heights `center + σ·Φ⁻¹((k + ½)/N)`, mirrored so the
/// set is exactly symmetric about `center`.
pub fn element_heights(
    profile: HeightProfile,
    n_elements: usize,
) -> Result<ElementHeights, NoiseModelError> {
    let v = profile.violations();
    if !v.is_empty() {
        return Err(NoiseModelError::InvalidProfile(v.join("; ")));
    }
    if n_elements == 0 {
        return Err(NoiseModelError::InvalidProfile(
            "N must be at least 1".into(),
        ));
    }
    let sigma = profile.fwhm / FWHM_PER_SIGMA;
    let std_normal = Normal::standard();
    let offsets: Vec<f64> = (0..n_elements)
        .map(|k| std_normal.inverse_cdf((k as f64 + 0.5) / n_elements as f64))
        .collect();
    let heights = (0..n_elements)
        .map(|k| {
            let mirror = n_elements - 1 - k;
            if k == mirror {
                return profile.center;
            }
            let z = 0.5 * (offsets[k] - offsets[mirror]);
            profile.center + sigma * z
        })
        .collect();
    Ok(ElementHeights { heights, profile })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightDistribution {
    pub n: usize,
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
    /// `(center, fwhm)` of the single Gaussian fitted to the binned distribution.
    pub gauss_fit: (f64, f64),
    /// The Gaussian fit failed and `fwhm` is `2.3548·std` instead.
    pub fit_fallback: bool,
}

impl HeightDistribution {
    pub fn mean(&self) -> f64 {
        self.support
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| s * w)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.support
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (s - m).powi(2))
            .sum()
    }
}

const FIT_BINS: usize = 64;

fn gaussian_fit(support: &[f64], weights: &[f64], mean: f64, std: f64) -> ((f64, f64), bool) {
    let fallback = ((mean, FWHM_PER_SIGMA * std), true);
    let lo = support.iter().cloned().fold(f64::INFINITY, f64::min) - 2.0 * std;
    let hi = support.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 2.0 * std;
    if !(hi > lo) {
        return fallback;
    }
    let hist = Histogram::from_weighted(support, weights, lo, hi, FIT_BINS);
    let seed = GaussianPeak {
        area: 1.0,
        center: mean,
        fwhm: FWHM_PER_SIGMA * std,
    };
    match fit_peaks(&hist, &[seed], None) {
        Ok(fit) if fit.converged && fit.peaks[0].fwhm.is_finite() => {
            ((fit.peaks[0].center, fit.peaks[0].fwhm), false)
        }
        _ => fallback,
    }
}

/// Distribution of summed heights over all `n`-subsets of elements, each
/// subset equally likely.
pub fn subset_sum_distribution(
    heights: &ElementHeights,
    n: usize,
) -> Result<HeightDistribution, NoiseModelError> {
    let big_n = heights.len();
    if n > big_n {
        return Err(NoiseModelError::PhotonNumber {
            n,
            n_elements: big_n,
        });
    }
    let support: Vec<f64> = heights
        .heights
        .iter()
        .combinations(n)
        .map(|c| c.into_iter().sum())
        .collect();
    let w = 1.0 / support.len() as f64;
    let weights = vec![w; support.len()];
    let mut dist = HeightDistribution {
        n,
        support,
        weights,
        gauss_fit: (0.0, 0.0),
        fit_fallback: false,
    };
    let mean = dist.mean();
    let std = dist.variance().sqrt();
    // Relative to the level itself, spreads below this are rounding noise.
    if std <= 1e-12 * mean.abs().max(heights.profile.center) {
        dist.gauss_fit = (mean, 0.0);
        return Ok(dist);
    }
    let (fit, fallback) = gaussian_fit(&dist.support, &dist.weights, mean, std);
    dist.gauss_fit = fit;
    dist.fit_fallback = fallback;
    Ok(dist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub n: usize,
    pub fwhm: f64,
    pub fallback: bool,
}

/// Fitted FWHM of the `n`-element level for `n = 0..=N`.
pub fn excess_noise_curve(heights: &ElementHeights) -> Vec<NoisePoint> {
    (0..=heights.len())
        .map(|n| {
            let d = subset_sum_distribution(heights, n).expect("n <= N by construction");
            NoisePoint {
                n,
                fwhm: d.gauss_fit.1,
                fallback: d.fit_fallback,
            }
        })
        .collect()
}

pub fn write_noise_csv<W: Write>(curve: &[NoisePoint], mut w: W) -> io::Result<()> {
    writeln!(w, "n,fwhm")?;
    for p in curve {
        writeln!(w, "{},{}", p.n, p.fwhm)?;
    }
    Ok(())
}
