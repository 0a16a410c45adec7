//! Gaussian peaks integrated over histogram bins, and their joint least-squares fit.
//!
//! Integrating over each bin (instead of sampling the density at bin centres)
//! keeps the fitted area exact even when a peak is narrower than one bin.

use crate::histogram::Histogram;
use crate::numerics::{fit_least_squares_with, FitError, LsqOptions};
use statrs::function::erf::erf;

pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Fitted peaks whose width falls below this many bins are at the resolution limit.
pub const MIN_FWHM_BINS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPeak {
    /// Integrated weight under the peak (counts, or probability).
    pub area: f64,
    pub center: f64,
    pub fwhm: f64,
}

impl GaussianPeak {
    pub fn sigma(&self) -> f64 {
        self.fwhm / FWHM_PER_SIGMA
    }

    /// Peak height in weight per bin of the given width.
    pub fn amplitude(&self, bin_width: f64) -> f64 {
        self.area * bin_width / (self.sigma() * (2.0 * std::f64::consts::PI).sqrt())
    }

    pub fn from_amplitude(amplitude: f64, center: f64, fwhm: f64, bin_width: f64) -> Self {
        let sigma = fwhm / FWHM_PER_SIGMA;
        GaussianPeak {
            area: amplitude * sigma * (2.0 * std::f64::consts::PI).sqrt() / bin_width,
            center,
            fwhm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakFit {
    pub peaks: Vec<GaussianPeak>,
    /// Norm of the (weighted) residual vector, in the units of the histogram weights.
    pub residual_norm: f64,
    pub converged: bool,
}

/// Adds the bin-integrated contribution of a peak given in bin coordinates
/// (`center` and `sigma` measured in bins, bin `i` spanning `[i, i+1)`).
fn accumulate(area: f64, center: f64, sigma: f64, out: &mut [f64]) {
    let bins = out.len() as f64;
    let lo = (center - 10.0 * sigma).floor().max(0.0);
    let hi = (center + 10.0 * sigma).ceil().min(bins);
    if hi <= lo {
        return;
    }
    let (lo, hi) = (lo as usize, hi as usize);
    let scale = 1.0 / (sigma * std::f64::consts::SQRT_2);
    let mut prev = erf((lo as f64 - center) * scale);
    for (i, slot) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let next = erf((i as f64 + 1.0 - center) * scale);
        *slot += 0.5 * area * (next - prev);
        prev = next;
    }
}

/// Expected histogram content of a sum of peaks.
pub fn model_counts(hist: &Histogram, peaks: &[GaussianPeak]) -> Vec<f64> {
    let mut out = vec![0.0; hist.len()];
    for p in peaks {
        let c = (p.center - hist.lo) / hist.bin_width;
        let s = p.sigma() / hist.bin_width;
        accumulate(p.area, c, s, &mut out);
    }
    out
}

/// Jointly refines `seeds` against `hist` by bounded least squares.
///
/// `sigma`, when given, holds per-bin uncertainties used to weight residuals.
pub fn fit_peaks(
    hist: &Histogram,
    seeds: &[GaussianPeak],
    sigma: Option<&[f64]>,
) -> Result<PeakFit, FitError> {
    let bins = hist.len();
    let scale = hist
        .counts
        .iter()
        .fold(0.0f64, |m, &c| m.max(c.abs()))
        .max(f64::MIN_POSITIVE);
    let total = hist.total().max(f64::MIN_POSITIVE);
    let weights: Vec<f64> = match sigma {
        Some(s) => s.iter().map(|v| 1.0 / v.max(f64::MIN_POSITIVE)).collect(),
        None => vec![1.0 / scale; bins],
    };

    // Parameters per peak in bin units: area / total, centre (bins), fwhm (bins).
    let mut init = Vec::with_capacity(3 * seeds.len());
    let mut lower = Vec::with_capacity(3 * seeds.len());
    let mut upper = Vec::with_capacity(3 * seeds.len());
    for s in seeds {
        let c = ((s.center - hist.lo) / hist.bin_width).clamp(-1.0, bins as f64 + 1.0);
        let w = (s.fwhm / hist.bin_width).clamp(MIN_FWHM_BINS, 4.0 * bins as f64);
        init.extend([(s.area / total).clamp(0.0, 10.0), c, w]);
        lower.extend([0.0, -1.0, MIN_FWHM_BINS]);
        upper.extend([10.0, bins as f64 + 1.0, 4.0 * bins as f64]);
    }

    let residuals = |p: &[f64]| {
        let mut model = vec![0.0; bins];
        for k in p.chunks_exact(3) {
            accumulate(k[0] * total, k[1], k[2] / FWHM_PER_SIGMA, &mut model);
        }
        model
            .iter()
            .zip(&hist.counts)
            .zip(&weights)
            .map(|((m, c), w)| (m - c) * w)
            .collect::<Vec<f64>>()
    };
    let opts = LsqOptions {
        max_iterations: 300,
        ftol: 1e-12,
        xtol: 1e-12,
        gtol: 1e-12,
        ..Default::default()
    };
    let out = fit_least_squares_with(residuals, &init, &lower, &upper, &opts)?;

    let peaks = out
        .params
        .chunks_exact(3)
        .map(|k| GaussianPeak {
            area: k[0] * total,
            center: hist.lo + k[1] * hist.bin_width,
            fwhm: k[2] * hist.bin_width,
        })
        .collect();
    let residual_norm = if sigma.is_some() {
        out.residual_norm
    } else {
        out.residual_norm * scale
    };
    Ok(PeakFit {
        peaks,
        residual_norm,
        converged: out.converged,
    })
}
