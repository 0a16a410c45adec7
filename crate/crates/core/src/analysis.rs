//! Histogram analysis: Gaussian-mixture level fitting, photon-number
//! probabilities, level noise, linearity, count-rate slopes and DQE.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::PowerSweepResult;
use crate::histogram::Histogram;
use crate::peaks::{fit_peaks, GaussianPeak, PeakFit};
use crate::photonstats::{expected_clicks, fit_efficiency, EfficiencyFit, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPeak {
    /// Counts per bin at the peak maximum.
    pub amplitude: f64,
    pub center: f64,
    /// Level noise `V_N`.
    pub fwhm: f64,
    /// Integrated counts.
    pub area: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    /// Sorted by center.
    pub peaks: Vec<LevelPeak>,
    /// Weighted residual norm of the accepted model.
    pub residual: f64,
    pub low_confidence: bool,
}

impl MixtureFit {
    pub fn centers(&self) -> Vec<f64> {
        self.peaks.iter().map(|p| p.center).collect()
    }

    pub fn peak(&self, label: usize) -> Option<&LevelPeak> {
        self.peaks.iter().find(|p| p.label == label)
    }

    /// Plain-text peak table.
    pub fn report(&self) -> String {
        let mut s = format!(
            "{:>3}  {:>14}  {:>14}  {:>14}  {:>12}\n",
            "n", "center_v", "fwhm_v", "amplitude", "area"
        );
        for p in &self.peaks {
            s.push_str(&format!(
                "{:>3}  {:>14.6e}  {:>14.6e}  {:>14.6e}  {:>12.1}\n",
                p.label, p.center, p.fwhm, p.amplitude, p.area
            ));
        }
        s.push_str(&format!(
            "residual {:.6e}{}\n",
            self.residual,
            if self.low_confidence {
                " (low confidence)"
            } else {
                ""
            }
        ));
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOptions {
    pub max_peaks: usize,
    /// Output level of zero fired elements.
    pub zero_level: f64,
    /// Expected spacing between adjacent levels, when known.
    pub spacing_hint: Option<f64>,
    /// Minimum relative drop in residual for an extra peak to be kept.
    pub min_improvement: f64,
    /// Minimum center separation of neighbors, in units of the wider fwhm.
    pub min_separation: f64,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        MixtureOptions {
            max_peaks: 13,
            zero_level: 0.0,
            spacing_hint: None,
            min_improvement: 0.05,
            min_separation: 0.5,
        }
    }
}

const SMOOTH_SIGMA_BINS: f64 = 1.0;

fn smooth(counts: &[f64]) -> Vec<f64> {
    let r = (3.0 * SMOOTH_SIGMA_BINS).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|k| (-0.5 * (k as f64 / SMOOTH_SIGMA_BINS).powi(2)).exp())
        .collect();
    let n = counts.len() as isize;
    (0..n)
        .map(|i| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (j, w) in (-r..=r).zip(&kernel) {
                let k = i + j;
                if (0..n).contains(&k) {
                    acc += w * counts[k as usize];
                    norm += w;
                }
            }
            acc / norm
        })
        .collect()
}

struct Candidate {
    index: usize,
    height: f64,
    fwhm_bins: f64,
}

/// Prominent local maxima of the smoothed histogram, tallest first.
fn candidates(s: &[f64]) -> Vec<Candidate> {
    let n = s.len();
    let global = s.iter().cloned().fold(0.0, f64::max);
    if global <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        // Collapse flat tops into their midpoint.
        let mut j = i;
        while j + 1 < n && s[j + 1] == s[i] {
            j += 1;
        }
        let left_lower = i == 0 || s[i - 1] < s[i];
        let right_lower = j + 1 == n || s[j + 1] < s[i];
        if left_lower && right_lower && s[i] > 0.0 {
            let idx = (i + j) / 2;
            let h = s[idx];
            // Prominence: drop to the lowest point before reaching higher ground.
            let mut left_min = h;
            for k in (0..i).rev() {
                if s[k] > h {
                    break;
                }
                left_min = left_min.min(s[k]);
            }
            let mut right_min = h;
            for &v in &s[j + 1..] {
                if v > h {
                    break;
                }
                right_min = right_min.min(v);
            }
            let prominence = h - left_min.max(right_min);
            if h == global || prominence > 2.0 * h.max(1.0).sqrt() {
                let half = 0.5 * h;
                let mut lo = idx as f64;
                while lo > 0.0 && s[lo as usize - 1] > half {
                    lo -= 1.0;
                }
                let mut hi = idx as f64;
                while (hi as usize) + 1 < n && s[hi as usize + 1] > half {
                    hi += 1.0;
                }
                let raw = hi - lo + 1.0;
                let smoothing = crate::peaks::FWHM_PER_SIGMA * SMOOTH_SIGMA_BINS;
                let fwhm_bins = (raw * raw - smoothing * smoothing).max(1.0).sqrt();
                out.push(Candidate {
                    index: idx,
                    height: h,
                    fwhm_bins,
                });
            }
        }
        i = j + 1;
    }
    out.sort_by(|a, b| b.height.total_cmp(&a.height));
    out
}

fn seed_peak(hist: &Histogram, c: &Candidate) -> GaussianPeak {
    let fwhm = c.fwhm_bins * hist.bin_width;
    GaussianPeak::from_amplitude(c.height, hist.center(c.index), fwhm, hist.bin_width)
}

fn well_separated(peaks: &[GaussianPeak], min_separation: f64) -> bool {
    let mut sorted: Vec<&GaussianPeak> = peaks.iter().collect();
    sorted.sort_by(|a, b| a.center.total_cmp(&b.center));
    sorted
        .windows(2)
        .all(|w| w[1].center - w[0].center > min_separation * w[0].fwhm.max(w[1].fwhm))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Labels sorted peaks by rank, anchored at the zero level, leaving gaps where
/// a level is missing.
fn label_by_rank(centers: &[f64], zero_level: f64, spacing_hint: Option<f64>) -> Vec<usize> {
    let spacing = median(centers.windows(2).map(|w| w[1] - w[0]).collect()).or(spacing_hint);
    let mut labels = Vec::with_capacity(centers.len());
    for (i, &c) in centers.iter().enumerate() {
        let label = match (i, spacing) {
            (0, Some(s)) if s > 0.0 => ((c - zero_level) / s).round().max(0.0) as usize,
            (0, _) => 0,
            (_, Some(s)) if s > 0.0 => {
                labels[i - 1] + (((c - centers[i - 1]) / s).round() as usize).max(1)
            }
            _ => labels[i - 1] + 1,
        };
        labels.push(label);
    }
    labels
}

fn to_levels(
    hist: &Histogram,
    fit: &PeakFit,
    opts: &MixtureOptions,
    low_confidence: bool,
) -> MixtureFit {
    let mut peaks = fit.peaks.clone();
    peaks.sort_by(|a, b| a.center.total_cmp(&b.center));
    let labels = label_by_rank(
        &peaks.iter().map(|p| p.center).collect::<Vec<_>>(),
        opts.zero_level,
        opts.spacing_hint,
    );
    MixtureFit {
        peaks: peaks
            .iter()
            .zip(labels)
            .map(|(p, label)| LevelPeak {
                amplitude: p.amplitude(hist.bin_width),
                center: p.center,
                fwhm: p.fwhm,
                area: p.area,
                label,
            })
            .collect(),
        residual: fit.residual_norm,
        low_confidence,
    }
}

/// Gaussian-mixture fit with up to `max_peaks` peaks and default options.
pub fn fit_gaussian_mixture(hist: &Histogram, max_peaks: usize) -> MixtureFit {
    fit_gaussian_mixture_with(
        hist,
        &MixtureOptions {
            max_peaks,
            ..Default::default()
        },
    )
}

/// Model selection over prominent maxima of the smoothed histogram: all
/// candidates are fitted jointly, then peaks are dropped (smallest first)
/// unless they lower the residual by more than `min_improvement` and stay
/// separated from their neighbors.
pub fn fit_gaussian_mixture_with(hist: &Histogram, opts: &MixtureOptions) -> MixtureFit {
    let smoothed = smooth(&hist.counts);
    let sigma: Vec<f64> = smoothed.iter().map(|s| s.max(1.0).sqrt()).collect();
    let mut cands = candidates(&smoothed);
    cands.truncate(opts.max_peaks.max(1));

    let flagged_single = || {
        let idx = hist
            .counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let peak = GaussianPeak {
            area: hist.total(),
            center: hist.center(idx),
            fwhm: hist.bin_width,
        };
        let fit = PeakFit {
            peaks: vec![peak],
            residual_norm: f64::NAN,
            converged: false,
        };
        to_levels(hist, &fit, opts, true)
    };
    if cands.is_empty() {
        return flagged_single();
    }
    let mut seeds: Vec<GaussianPeak> = cands.iter().map(|c| seed_peak(hist, c)).collect();
    let Ok(mut best) = fit_peaks(hist, &seeds, Some(&sigma)) else {
        return flagged_single();
    };

    loop {
        if best.peaks.len() == 1 {
            break;
        }
        // Weakest first; a crowded pair loses its smaller member outright.
        let mut order: Vec<usize> = (0..best.peaks.len()).collect();
        order.sort_by(|&a, &b| best.peaks[a].area.total_cmp(&best.peaks[b].area));
        let crowded = !well_separated(&best.peaks, opts.min_separation);
        let mut removed = false;
        for &k in &order {
            let mut fewer = seeds.clone();
            fewer.remove(k);
            let Ok(fit) = fit_peaks(hist, &fewer, Some(&sigma)) else {
                continue;
            };
            if crowded || best.residual_norm >= (1.0 - opts.min_improvement) * fit.residual_norm {
                seeds = fewer;
                best = fit;
                removed = true;
                break;
            }
        }
        if !removed {
            break;
        }
    }
    let low_confidence = !best.converged && best.peaks.len() == 1;
    to_levels(hist, &best, opts, low_confidence)
}

/// Normalized peak areas indexed by label, `n = 0..=n_max`.
pub fn peak_probabilities(fit: &MixtureFit, n_max: usize) -> Vec<f64> {
    let mut p = vec![0.0; n_max + 1];
    for peak in &fit.peaks {
        if peak.label <= n_max {
            // Gaussian area is amplitude·fwhm up to a constant.
            p[peak.label] += peak.amplitude * peak.fwhm;
        }
    }
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter_mut().for_each(|x| *x /= total);
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub alpha: f64,
    pub r_squared: f64,
}

/// `H = A·n^α` by ordinary least squares on `(ln n, ln H)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::Domain(
            "power-law fit needs at least two points".into(),
        ));
    }
    if points.iter().any(|&(n, h)| !(n > 0.0) || !(h > 0.0)) {
        return Err(AnalysisError::Domain(
            "power-law fit needs n > 0 and H > 0".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r_squared) = ols(&xs, &ys)?;
    Ok(PowerLawFit {
        a: intercept.exp(),
        alpha: slope,
        r_squared,
    })
}

fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64), AnalysisError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(AnalysisError::Domain("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        1.0
    };
    Ok((slope, my - slope * mx, r_squared))
}

/// Mixture fits for every power of a sweep, relabelled against one ladder of
/// level centers built from the lowest power upwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAnalysis {
    pub powers: Vec<f64>,
    pub fits: Vec<MixtureFit>,
    /// Center of level `n`, where observed.
    pub ladder: Vec<Option<f64>>,
}

impl SweepAnalysis {
    pub fn distinct_levels(&self) -> usize {
        self.ladder.iter().filter(|l| l.is_some()).count()
    }

    pub fn probabilities(&self, n_max: usize) -> Vec<Vec<f64>> {
        self.fits
            .iter()
            .map(|f| peak_probabilities(f, n_max))
            .collect()
    }

    fn spacing(&self) -> Option<f64> {
        let known: Vec<(usize, f64)> = self
            .ladder
            .iter()
            .enumerate()
            .filter_map(|(n, c)| c.map(|c| (n, c)))
            .collect();
        median(
            known
                .windows(2)
                .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0) as f64)
                .collect(),
        )
    }

    /// Threshold separating `≥ n` from `< n`: midway between levels `n − 1` and `n`.
    pub fn threshold(&self, n: usize) -> Option<f64> {
        if n == 0 {
            return None;
        }
        let below = self.ladder.get(n - 1).copied().flatten();
        let above = self.ladder.get(n).copied().flatten();
        match (below, above) {
            (Some(b), Some(a)) => Some(0.5 * (a + b)),
            (Some(b), None) => self.spacing().map(|s| b + 0.5 * s),
            (None, Some(a)) => self.spacing().map(|s| a - 0.5 * s),
            (None, None) => None,
        }
    }
}

pub fn analyze_sweep(sweep: &PowerSweepResult, opts: &MixtureOptions) -> SweepAnalysis {
    let opts = MixtureOptions {
        spacing_hint: opts.spacing_hint.or(Some(sweep.level_spacing)),
        ..opts.clone()
    };
    let mut fits: Vec<MixtureFit> = sweep
        .histograms
        .par_iter()
        .map(|h| fit_gaussian_mixture_with(h, &opts))
        .collect();

    let mut order: Vec<usize> = (0..sweep.powers.len()).collect();
    order.sort_by(|&a, &b| sweep.powers[a].total_cmp(&sweep.powers[b]));
    let mut analysis = SweepAnalysis {
        powers: sweep.powers.clone(),
        fits: Vec::new(),
        ladder: Vec::new(),
    };
    for &i in &order {
        let fit = &mut fits[i];
        if !analysis.ladder.is_empty() {
            let spacing = analysis.spacing().or(opts.spacing_hint);
            let mut prev: Option<usize> = None;
            for p in fit.peaks.iter_mut() {
                let (n_ref, c_ref) = analysis
                    .ladder
                    .iter()
                    .enumerate()
                    .filter_map(|(n, c)| c.map(|c| (n, c)))
                    .min_by(|a, b| (a.1 - p.center).abs().total_cmp(&(b.1 - p.center).abs()))
                    .expect("ladder non-empty");
                let steps = spacing
                    .filter(|s| *s > 0.0)
                    .map(|s| ((p.center - c_ref) / s).round())
                    .unwrap_or(0.0);
                let mut label = (n_ref as f64 + steps).max(0.0) as usize;
                if let Some(prev) = prev {
                    label = label.max(prev + 1);
                }
                p.label = label;
                prev = Some(label);
            }
        }
        for p in &fit.peaks {
            if analysis.ladder.len() <= p.label {
                analysis.ladder.resize(p.label + 1, None);
            }
            analysis.ladder[p.label].get_or_insert(p.center);
        }
    }
    analysis.fits = fits;
    analysis
}

/// Efficiency fitted to the extracted `P(n)` at each power.
pub fn fit_sweep_efficiency(
    analysis: &SweepAnalysis,
    mu_bars: &[f64],
    n_elements: usize,
) -> Result<Vec<EfficiencyFit>, AnalysisError> {
    analysis
        .probabilities(n_elements)
        .iter()
        .zip(mu_bars)
        .map(|(p, &mu)| fit_efficiency(n_elements, mu, p).map_err(AnalysisError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRateCurve {
    pub threshold_label: usize,
    pub threshold_v: f64,
    pub powers: Vec<f64>,
    pub rates: Vec<f64>,
    pub low_power_slope: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRateOptions {
    pub rep_rate: f64,
    /// Constant dark count rate subtracted from every rate.
    pub dcr: f64,
    /// Also subtract, per threshold, the rate seen at zero power (noise
    /// crossings of the zero level).
    pub subtract_dark: bool,
    pub n_elements: usize,
    /// Fitted efficiency per power, defining the sub-saturation region.
    pub etas: Vec<f64>,
    pub thresholds: Vec<usize>,
    /// Points with fewer counts above threshold are left out of the slope fit.
    pub min_counts: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRateOutcome {
    pub curves: Vec<CountRateCurve>,
    pub notices: Vec<String>,
}

/// Count rate above each `≥ n` threshold versus power, and its log-log slope
/// over powers where fewer than one element is expected to click.
pub fn count_rate_analysis(
    sweep: &PowerSweepResult,
    analysis: &SweepAnalysis,
    opts: &CountRateOptions,
) -> Result<CountRateOutcome, AnalysisError> {
    if !(opts.rep_rate > 0.0) {
        return Err(AnalysisError::Domain("rep_rate must be > 0".into()));
    }
    if opts.etas.len() != sweep.powers.len() {
        return Err(AnalysisError::Domain(format!(
            "{} efficiencies for {} powers",
            opts.etas.len(),
            sweep.powers.len()
        )));
    }
    let mut out = CountRateOutcome {
        curves: Vec::new(),
        notices: Vec::new(),
    };
    if opts.subtract_dark && !sweep.powers.contains(&0.0) {
        out.notices
            .push("no zero-power point: dark counts not subtracted".into());
    }
    for &n in &opts.thresholds {
        let Some(threshold) = analysis.threshold(n) else {
            out.notices.push(format!(
                "threshold n={n}: levels not observed, curve omitted"
            ));
            continue;
        };
        let raw: Vec<f64> = sweep
            .histograms
            .iter()
            .map(|h| h.total_above(threshold))
            .collect();
        let dark: Vec<f64> = sweep
            .powers
            .iter()
            .zip(&raw)
            .filter(|(p, _)| **p == 0.0)
            .map(|(_, c)| *c)
            .collect();
        let dark = if opts.subtract_dark && !dark.is_empty() {
            dark.iter().sum::<f64>() / dark.len() as f64
        } else {
            0.0
        };
        let counts: Vec<f64> = raw.iter().map(|c| (c - dark).max(0.0)).collect();
        if counts.iter().all(|&c| c == 0.0) {
            out.notices.push(format!(
                "threshold n={n}: no counts above {threshold:.4e} V at any power, curve omitted"
            ));
            continue;
        }
        let shots = sweep.shots_per_power as f64;
        let rates: Vec<f64> = counts
            .iter()
            .map(|c| (opts.rep_rate * c / shots - opts.dcr).max(0.0))
            .collect();
        let (xs, ys): (Vec<f64>, Vec<f64>) = sweep
            .powers
            .iter()
            .zip(&sweep.mu_bars)
            .zip(&opts.etas)
            .zip(counts.iter().zip(&rates))
            .filter(|(((p, &mu), &eta), (&c, &r))| {
                **p > 0.0
                    && r > 0.0
                    && c >= opts.min_counts
                    && expected_clicks(opts.n_elements, eta, mu) < 1.0
            })
            .map(|(((p, _), _), (_, r))| (p.ln(), r.ln()))
            .unzip();
        let low_power_slope = if xs.len() >= 2 {
            ols(&xs, &ys).ok().map(|(s, _, _)| s)
        } else {
            None
        };
        if low_power_slope.is_none() {
            out.notices.push(format!(
                "threshold n={n}: fewer than two usable low-power points, no slope"
            ));
        }
        out.curves.push(CountRateCurve {
            threshold_label: n,
            threshold_v: threshold,
            powers: sweep.powers.clone(),
            rates,
            low_power_slope,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dqe {
    pub value: f64,
    /// The ratio exceeded 1 and was clamped.
    pub clamped: bool,
}

/// Counts above the zero level divided by photons incident on the active area.
pub fn dqe(count_rate: f64, incident_photon_rate: f64) -> Result<Dqe, AnalysisError> {
    if !(incident_photon_rate > 0.0) {
        return Err(AnalysisError::Domain(
            "incident photon rate must be > 0".into(),
        ));
    }
    if !(count_rate >= 0.0) {
        return Err(AnalysisError::Domain("count rate must be >= 0".into()));
    }
    let r = count_rate / incident_photon_rate;
    Ok(Dqe {
        value: r.min(1.0),
        clamped: r > 1.0,
    })
}

/// One measured point of DQE against bias current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasPoint {
    pub i_bias: f64,
    pub dqe: f64,
}

/// DQE as a function of bias current, supplied as a table and interpolated
/// linearly between points.
#[derive(Debug, Clone, PartialEq)]
pub struct DqeTable {
    points: Vec<BiasPoint>,
}

impl DqeTable {
    /// Points must have strictly increasing, positive bias and DQE in [0, 1].
    pub fn new(points: Vec<BiasPoint>) -> Result<Self, AnalysisError> {
        if points.is_empty() {
            return Err(AnalysisError::Domain("DQE table is empty".into()));
        }
        for p in &points {
            if !(p.i_bias > 0.0 && p.i_bias.is_finite()) {
                return Err(AnalysisError::Domain(format!(
                    "bias must be positive (got {})",
                    p.i_bias
                )));
            }
            if !(0.0..=1.0).contains(&p.dqe) {
                return Err(AnalysisError::Domain(format!(
                    "DQE must lie in [0, 1] (got {})",
                    p.dqe
                )));
            }
        }
        if points.windows(2).any(|w| w[1].i_bias <= w[0].i_bias) {
            return Err(AnalysisError::Domain(
                "bias values must be strictly increasing".into(),
            ));
        }
        Ok(DqeTable { points })
    }

    pub fn points(&self) -> &[BiasPoint] {
        &self.points
    }

    /// `None` outside the tabulated bias range.
    pub fn at(&self, i_bias: f64) -> Option<f64> {
        let first = self.points.first()?;
        let last = self.points.last()?;
        if !(first.i_bias..=last.i_bias).contains(&i_bias) {
            return None;
        }
        let k = self.points.partition_point(|p| p.i_bias < i_bias);
        if self.points[k].i_bias == i_bias {
            return Some(self.points[k].dqe);
        }
        let (a, b) = (self.points[k - 1], self.points[k]);
        let f = (i_bias - a.i_bias) / (b.i_bias - a.i_bias);
        Some(a.dqe + f * (b.dqe - a.dqe))
    }

    /// Tabulated point with the highest DQE.
    pub fn peak(&self) -> BiasPoint {
        *self
            .points
            .iter()
            .max_by(|a, b| a.dqe.total_cmp(&b.dqe))
            .expect("table is non-empty")
    }
}

/// `V_N(n, power)`; cells are absent where the level was not fitted or holds
/// fewer than `min_area` counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTable {
    pub powers: Vec<f64>,
    pub v_n: Vec<Vec<Option<f64>>>,
}

impl NoiseTable {
    /// `V_N` against power at fixed `n`.
    pub fn vs_power(&self, n: usize) -> Vec<Option<f64>> {
        self.v_n
            .iter()
            .map(|row| row.get(n).copied().flatten())
            .collect()
    }

    /// `V_N` against `n` at power index `i`.
    pub fn vs_n(&self, i: usize) -> &[Option<f64>] {
        &self.v_n[i]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "power_w,n,v_n")?;
        for (p, row) in self.powers.iter().zip(&self.v_n) {
            for (n, v) in row.iter().enumerate() {
                match v {
                    Some(v) => writeln!(w, "{p},{n},{v}")?,
                    None => writeln!(w, "{p},{n},")?,
                }
            }
        }
        Ok(())
    }
}

pub fn noise_curves(
    fits: &[MixtureFit],
    powers: &[f64],
    n_max: usize,
    min_area: f64,
) -> NoiseTable {
    let v_n = fits
        .iter()
        .map(|f| {
            (0..=n_max)
                .map(|n| {
                    f.peak(n)
                        .filter(|p| p.area >= min_area && p.fwhm > 0.0)
                        .map(|p| p.fwhm)
                })
                .collect()
        })
        .collect();
    NoiseTable {
        powers: powers.to_vec(),
        v_n,
    }
}

pub fn write_peaks_csv<W: Write>(analysis: &SweepAnalysis, mut w: W) -> io::Result<()> {
    writeln!(w, "power_w,n,amplitude,center_v,fwhm_v,area")?;
    for (p, f) in analysis.powers.iter().zip(&analysis.fits) {
        for k in &f.peaks {
            writeln!(
                w,
                "{p},{},{},{},{},{}",
                k.label, k.amplitude, k.center, k.fwhm, k.area
            )?;
        }
    }
    Ok(())
}

pub fn write_probabilities_csv<W: Write>(
    powers: &[f64],
    probs: &[Vec<f64>],
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "power_w,n,probability")?;
    for (p, row) in powers.iter().zip(probs) {
        for (n, v) in row.iter().enumerate() {
            writeln!(w, "{p},{n},{v}")?;
        }
    }
    Ok(())
}

pub fn write_count_rate_csv<W: Write>(curves: &[CountRateCurve], mut w: W) -> io::Result<()> {
    writeln!(w, "threshold_n,threshold_v,power_w,rate_hz")?;
    for c in curves {
        for (p, r) in c.powers.iter().zip(&c.rates) {
            writeln!(w, "{},{},{p},{r}", c.threshold_label, c.threshold_v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peaks::model_counts;
    use crate::photonstats::click_distribution;
    use proptest::prelude::*;

    fn synthetic(peaks: &[GaussianPeak], lo: f64, hi: f64, bins: usize) -> Histogram {
        let mut h = Histogram::empty(lo, hi, bins);
        h.counts = model_counts(&h, peaks);
        h
    }

    #[test]
    fn two_peak_round_trip() {
        let truth = [
            GaussianPeak {
                area: 10_000.0,
                center: 0.0,
                fwhm: 0.1,
            },
            GaussianPeak {
                area: 6_000.0,
                center: 1.0,
                fwhm: 0.1,
            },
        ];
        let h = synthetic(&truth, -0.5, 1.5, 400);
        let fit = fit_gaussian_mixture(&h, 5);
        assert_eq!(fit.peaks.len(), 2);
        assert!((fit.peaks[0].center - 0.0).abs() < 0.01);
        assert!((fit.peaks[1].center - 1.0).abs() < 0.01);
        assert_eq!(
            fit.peaks.iter().map(|p| p.label).collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert!(!fit.low_confidence);
        let p = peak_probabilities(&fit, 1);
        assert!((p[0] - 0.625).abs() < 1e-3);
    }

    #[test]
    fn single_bin_is_one_point_mass() {
        let mut h = Histogram::empty(0.0, 1.0, 100);
        h.counts[37] = 500.0;
        let fit = fit_gaussian_mixture(&h, 5);
        assert_eq!(fit.peaks.len(), 1);
        assert!((fit.peaks[0].center - h.center(37)).abs() < h.bin_width);
        assert!((fit.peaks[0].area - 500.0).abs() < 1.0);
        assert!(fit.peaks[0].fwhm < h.bin_width);
    }

    #[test]
    fn empty_histogram_is_flagged() {
        let h = Histogram::empty(0.0, 1.0, 50);
        let fit = fit_gaussian_mixture(&h, 5);
        assert_eq!(fit.peaks.len(), 1);
        assert!(fit.low_confidence);
    }

    #[test]
    fn labels_skip_to_offset_levels() {
        // Levels 3, 4, 5 of a ladder with unit spacing.
        let truth: Vec<GaussianPeak> = (3..=5)
            .map(|n| GaussianPeak {
                area: 5000.0,
                center: n as f64,
                fwhm: 0.15,
            })
            .collect();
        let h = synthetic(&truth, -0.5, 7.0, 300);
        let fit = fit_gaussian_mixture(&h, 13);
        assert_eq!(
            fit.peaks.iter().map(|p| p.label).collect::<Vec<_>>(),
            vec![3, 4, 5]
        );
        let p = peak_probabilities(&fit, 6);
        assert_eq!(p[0], 0.0);
        assert!((p[4] - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn probabilities_of_simple_fits() {
        let one = MixtureFit {
            peaks: vec![LevelPeak {
                amplitude: 3.0,
                center: 1.0,
                fwhm: 0.2,
                area: 10.0,
                label: 2,
            }],
            residual: 0.0,
            low_confidence: false,
        };
        assert_eq!(peak_probabilities(&one, 3), vec![0.0, 0.0, 1.0, 0.0]);
        let two = MixtureFit {
            peaks: vec![
                LevelPeak {
                    amplitude: 2.0,
                    center: 0.0,
                    fwhm: 0.1,
                    area: 1.0,
                    label: 0,
                },
                LevelPeak {
                    amplitude: 1.0,
                    center: 1.0,
                    fwhm: 0.2,
                    area: 1.0,
                    label: 1,
                },
            ],
            residual: 0.0,
            low_confidence: false,
        };
        assert_eq!(peak_probabilities(&two, 1), vec![0.5, 0.5]);
    }

    #[test]
    fn power_law_round_trips() {
        let exact: Vec<(f64, f64)> = (1..=12).map(|n| (n as f64, n as f64)).collect();
        let f = fit_power_law(&exact).unwrap();
        assert!((f.alpha - 1.0).abs() < 1e-12 && (f.a - 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = (1..=12)
            .map(|n| (n as f64, 2.0 * (n as f64).powf(0.9)))
            .collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.alpha - 0.9).abs() < 1e-9 && (f.a - 2.0).abs() < 1e-9);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn dqe_cases() {
        let d = dqe(1700.0, 1e6).unwrap();
        assert!((d.value - 0.0017).abs() < 1e-15 && !d.clamped);
        assert_eq!(dqe(0.0, 1e6).unwrap().value, 0.0);
        assert_eq!(
            dqe(1e6, 1e6).unwrap(),
            Dqe {
                value: 1.0,
                clamped: false
            }
        );
        assert!(dqe(2e6, 1e6).unwrap().clamped);
        assert!(dqe(1.0, 0.0).is_err());
    }

    fn bias(i_bias: f64, dqe: f64) -> BiasPoint {
        BiasPoint { i_bias, dqe }
    }

    #[test]
    fn dqe_table_interpolates_inside_its_range() {
        let t = DqeTable::new(vec![
            bias(12.0e-6, 0.0005),
            bias(13.0e-6, 0.0015),
            bias(13.2e-6, 0.0017),
        ])
        .unwrap();
        assert_eq!(t.at(13.0e-6), Some(0.0015));
        assert!((t.at(12.5e-6).unwrap() - 0.001).abs() < 1e-15);
        assert_eq!(t.at(11.0e-6), None);
        assert_eq!(t.at(14.0e-6), None);
        assert_eq!(t.peak(), bias(13.2e-6, 0.0017));
    }

    #[test]
    fn dqe_table_rejects_bad_points() {
        assert!(DqeTable::new(vec![]).is_err());
        assert!(DqeTable::new(vec![bias(1e-6, 0.1), bias(1e-6, 0.2)]).is_err());
        assert!(DqeTable::new(vec![bias(1e-6, 1.5)]).is_err());
        assert!(DqeTable::new(vec![bias(-1e-6, 0.1)]).is_err());
        assert_eq!(
            DqeTable::new(vec![bias(1e-6, 0.1)]).unwrap().at(1e-6),
            Some(0.1)
        );
    }

    #[test]
    fn noise_table_marks_missing_cells() {
        let fit = MixtureFit {
            peaks: vec![
                LevelPeak {
                    amplitude: 1.0,
                    center: 0.0,
                    fwhm: 0.1,
                    area: 1000.0,
                    label: 0,
                },
                LevelPeak {
                    amplitude: 1.0,
                    center: 2.0,
                    fwhm: 0.3,
                    area: 5.0,
                    label: 2,
                },
            ],
            residual: 0.0,
            low_confidence: false,
        };
        let t = noise_curves(&[fit], &[1e-9], 3, 50.0);
        assert_eq!(t.vs_n(0), &[Some(0.1), None, None, None]);
        assert_eq!(t.vs_power(0), vec![Some(0.1)]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("0.000000001,1,\n"));
    }

    /// Noise-free sweep on unit level spacing: `shots·P(n)` counts in bin `n`,
    /// plus `dark` counts parked on level 1 at every power.
    fn ideal_sweep(
        eta: f64,
        mus: &[f64],
        shots: f64,
        dark: f64,
    ) -> (PowerSweepResult, SweepAnalysis) {
        let hists = mus
            .iter()
            .map(|&mu| {
                let mut h = Histogram::empty(-0.5, 12.5, 13);
                h.counts = click_distribution(12, eta, mu)
                    .unwrap()
                    .probs
                    .iter()
                    .map(|p| p * shots)
                    .collect();
                h.counts[1] += dark;
                h
            })
            .collect();
        let sweep = PowerSweepResult {
            powers: mus.iter().map(|m| m * 1e-9).collect(),
            mu_bars: mus.to_vec(),
            histograms: hists,
            fired_counts: Vec::new(),
            shots_per_power: shots as usize,
            seed: 0,
            level_spacing: 1.0,
            superposition_error: 0.0,
        };
        let analysis = SweepAnalysis {
            powers: sweep.powers.clone(),
            fits: Vec::new(),
            ladder: (0..=12).map(|n| Some(n as f64)).collect(),
        };
        (sweep, analysis)
    }

    fn rate_options(
        etas: Vec<f64>,
        thresholds: Vec<usize>,
        subtract_dark: bool,
    ) -> CountRateOptions {
        CountRateOptions {
            rep_rate: 1e6,
            dcr: 0.0,
            subtract_dark,
            n_elements: 12,
            etas,
            thresholds,
            min_counts: 10.0,
        }
    }

    #[test]
    fn count_rate_matches_tail_probability_and_ols() {
        let mus: Vec<f64> = (0..10).map(|i| 0.02 * 1.8f64.powi(i)).collect();
        let (sweep, analysis) = ideal_sweep(0.5, &mus, 1e6, 0.0);
        let out = count_rate_analysis(
            &sweep,
            &analysis,
            &rate_options(vec![0.5; mus.len()], vec![1, 2], false),
        )
        .unwrap();
        assert_eq!(out.curves.len(), 2);
        let c1 = &out.curves[0];
        assert_eq!(c1.threshold_v, 0.5);
        for (r, &mu) in c1.rates.iter().zip(&mus) {
            let p0 = click_distribution(12, 0.5, mu).unwrap().probs[0];
            assert!((r / (1e6 * (1.0 - p0)) - 1.0).abs() < 1e-9);
        }
        // Independent slope: least squares over the points with < 1 expected click.
        let pts: Vec<(f64, f64)> = mus
            .iter()
            .zip(&c1.rates)
            .filter(|(&mu, _)| expected_clicks(12, 0.5, mu) < 1.0)
            .map(|(&mu, &r)| ((mu * 1e-9).ln(), r.ln()))
            .collect();
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
        let sxy: f64 = pts.iter().map(|p| (p.0 - sx / n) * (p.1 - sy / n)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - sx / n).powi(2)).sum();
        assert!(pts.len() < mus.len());
        assert!((c1.low_power_slope.unwrap() - sxy / sxx).abs() < 1e-12);
        assert!(out.curves[1].low_power_slope.unwrap() > c1.low_power_slope.unwrap() + 0.8);
    }

    #[test]
    fn dark_counts_are_removed_using_the_zero_power_point() {
        let mut mus = vec![0.0];
        mus.extend((0..8).map(|i| 0.01 * 1.8f64.powi(i)));
        let (clean, analysis) = ideal_sweep(0.5, &mus, 1e6, 0.0);
        let (noisy, _) = ideal_sweep(0.5, &mus, 1e6, 3000.0);
        let etas = vec![0.5; mus.len()];
        let a = count_rate_analysis(
            &clean,
            &analysis,
            &rate_options(etas.clone(), vec![1], false),
        )
        .unwrap();
        let raw = count_rate_analysis(
            &noisy,
            &analysis,
            &rate_options(etas.clone(), vec![1], false),
        )
        .unwrap();
        let fixed =
            count_rate_analysis(&noisy, &analysis, &rate_options(etas, vec![1], true)).unwrap();
        let (s_clean, s_raw, s_fixed) = (
            a.curves[0].low_power_slope.unwrap(),
            raw.curves[0].low_power_slope.unwrap(),
            fixed.curves[0].low_power_slope.unwrap(),
        );
        assert!(s_raw < s_clean - 0.1, "{s_raw} vs {s_clean}");
        assert!((s_fixed - s_clean).abs() < 1e-9);
        assert!(fixed.notices.is_empty());
    }

    #[test]
    fn count_rate_rejects_mismatched_inputs() {
        let (sweep, analysis) = ideal_sweep(0.5, &[0.1, 0.2], 1e4, 0.0);
        assert!(
            count_rate_analysis(&sweep, &analysis, &rate_options(vec![0.5], vec![1], false))
                .is_err()
        );
        let mut opts = rate_options(vec![0.5; 2], vec![1], true);
        opts.rep_rate = 0.0;
        assert!(count_rate_analysis(&sweep, &analysis, &opts).is_err());
        opts.rep_rate = 1.0;
        let out = count_rate_analysis(&sweep, &analysis, &opts).unwrap();
        assert_eq!(out.notices.len(), 1);
    }

    proptest! {
        #[test]
        fn power_law_scale_covariance(c in 0.01f64..100.0, alpha in 0.5f64..1.5) {
            let pts: Vec<(f64, f64)> = (1..=12).map(|n| (n as f64, 3.0 * (n as f64).powf(alpha) * (1.0 + 0.01 * (n as f64).sin()))).collect();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(n, h)| (n, c * h)).collect();
            let a = fit_power_law(&pts).unwrap();
            let b = fit_power_law(&scaled).unwrap();
            prop_assert!((b.alpha - a.alpha).abs() < 1e-9);
            prop_assert!((b.a / a.a / c - 1.0).abs() < 1e-9);
        }

        #[test]
        fn probabilities_form_a_distribution(areas in proptest::collection::vec(0.0f64..100.0, 1..8)) {
            let fit = MixtureFit {
                peaks: areas.iter().enumerate().map(|(i, &a)| LevelPeak { amplitude: a, center: i as f64, fwhm: 0.1 + 0.01 * i as f64, area: a, label: i }).collect(),
                residual: 0.0,
                low_confidence: false,
            };
            let p = peak_probabilities(&fit, areas.len());
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            if areas.iter().any(|&a| a > 0.0) {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
