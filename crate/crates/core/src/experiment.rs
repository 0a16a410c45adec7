//! Virtual measurement chain: beam → element coupling → Poisson photons →
//! firings → summed circuit pulses → amplifier noise and filters → sampled
//! pulse heights → histograms.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::circuit::{self, CircuitError, SndConfig, DEFAULT_DT, DEFAULT_T_END};
use crate::histogram::Histogram;
use crate::noisemodel::ElementHeights;
use crate::numerics::{stream_id, substream, Filter, FilterError, FilterSpec};
use crate::peaks::FWHM_PER_SIGMA;
use crate::photonstats::{ElementEfficiencies, StatsError};

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Reference temperature for noise figures.
pub const T_REFERENCE: f64 = 290.0;

pub const DEFAULT_SHOTS: usize = 20_000;
pub const DEFAULT_BINS: usize = 512;
const SHOT_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn default_fill_factor() -> f64 {
    0.4
}

/// Centered Gaussian spot over a square array of `N` parallel stripes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamProfile {
    /// Intensity FWHM per axis, meters.
    pub fwhm: f64,
    /// Side of the square active area, meters.
    pub array_side: f64,
    /// Fraction of each stripe covered by nanowire.
    #[serde(default = "default_fill_factor")]
    pub fill_factor: f64,
    /// Replaces the computed aperture fraction when set.
    #[serde(default)]
    pub coupling_override: Option<f64>,
}

impl Default for BeamProfile {
    fn default() -> Self {
        BeamProfile {
            fwhm: 11.8e-6,
            array_side: 12e-6,
            fill_factor: 0.4,
            coupling_override: None,
        }
    }
}

impl BeamProfile {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.fwhm >= 0.0 && self.fwhm.is_finite()) {
            v.push(format!("beam.fwhm must be >= 0 (got {})", self.fwhm));
        }
        if !(self.array_side >= 0.0 && self.array_side.is_finite()) {
            v.push(format!(
                "beam.array_side must be >= 0 (got {})",
                self.array_side
            ));
        }
        if !(0.0..=1.0).contains(&self.fill_factor) {
            v.push(format!(
                "beam.fill_factor must lie in [0, 1] (got {})",
                self.fill_factor
            ));
        }
        if let Some(c) = self.coupling_override {
            if !(0.0..=1.0).contains(&c) {
                v.push(format!(
                    "beam.coupling_override must lie in [0, 1] (got {c})"
                ));
            }
        }
        v
    }

    fn sigma(&self) -> f64 {
        self.fwhm / FWHM_PER_SIGMA
    }

    /// Stripe `k` spans `[x0, x1)` across the array, measured from its center.
    pub fn stripes(&self, n: usize) -> Vec<(f64, f64)> {
        let pitch = self.array_side / n as f64;
        (0..n)
            .map(|k| {
                (
                    -0.5 * self.array_side + k as f64 * pitch,
                    -0.5 * self.array_side + (k + 1) as f64 * pitch,
                )
            })
            .collect()
    }
}

/// Fraction of Gaussian power in `[a, b]` along one axis.
fn axis_fraction(sigma: f64, a: f64, b: f64) -> f64 {
    if sigma == 0.0 {
        return if a <= 0.0 && 0.0 < b { 1.0 } else { 0.0 };
    }
    let s = sigma * std::f64::consts::SQRT_2;
    0.5 * (erf(b / s) - erf(a / s))
}

/// Fraction of the spot power falling inside the array square.
pub fn aperture_fraction(beam: &BeamProfile) -> f64 {
    let h = 0.5 * beam.array_side;
    if beam.array_side == 0.0 {
        return 0.0;
    }
    axis_fraction(beam.sigma(), -h, h).powi(2)
}

/// Probability that an incident photon is routed to each of `n` stripes and
/// meets nanowire there.
pub fn element_coupling(beam: &BeamProfile, n: usize) -> Vec<f64> {
    let sigma = beam.sigma();
    let h = 0.5 * beam.array_side;
    let across = axis_fraction(sigma, -h, h);
    let scale = match beam.coupling_override {
        Some(c) => {
            let a = aperture_fraction(beam);
            if a > 0.0 {
                c / a
            } else {
                0.0
            }
        }
        None => 1.0,
    };
    beam.stripes(n)
        .into_iter()
        .map(|(x0, x1)| beam.fill_factor * scale * axis_fraction(sigma, x0, x1) * across)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaserConfig {
    pub wavelength: f64,
    pub pulse_width: f64,
    pub rep_rate: f64,
    pub power: f64,
}

impl Default for LaserConfig {
    fn default() -> Self {
        LaserConfig {
            wavelength: 1.31e-6,
            pulse_width: 100e-12,
            rep_rate: 1e6,
            power: 1e-9,
        }
    }
}

impl LaserConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("wavelength", self.wavelength),
            ("pulse_width", self.pulse_width),
            ("rep_rate", self.rep_rate),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("laser.{name} must be > 0 (got {x})"));
            }
        }
        if !(self.power >= 0.0 && self.power.is_finite()) {
            v.push(format!("laser.power must be >= 0 (got {})", self.power));
        }
        v
    }

    pub fn with_power(&self, power: f64) -> Self {
        LaserConfig {
            power,
            ..self.clone()
        }
    }

    pub fn photon_energy(&self) -> f64 {
        PLANCK * SPEED_OF_LIGHT / self.wavelength
    }
}

/// Mean photon number per pulse at the fiber tip.
pub fn photons_per_pulse(laser: &LaserConfig) -> f64 {
    laser.power / laser.rep_rate / laser.photon_energy()
}

fn default_gain_db() -> f64 {
    51.0
}

fn default_noise_figure_db() -> f64 {
    1.1
}

fn default_filters() -> Vec<FilterSpec> {
    vec![
        FilterSpec::BandPass {
            low_hz: 0.5e6,
            high_hz: 500e6,
        },
        FilterSpec::LowPass { cutoff_hz: 80e6 },
    ]
}

fn default_sample_rate() -> f64 {
    10e9
}

fn default_jitter_fwhm() -> f64 {
    89e-12
}

fn default_pretrigger() -> f64 {
    20e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutChain {
    #[serde(default = "default_gain_db")]
    pub gain_db: f64,
    /// Input-referred white voltage noise, volts rms. Derived from
    /// `noise_figure_db` over the sampling bandwidth when absent.
    #[serde(default)]
    pub noise_rms: Option<f64>,
    #[serde(default = "default_noise_figure_db")]
    pub noise_figure_db: f64,
    #[serde(default = "default_filters")]
    pub filters: Vec<FilterSpec>,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "default_jitter_fwhm")]
    pub jitter_fwhm: f64,
    /// Length of noise history run through the filters before each sample.
    #[serde(default = "default_pretrigger")]
    pub pretrigger: f64,
}

impl Default for ReadoutChain {
    fn default() -> Self {
        ReadoutChain {
            gain_db: default_gain_db(),
            noise_rms: None,
            noise_figure_db: default_noise_figure_db(),
            filters: default_filters(),
            sample_rate: default_sample_rate(),
            jitter_fwhm: default_jitter_fwhm(),
            pretrigger: default_pretrigger(),
        }
    }
}

impl ReadoutChain {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.gain_db.is_finite() {
            v.push("readout.gain_db must be finite".into());
        }
        if let Some(n) = self.noise_rms {
            if !(n >= 0.0 && n.is_finite()) {
                v.push(format!("readout.noise_rms must be >= 0 (got {n})"));
            }
        }
        if !(self.noise_figure_db >= 0.0 && self.noise_figure_db.is_finite()) {
            v.push(format!(
                "readout.noise_figure_db must be >= 0 (got {})",
                self.noise_figure_db
            ));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            v.push(format!(
                "readout.sample_rate must be > 0 (got {})",
                self.sample_rate
            ));
        }
        for f in &self.filters {
            if !(self.sample_rate > 2.0 * f.highest_cutoff()) {
                v.push(format!(
                    "readout.sample_rate {} must exceed twice the filter cutoff {}",
                    self.sample_rate,
                    f.highest_cutoff()
                ));
            }
        }
        if !(self.jitter_fwhm >= 0.0 && self.jitter_fwhm.is_finite()) {
            v.push(format!(
                "readout.jitter_fwhm must be >= 0 (got {})",
                self.jitter_fwhm
            ));
        }
        if !(self.pretrigger >= 0.0 && self.pretrigger.is_finite()) {
            v.push(format!(
                "readout.pretrigger must be >= 0 (got {})",
                self.pretrigger
            ));
        }
        v
    }

    pub fn gain(&self) -> f64 {
        10f64.powf(self.gain_db / 20.0)
    }

    /// Input-referred noise: explicit value, else excess thermal noise of the
    /// amplifier over the sampled bandwidth `sample_rate / 2`.
    pub fn resolved_noise_rms(&self, r_load: f64) -> f64 {
        self.noise_rms.unwrap_or_else(|| {
            let excess = 10f64.powf(self.noise_figure_db / 10.0) - 1.0;
            (4.0 * BOLTZMANN * T_REFERENCE * excess * r_load * 0.5 * self.sample_rate).sqrt()
        })
    }
}

/// Relative spread added to every firing's height: `σ = base + per_photon·μ̄`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightJitter {
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub per_photon: f64,
}

impl HeightJitter {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.base >= 0.0 && self.base.is_finite()) {
            v.push(format!(
                "height_jitter.base must be >= 0 (got {})",
                self.base
            ));
        }
        if !(self.per_photon >= 0.0 && self.per_photon.is_finite()) {
            v.push(format!(
                "height_jitter.per_photon must be >= 0 (got {})",
                self.per_photon
            ));
        }
        v
    }

    pub fn sigma(&self, mu_bar: f64) -> f64 {
        self.base + self.per_photon * mu_bar
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shot {
    /// Sampled amplifier output, volts.
    pub sample: f64,
    pub fired: usize,
}

/// Precomputed measurement chain for one detector configuration.
#[derive(Debug, Clone)]
pub struct VirtualExperiment {
    pub efficiencies: ElementEfficiencies,
    height_factors: Vec<f64>,
    jitter: HeightJitter,
    filters: Vec<FilterSpec>,
    sample_rate: f64,
    gain: f64,
    noise_rms: f64,
    timing_sigma: f64,
    /// Filtered single-fire pulse on the sample grid, input-referred volts,
    /// preceded by `pretrigger_samples` zeros.
    template: Vec<f64>,
    pretrigger_samples: usize,
    /// Index of the filtered template maximum.
    peak_index: usize,
    superposition_error: f64,
}

/// Largest relative difference between the simulated `n`-fire peak and `n`
/// times the single-fire peak, over `n = 1..=N`.
pub fn superposition_error(cfg: &SndConfig, t_end: f64, dt: f64) -> Result<f64, CircuitError> {
    let h = circuit::pulse_heights(cfg, t_end, dt)?;
    Ok(h.iter()
        .enumerate()
        .map(|(i, &hn)| ((i + 1) as f64 * h[0] - hn).abs() / hn)
        .fold(0.0, f64::max))
}

fn resample(trace: &[f64], dt: f64, rate: f64) -> Vec<f64> {
    let duration = (trace.len() - 1) as f64 * dt;
    let count = (duration * rate).floor() as usize + 1;
    (0..count)
        .map(|i| {
            let x = i as f64 / rate / dt;
            let j = (x.floor() as usize).min(trace.len() - 2);
            let f = x - j as f64;
            trace[j] * (1.0 - f) + trace[j + 1] * f
        })
        .collect()
}

impl VirtualExperiment {
    pub fn new(
        cfg: &SndConfig,
        efficiencies: ElementEfficiencies,
        readout: &ReadoutChain,
        heights: &ElementHeights,
        jitter: HeightJitter,
    ) -> Result<Self, ExperimentError> {
        let mut v = cfg.violations();
        v.extend(readout.violations());
        v.extend(jitter.violations());
        if efficiencies.len() != cfg.n_elements {
            v.push(format!(
                "{} element efficiencies for {} elements",
                efficiencies.len(),
                cfg.n_elements
            ));
        }
        if heights.len() != cfg.n_elements {
            v.push(format!(
                "{} element heights for {} elements",
                heights.len(),
                cfg.n_elements
            ));
        }
        if !v.is_empty() {
            return Err(ExperimentError::InvalidConfig(v));
        }

        let raw = circuit::single_fire_pulse(cfg, DEFAULT_T_END, DEFAULT_DT)?;
        let pretrigger_samples = (readout.pretrigger * readout.sample_rate).round() as usize;
        let mut template = vec![0.0; pretrigger_samples];
        template.extend(resample(&raw, DEFAULT_DT, readout.sample_rate));
        let mut filter = Filter::cascade(&readout.filters, readout.sample_rate)?;
        let template = filter.run(&template);
        let peak_index = template
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);

        Ok(VirtualExperiment {
            efficiencies,
            height_factors: heights
                .heights
                .iter()
                .map(|h| h / heights.profile.center)
                .collect(),
            jitter,
            filters: readout.filters.clone(),
            sample_rate: readout.sample_rate,
            gain: readout.gain(),
            noise_rms: readout.resolved_noise_rms(cfg.r_load),
            timing_sigma: readout.jitter_fwhm / FWHM_PER_SIGMA,
            template,
            pretrigger_samples,
            peak_index,
            superposition_error: superposition_error(cfg, DEFAULT_T_END, DEFAULT_DT)?,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.height_factors.len()
    }

    /// Output voltage contributed by one nominal firing at the sampling point.
    pub fn level_spacing(&self) -> f64 {
        self.gain * self.template[self.peak_index]
    }

    pub fn noise_rms(&self) -> f64 {
        self.noise_rms
    }

    pub fn superposition_error(&self) -> f64 {
        self.superposition_error
    }

    /// Filtered, amplified single-fire template and its sample times (seconds from firing).
    pub fn filtered_template(&self) -> (Vec<f64>, Vec<f64>) {
        let t = (0..self.template.len())
            .map(|i| (i as f64 - self.pretrigger_samples as f64) / self.sample_rate)
            .collect();
        (t, self.template.iter().map(|v| v * self.gain).collect())
    }

    fn template_at(&self, x: f64) -> f64 {
        let last = self.template.len() - 1;
        if x <= 0.0 {
            return self.template[0];
        }
        let j = x.floor() as usize;
        if j >= last {
            return self.template[last];
        }
        let f = x - j as f64;
        self.template[j] * (1.0 - f) + self.template[j + 1] * f
    }

    fn shot_with(&self, mu_bar: f64, rng: &mut impl Rng, scratch: &mut ShotScratch) -> Shot {
        // Poisson thinning: element k independently receives Poisson(μ̄·w_k)
        // detectable photons, so it fires with probability 1 − exp(−μ̄·w_k).
        let mut fired = 0;
        for (c, &p) in scratch.clicked.iter_mut().zip(&scratch.fire_prob) {
            *c = p > 0.0 && rng.random::<f64>() < p;
            fired += *c as usize;
        }
        let sigma_h = self.jitter.sigma(mu_bar);
        let mut amplitude = 0.0;
        for (k, _) in scratch.clicked.iter().enumerate().filter(|(_, &c)| c) {
            let delta: f64 = if sigma_h > 0.0 {
                sigma_h * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            amplitude += self.height_factors[k] * (1.0 + delta);
        }
        let offset = if self.timing_sigma > 0.0 {
            self.timing_sigma * self.sample_rate * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        let x = (self.peak_index as f64 + offset).clamp(0.0, (self.template.len() - 1) as f64);
        let signal = amplitude * self.template_at(x);

        let noise = if self.noise_rms > 0.0 {
            // Only noise inside the pretrigger window before the sample reaches it.
            let end = x.floor() as usize + 1;
            let start = end.saturating_sub(self.pretrigger_samples + 1);
            scratch.filter.reset();
            let (mut prev, mut cur) = (0.0, 0.0);
            for _ in start..=end {
                prev = cur;
                cur = scratch
                    .filter
                    .process(self.noise_rms * rng.sample::<f64, _>(StandardNormal));
            }
            let f = x - x.floor();
            prev * (1.0 - f) + cur * f
        } else {
            0.0
        };
        Shot {
            sample: self.gain * (signal + noise),
            fired,
        }
    }

    /// One laser pulse of mean `mu_bar` photons through the whole chain.
    pub fn simulate_shot(&self, mu_bar: f64, rng: &mut impl Rng) -> Shot {
        let mut scratch = self.scratch(mu_bar);
        self.shot_with(mu_bar, rng, &mut scratch)
    }

    fn scratch(&self, mu_bar: f64) -> ShotScratch {
        ShotScratch {
            fire_prob: self
                .efficiencies
                .click_weights()
                .iter()
                .map(|w| -(-mu_bar * w).exp_m1())
                .collect(),
            clicked: vec![false; self.n_elements()],
            filter: Filter::cascade(&self.filters, self.sample_rate)
                .expect("validated at construction"),
        }
    }

    /// `shots` pulses at mean `mu_bar`, split over deterministic substreams.
    pub fn run_shots(&self, mu_bar: f64, shots: usize, seed: u64, stream: u64) -> Vec<Shot> {
        let chunks = shots.div_ceil(SHOT_CHUNK);
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = substream(seed, stream_id(stream, c as u64));
                let mut scratch = self.scratch(mu_bar);
                let len = SHOT_CHUNK.min(shots - c * SHOT_CHUNK);
                (0..len)
                    .map(|_| self.shot_with(mu_bar, &mut rng, &mut scratch))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

struct ShotScratch {
    fire_prob: Vec<f64>,
    clicked: Vec<bool>,
    filter: Filter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSweepResult {
    pub powers: Vec<f64>,
    pub mu_bars: Vec<f64>,
    /// Sampled heights per power, all on one binning.
    pub histograms: Vec<Histogram>,
    /// True fired-element counts per power, `n = 0..=N`.
    pub fired_counts: Vec<Vec<u64>>,
    pub shots_per_power: usize,
    pub seed: u64,
    /// Output volts per nominal firing.
    pub level_spacing: f64,
    pub superposition_error: f64,
}

impl PowerSweepResult {
    /// Long-form CSV: `power_w,bin_center_v,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "power_w,bin_center_v,count")?;
        for (p, h) in self.powers.iter().zip(&self.histograms) {
            for (i, c) in h.counts.iter().enumerate() {
                writeln!(w, "{p},{},{c}", h.center(i))?;
            }
        }
        Ok(())
    }
}

/// Runs `shots_per_power` pulses at each power and bins all samples on a
/// shared range spanning the global extremes.
pub fn run_power_sweep(
    exp: &VirtualExperiment,
    laser: &LaserConfig,
    powers: &[f64],
    shots_per_power: usize,
    bins: usize,
    seed: u64,
) -> Result<PowerSweepResult, ExperimentError> {
    let mut v = laser.violations();
    if shots_per_power == 0 {
        v.push("shots_per_power must be at least 1".into());
    }
    if bins == 0 {
        v.push("bins must be at least 1".into());
    }
    if powers.is_empty() || powers.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        v.push("powers must be a non-empty list of finite values >= 0".into());
    }
    if !v.is_empty() {
        return Err(ExperimentError::InvalidConfig(v));
    }

    let mu_bars: Vec<f64> = powers
        .iter()
        .map(|&p| photons_per_pulse(&laser.with_power(p)))
        .collect();
    let shots: Vec<Vec<Shot>> = mu_bars
        .iter()
        .enumerate()
        .map(|(i, &mu)| exp.run_shots(mu, shots_per_power, seed, i as u64))
        .collect();

    let (mut lo, mut hi) = shots
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
            (lo.min(s.sample), hi.max(s.sample))
        });
    if hi - lo <= 1e-12 * exp.level_spacing() {
        lo -= 0.5 * exp.level_spacing();
        hi += 0.5 * exp.level_spacing();
    }
    // Extremes land on bin centers.
    let half = if bins > 1 {
        0.5 * (hi - lo) / (bins - 1) as f64
    } else {
        0.0
    };
    let (lo, hi) = (lo - half, hi + half);

    let n = exp.n_elements();
    let histograms = shots
        .iter()
        .map(|s| {
            let samples: Vec<f64> = s.iter().map(|s| s.sample).collect();
            Histogram::from_samples(&samples, lo, hi, bins)
        })
        .collect();
    let fired_counts = shots
        .iter()
        .map(|s| {
            let mut c = vec![0u64; n + 1];
            s.iter().for_each(|s| c[s.fired] += 1);
            c
        })
        .collect();
    Ok(PowerSweepResult {
        powers: powers.to_vec(),
        mu_bars,
        histograms,
        fired_counts,
        shots_per_power,
        seed,
        level_spacing: exp.level_spacing(),
        superposition_error: exp.superposition_error(),
    })
}
