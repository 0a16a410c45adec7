//! First-order recursive filters designed with the bilinear transform.
//!
//! Cutoffs are pre-warped so the digital -3 dB point lands exactly on the
//! requested analog cutoff.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("cutoff {cutoff_hz} Hz must lie in (0, {nyquist_hz}) Hz")]
    CutoffOutOfRange { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("band-pass edges out of order: {low_hz} Hz >= {high_hz} Hz")]
    InvertedBand { low_hz: f64, high_hz: f64 },
    #[error("sample rate must be positive, got {0}")]
    SampleRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSpec {
    LowPass { cutoff_hz: f64 },
    BandPass { low_hz: f64, high_hz: f64 },
}

impl FilterSpec {
    pub fn highest_cutoff(&self) -> f64 {
        match *self {
            FilterSpec::LowPass { cutoff_hz } => cutoff_hz,
            FilterSpec::BandPass { high_hz, .. } => high_hz,
        }
    }
}

/// `y[n] = b0·x[n] + b1·x[n-1] - a1·y[n-1]`
#[derive(Debug, Clone, Copy, PartialEq)]
struct Section {
    b0: f64,
    b1: f64,
    a1: f64,
    x1: f64,
    y1: f64,
}

impl Section {
    fn low_pass(k: f64) -> Self {
        let norm = 1.0 + k;
        Section {
            b0: k / norm,
            b1: k / norm,
            a1: (k - 1.0) / norm,
            x1: 0.0,
            y1: 0.0,
        }
    }

    fn high_pass(k: f64) -> Self {
        let norm = 1.0 + k;
        Section {
            b0: 1.0 / norm,
            b1: -1.0 / norm,
            a1: (k - 1.0) / norm,
            x1: 0.0,
            y1: 0.0,
        }
    }

    #[inline]
    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b1 * self.x1 - self.a1 * self.y1;
        self.x1 = x;
        self.y1 = y;
        y
    }
}

fn warp(cutoff_hz: f64, sample_rate: f64) -> Result<f64, FilterError> {
    let nyquist_hz = 0.5 * sample_rate;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist_hz) {
        return Err(FilterError::CutoffOutOfRange {
            cutoff_hz,
            nyquist_hz,
        });
    }
    Ok((std::f64::consts::PI * cutoff_hz / sample_rate).tan())
}

/// A causal cascade of first-order sections with its own state.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    sections: Vec<Section>,
}

impl Filter {
    pub fn design(spec: &FilterSpec, sample_rate: f64) -> Result<Self, FilterError> {
        Self::cascade(std::slice::from_ref(spec), sample_rate)
    }

    /// Builds the series connection of `specs`, applied in order.
    pub fn cascade(specs: &[FilterSpec], sample_rate: f64) -> Result<Self, FilterError> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(FilterError::SampleRate(sample_rate));
        }
        let mut sections = Vec::new();
        for spec in specs {
            match *spec {
                FilterSpec::LowPass { cutoff_hz } => {
                    sections.push(Section::low_pass(warp(cutoff_hz, sample_rate)?));
                }
                FilterSpec::BandPass { low_hz, high_hz } => {
                    if low_hz >= high_hz {
                        return Err(FilterError::InvertedBand { low_hz, high_hz });
                    }
                    sections.push(Section::high_pass(warp(low_hz, sample_rate)?));
                    sections.push(Section::low_pass(warp(high_hz, sample_rate)?));
                }
            }
        }
        Ok(Filter { sections })
    }

    pub fn reset(&mut self) {
        for s in &mut self.sections {
            s.x1 = 0.0;
            s.y1 = 0.0;
        }
    }

    #[inline]
    pub fn process(&mut self, x: f64) -> f64 {
        self.sections.iter_mut().fold(x, |acc, s| s.process(acc))
    }

    /// Filters a whole trace starting from rest.
    pub fn run(&mut self, signal: &[f64]) -> Vec<f64> {
        self.reset();
        signal.iter().map(|&x| self.process(x)).collect()
    }
}

/// Filters `signal` (sampled at `sample_rate`) from zero initial state.
pub fn apply_filter(
    spec: &FilterSpec,
    signal: &[f64],
    sample_rate: f64,
) -> Result<Vec<f64>, FilterError> {
    Ok(Filter::design(spec, sample_rate)?.run(signal))
}
