//! JSON run configuration.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use snd_core::analysis::{BiasPoint, DqeTable};
use snd_core::circuit::SndConfig;
use snd_core::experiment::{
    element_coupling, BeamProfile, HeightJitter, LaserConfig, ReadoutChain,
};
use snd_core::noisemodel::HeightProfile;
use snd_core::photonstats::ElementEfficiencies;

/// Bundled configuration of the twelve-element device.
pub const PAPER12: &str = include_str!("../configs/paper12.json");
pub const PAPER12_NAME: &str = "paper12.json";

#[derive(Debug)]
pub enum ConfigError {
    Io(String, std::io::Error),
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    Invalid(Vec<String>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(path, e) => write!(f, "cannot read config {path}: {e}"),
            ConfigError::Parse {
                line,
                column,
                message,
            } => {
                write!(
                    f,
                    "config parse error at line {line}, column {column}: {message}"
                )
            }
            ConfigError::Invalid(v) => {
                write!(
                    f,
                    "invalid config ({} problem{}):",
                    v.len(),
                    if v.len() == 1 { "" } else { "s" }
                )?;
                for s in v {
                    write!(f, "\n  - {s}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Per-element detection probability: one value for every element or a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Detection {
    Uniform(f64),
    PerElement(Vec<f64>),
}

impl Default for Detection {
    fn default() -> Self {
        Detection::Uniform(1.605e-4)
    }
}

fn default_power_min() -> f64 {
    0.4e-9
}
fn default_power_max() -> f64 {
    160e-9
}
fn default_steps() -> usize {
    19
}
fn default_true() -> bool {
    true
}
fn default_shots() -> usize {
    snd_core::experiment::DEFAULT_SHOTS
}
fn default_bins() -> usize {
    snd_core::experiment::DEFAULT_BINS
}

/// Power grid and sampling of a sweep. `powers` wins over the log grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub powers: Option<Vec<f64>>,
    #[serde(default = "default_power_min")]
    pub power_min: f64,
    #[serde(default = "default_power_max")]
    pub power_max: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Prepend a zero-power (dark) point to the log grid.
    #[serde(default = "default_true")]
    pub include_dark: bool,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            powers: None,
            power_min: default_power_min(),
            power_max: default_power_max(),
            steps: default_steps(),
            include_dark: true,
            shots: default_shots(),
            bins: default_bins(),
        }
    }
}

impl SweepConfig {
    pub fn resolved_powers(&self) -> Vec<f64> {
        if let Some(p) = &self.powers {
            return p.clone();
        }
        let mut out = Vec::with_capacity(self.steps + 1);
        if self.include_dark {
            out.push(0.0);
        }
        let ratio = self.power_max / self.power_min;
        for i in 0..self.steps {
            let f = if self.steps > 1 {
                i as f64 / (self.steps - 1) as f64
            } else {
                0.0
            };
            out.push(self.power_min * ratio.powf(f));
        }
        out
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match &self.powers {
            Some(p) => {
                if p.is_empty() {
                    v.push("sweep.powers must not be empty".into());
                }
                if p.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                    v.push("sweep.powers must be finite and >= 0".into());
                }
            }
            None => {
                if !(self.power_min > 0.0 && self.power_min.is_finite()) {
                    v.push(format!(
                        "sweep.power_min must be > 0 (got {})",
                        self.power_min
                    ));
                }
                if !(self.power_max >= self.power_min && self.power_max.is_finite()) {
                    v.push(format!(
                        "sweep.power_max must be >= power_min (got {})",
                        self.power_max
                    ));
                }
                if self.steps == 0 {
                    v.push("sweep.steps must be at least 1".into());
                }
            }
        }
        if self.shots == 0 {
            v.push("sweep.shots must be at least 1".into());
        }
        if self.bins < 2 {
            v.push(format!("sweep.bins must be at least 2 (got {})", self.bins));
        }
        v
    }
}

fn default_thresholds() -> Vec<usize> {
    vec![1, 2, 3, 4]
}
fn default_min_counts() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRateConfig {
    /// Dark count rate subtracted from every curve, Hz.
    #[serde(default)]
    pub dcr: f64,
    /// Subtract the per-threshold rate measured at zero power.
    #[serde(default = "default_true")]
    pub subtract_dark: bool,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<usize>,
    #[serde(default = "default_min_counts")]
    pub min_counts: f64,
    /// Measured DQE against bias current, interpolated at `detector.i_bias`.
    #[serde(default)]
    pub dqe_vs_bias: Vec<BiasPoint>,
}

impl Default for CountRateConfig {
    fn default() -> Self {
        CountRateConfig {
            dcr: 0.0,
            subtract_dark: true,
            thresholds: default_thresholds(),
            min_counts: default_min_counts(),
            dqe_vs_bias: Vec::new(),
        }
    }
}

fn default_max_peaks() -> usize {
    13
}
fn default_min_area() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_max_peaks")]
    pub max_peaks: usize,
    /// Levels with fewer fitted counts are left out of the noise table.
    #[serde(default = "default_min_area")]
    pub noise_min_area: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            max_peaks: default_max_peaks(),
            noise_min_area: default_min_area(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "SndConfig::twelve_element")]
    pub detector: SndConfig,
    #[serde(default)]
    pub laser: LaserConfig,
    #[serde(default)]
    pub beam: BeamProfile,
    #[serde(default)]
    pub detection: Detection,
    #[serde(default)]
    pub readout: ReadoutChain,
    #[serde(default)]
    pub heights: HeightProfile,
    #[serde(default)]
    pub height_jitter: HeightJitter,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub count_rate: CountRateConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config uses defaults")
    }
}

impl RunConfig {
    /// Every violated invariant across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .detector
            .violations()
            .into_iter()
            .map(|s| format!("detector.{s}"))
            .collect();
        v.extend(self.laser.violations());
        v.extend(self.beam.violations());
        v.extend(self.readout.violations());
        v.extend(self.heights.violations());
        v.extend(self.height_jitter.violations());
        v.extend(self.sweep.violations());
        let n = self.detector.n_elements;
        match &self.detection {
            Detection::Uniform(p) => {
                if !(0.0..=1.0).contains(p) {
                    v.push(format!("detection must lie in [0, 1] (got {p})"));
                }
            }
            Detection::PerElement(p) => {
                if p.len() != n {
                    v.push(format!(
                        "detection lists {} elements, detector.n_elements is {n}",
                        p.len()
                    ));
                }
                if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    v.push("detection entries must lie in [0, 1]".into());
                }
            }
        }
        if !(self.count_rate.dcr >= 0.0 && self.count_rate.dcr.is_finite()) {
            v.push(format!(
                "count_rate.dcr must be >= 0 (got {})",
                self.count_rate.dcr
            ));
        }
        if self.count_rate.thresholds.iter().any(|&t| t == 0 || t > n) {
            v.push(format!("count_rate.thresholds must lie in 1..={n}"));
        }
        if !self.count_rate.dqe_vs_bias.is_empty() {
            if let Err(e) = DqeTable::new(self.count_rate.dqe_vs_bias.clone()) {
                v.push(format!("count_rate.dqe_vs_bias: {e}"));
            }
        }
        if self.analysis.max_peaks == 0 {
            v.push("analysis.max_peaks must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    pub fn efficiencies(&self) -> Result<ElementEfficiencies, snd_core::photonstats::StatsError> {
        let n = self.detector.n_elements;
        let routing = element_coupling(&self.beam, n);
        let detection = match &self.detection {
            Detection::Uniform(p) => vec![*p; n],
            Detection::PerElement(p) => p.clone(),
        };
        ElementEfficiencies::new(routing, detection)
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a config. A missing `paper12.json` falls back to the
/// bundled copy.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e)
            if e.kind() == std::io::ErrorKind::NotFound
                && path.file_name().is_some_and(|f| f == PAPER12_NAME) =>
        {
            PAPER12.to_string()
        }
        Err(e) => return Err(ConfigError::Io(path.display().to_string(), e)),
    };
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_is_valid() {
        let cfg = parse_config(PAPER12).unwrap();
        assert_eq!(cfg.detector.n_elements, 12);
        assert_eq!(cfg.detector.r_parallel, 45.2);
        assert_eq!(cfg.detector.r_load, 50.0);
        assert_eq!(cfg.detector.i_bias, 13.0e-6);
        assert_eq!(cfg.detector.i_critical, 13.4e-6);
    }

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.sweep, SweepConfig::default());
        assert_eq!(cfg.heights, HeightProfile::default());
        assert_eq!(cfg.seed, None);
        assert_eq!(cfg.sweep.resolved_powers().len(), 20);
        assert_eq!(cfg.sweep.resolved_powers()[0], 0.0);
    }

    #[test]
    fn every_violation_is_listed() {
        let text = r#"{"detector": {"n_elements": 12, "r_parallel": 45.2, "r_load": 50, "i_bias": 14e-6,
            "i_critical": 13.4e-6, "l_element": 4e-8}, "laser": {"wavelength": 1.31e-6, "pulse_width": 1e-10,
            "rep_rate": -1, "power": 1e-9}, "sweep": {"shots": 0}}"#;
        let Err(ConfigError::Invalid(v)) = parse_config(text) else {
            panic!("expected rejection")
        };
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v[0].contains("i_bias"));
        assert!(v.iter().any(|s| s.contains("laser.rep_rate")));
        assert!(v.iter().any(|s| s.contains("sweep.shots")));
    }

    #[test]
    fn parse_errors_carry_position() {
        let Err(ConfigError::Parse { line, .. }) =
            parse_config("{\n  \"seed\": 1,\n  \"bogus\": 2\n}")
        else {
            panic!("expected parse error")
        };
        assert_eq!(line, 3);
    }

    #[test]
    fn per_element_detection_length_checked() {
        let err = parse_config(r#"{"detection": [0.1, 0.2]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("detection lists 2 elements"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = Some(3);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
