//! `snd` command-line front end: config loading, subcommand dispatch and run
//! manifests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod svg;
pub mod sweep_csv;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{load_config, parse_config, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "snd",
    version,
    about = "Series-nanowire photon-number-resolving detector simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; the bundled paper12.json when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, created if needed.
    #[arg(long, value_name = "DIR", default_value = "snd-out")]
    pub out: PathBuf,
    /// Seed for stochastic commands; overrides the config.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Also write SVG plots.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepOverrides {
    #[arg(long, value_name = "W")]
    pub power_min: Option<f64>,
    #[arg(long, value_name = "W")]
    pub power_max: Option<f64>,
    #[arg(long, value_name = "COUNT")]
    pub power_steps: Option<usize>,
    /// Shots per power.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Load resistance, Ω.
    #[arg(long)]
    pub rl: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Element currents and output voltage after `n` simultaneous firings.
    Transient {
        #[command(flatten)]
        common: Common,
        /// Number of fired elements (default: all).
        #[arg(long)]
        n: Option<usize>,
        /// Load resistance, Ω.
        #[arg(long)]
        rl: Option<f64>,
        /// Keep every k-th integration step in the CSV.
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Static current-voltage characteristic.
    Iv {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 401)]
        points: usize,
    },
    /// Click distribution table and single-parameter efficiency fit.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Number of elements (default: from the config).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        /// Mean photon number per pulse.
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        /// Also run this many Monte Carlo trials (needs a seed).
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Combinatorial excess-noise curve FWHM(n).
    Noise {
        #[command(flatten)]
        common: Common,
    },
    /// Pulse-height histograms over a power sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: SweepOverrides,
    },
    /// Mixture fits, P(n), efficiency, level noise and linearity from a sweep CSV.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Sweep CSV (default: OUT/sweep.csv).
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Count rate above photon-number thresholds versus power.
    CountRate {
        #[command(flatten)]
        common: Common,
        /// Reuse a sweep CSV instead of simulating one.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        #[command(flatten)]
        overrides: SweepOverrides,
    },
    /// Per-element inductance from a target 1/e fall time.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Target fall time, s.
        #[arg(long, default_value_t = 11.3e-9)]
        tau: f64,
        /// Load resistance, Ω.
        #[arg(long)]
        rl: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Transient { .. } => "transient",
            Command::Iv { .. } => "iv",
            Command::Stats { .. } => "stats",
            Command::Noise { .. } => "noise",
            Command::Sweep { .. } => "sweep",
            Command::Analyze { .. } => "analyze",
            Command::CountRate { .. } => "count-rate",
            Command::Calibrate { .. } => "calibrate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Transient { common, .. }
            | Command::Iv { common, .. }
            | Command::Stats { common, .. }
            | Command::Noise { common }
            | Command::Sweep { common, .. }
            | Command::Analyze { common, .. }
            | Command::CountRate { common, .. }
            | Command::Calibrate { common, .. } => common,
        }
    }
}

/// Misuse of the command line that parsing alone cannot catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub command: String,
    pub version: &'static str,
    pub timestamp: String,
    pub config: &'a RunConfig,
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => Ok(load_config(path)?),
        None => Ok(parse_config(config::PAPER12)?),
    }
}

fn apply_overrides(cfg: &mut RunConfig, o: &SweepOverrides) -> Result<()> {
    if o.power_min.is_some() || o.power_max.is_some() || o.power_steps.is_some() {
        cfg.sweep.powers = None;
    }
    if let Some(p) = o.power_min {
        cfg.sweep.power_min = p;
    }
    if let Some(p) = o.power_max {
        cfg.sweep.power_max = p;
    }
    if let Some(s) = o.power_steps {
        cfg.sweep.steps = s;
    }
    if let Some(s) = o.shots {
        cfg.sweep.shots = s;
    }
    if let Some(r) = o.rl {
        cfg.detector.r_load = r;
    }
    Ok(cfg.validate()?)
}

fn require_seed(cfg: &RunConfig, command: &str) -> Result<u64> {
    cfg.seed.ok_or_else(|| {
        UsageError(format!(
            "`{command}` is stochastic: pass --seed or set \"seed\" in the config"
        ))
        .into()
    })
}

/// Executes a parsed command; returns the stdout summary.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<String> {
    let command = &cli.command;
    let common = command.common();
    let mut cfg = resolve_config(common)?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    let out = common.out.as_path();
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let plot = common.plot;

    let (summary, seed) = match command {
        Command::Transient { n, rl, stride, .. } => {
            if let Some(r) = rl {
                cfg.detector.r_load = *r;
                cfg.validate()?;
            }
            let n = n.unwrap_or(cfg.detector.n_elements);
            (commands::transient(&cfg, n, *stride, out, plot)?, None)
        }
        Command::Iv { points, .. } => (commands::iv(&cfg, *points, out, plot)?, None),
        Command::Stats {
            n, eta, mu, shots, ..
        } => {
            let n = n.unwrap_or(cfg.detector.n_elements);
            let mc = match shots {
                Some(s) => Some((*s, require_seed(&cfg, "stats --shots")?)),
                None => None,
            };
            (
                commands::stats(n, *eta, *mu, mc, out, plot)?,
                mc.map(|m| m.1),
            )
        }
        Command::Noise { .. } => (commands::noise(&cfg, out, plot)?, None),
        Command::Sweep { overrides, .. } => {
            apply_overrides(&mut cfg, overrides)?;
            let seed = require_seed(&cfg, "sweep")?;
            (commands::sweep(&cfg, seed, out, plot)?.1, Some(seed))
        }
        Command::Analyze { input, .. } => {
            let input = input.clone().unwrap_or_else(|| out.join("sweep.csv"));
            let sweep = commands::load_sweep(&cfg, &input)?;
            (commands::analyze(&cfg, &sweep, out, plot)?, None)
        }
        Command::CountRate {
            input, overrides, ..
        } => {
            apply_overrides(&mut cfg, overrides)?;
            let (sweep, seed) = match input {
                Some(path) => (commands::load_sweep(&cfg, path)?, None),
                None => {
                    let seed = require_seed(&cfg, "count-rate")?;
                    (commands::sweep(&cfg, seed, out, plot)?.0, Some(seed))
                }
            };
            (commands::count_rate(&cfg, &sweep, out, plot)?, seed)
        }
        Command::Calibrate { tau, rl, .. } => {
            if let Some(r) = rl {
                cfg.detector.r_load = *r;
                cfg.validate()?;
            }
            (commands::calibrate(&cfg, *tau, out, plot)?, None)
        }
    };

    write_manifest(out, &cfg, seed, argv, command.name())?;
    Ok(summary)
}

fn write_manifest(
    out: &Path,
    cfg: &RunConfig,
    seed: Option<u64>,
    argv: &[String],
    name: &str,
) -> Result<()> {
    let command = if argv.len() > 1 {
        argv[1..].join(" ")
    } else {
        name.to_string()
    };
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed,
        command,
        version: env!("CARGO_PKG_VERSION"),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out.join("manifest.json"), json + "\n").context("writing manifest.json")
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let text: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(&cli, &text) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
