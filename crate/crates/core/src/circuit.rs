//! Lumped-element model of a series-nanowire detector.
//!
//! `N` elements sit in series across an ideal current source `I_B` that is
//! shunted by the load `R_L`. Element `k` is a nanowire (kinetic inductance
//! `L_0` in series with a switchable hotspot resistance `r_k`) in parallel
//! with its shunt `R_p`. With `i_k` the nanowire current and `i_chain` the
//! series current,
//!
//! ```text
//! L_0 · di_k/dt = R_p · (i_chain − i_k) − r_k · i_k
//! i_chain      = (R_L · I_B + R_p · Σ i_k) / (R_L + N · R_p)
//! v_out        = R_L · (I_B − i_chain)
//! ```
//!
//! A hotspot opens (`r_k = R_hs`) at the element's firing time and heals
//! (`r_k = 0`) once its nanowire current drops below `i_retrap · I_C`.
//! Firing and healing instants are located inside a step, so pulse heights
//! do not depend on where the events fall relative to the time grid.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{rk4_step, Rk4Scratch};

pub const DEFAULT_DT: f64 = 1e-12;
pub const DEFAULT_T_END: f64 = 100e-9;
pub const DEFAULT_R_HOTSPOT: f64 = 5e3;
pub const DEFAULT_I_RETRAP: f64 = 0.3;
/// Normal-state resistance of one element's whole nanowire, only used by the IV model.
pub const DEFAULT_R_NORMAL: f64 = 250e3;
/// Inductance close to what calibration against an 11.3 ns fall time yields
/// for the twelve-element parameters; not a measured value.
pub const DEFAULT_L_ELEMENT: f64 = 43e-9;

/// Largest per-step change of any nanowire current, as a fraction of `I_C`.
const MAX_STEP_CHANGE: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("invalid detector configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("invalid firing pattern: {0}")]
    InvalidPattern(String),
    #[error("invalid simulation window: {0}")]
    InvalidWindow(String),
    #[error("time step {dt:e} s too coarse: nanowire current changed by {fraction:.2} I_C at t = {t:e} s")]
    Resolution { t: f64, dt: f64, fraction: f64 },
    #[error("state became non-finite at t = {t:e} s")]
    Diverged { t: f64 },
    #[error("inductance calibration failed: {0}")]
    Calibration(String),
}

/// Electrical description of the detector and its readout load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SndConfig {
    pub n_elements: usize,
    /// Shunt resistance per element, Ω.
    pub r_parallel: f64,
    /// Readout load, Ω.
    pub r_load: f64,
    /// Bias current, A.
    pub i_bias: f64,
    /// Critical current, A.
    pub i_critical: f64,
    /// Kinetic inductance per element, H.
    pub l_element: f64,
    /// Hotspot plateau resistance, Ω.
    #[serde(default = "default_r_hotspot")]
    pub r_hotspot: f64,
    /// Retrapping threshold as a fraction of `i_critical`.
    #[serde(default = "default_i_retrap")]
    pub i_retrap: f64,
    /// Normal-state resistance of a fully switched element, Ω.
    #[serde(default = "default_r_normal")]
    pub r_normal: f64,
}

fn default_r_hotspot() -> f64 {
    DEFAULT_R_HOTSPOT
}
fn default_i_retrap() -> f64 {
    DEFAULT_I_RETRAP
}
fn default_r_normal() -> f64 {
    DEFAULT_R_NORMAL
}

impl SndConfig {
    /// Twelve-element device: R_p = 45.2 Ω, R_L = 50 Ω, I_B = 13.0 µA, I_C = 13.4 µA.
    pub fn twelve_element() -> Self {
        SndConfig {
            n_elements: 12,
            r_parallel: 45.2,
            r_load: 50.0,
            i_bias: 13.0e-6,
            i_critical: 13.4e-6,
            l_element: DEFAULT_L_ELEMENT,
            r_hotspot: DEFAULT_R_HOTSPOT,
            i_retrap: DEFAULT_I_RETRAP,
            r_normal: DEFAULT_R_NORMAL,
        }
    }

    pub fn with_load(mut self, r_load: f64) -> Self {
        self.r_load = r_load;
        self
    }

    pub fn with_inductance(mut self, l_element: f64) -> Self {
        self.l_element = l_element;
        self
    }

    /// Every violated invariant, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = |name: &str, x: f64, v: &mut Vec<String>| {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} must be positive and finite (got {x})"));
            }
        };
        if self.n_elements == 0 {
            v.push("n_elements must be at least 1".into());
        }
        positive("r_parallel", self.r_parallel, &mut v);
        positive("r_load", self.r_load, &mut v);
        positive("r_hotspot", self.r_hotspot, &mut v);
        positive("r_normal", self.r_normal, &mut v);
        positive("l_element", self.l_element, &mut v);
        positive("i_critical", self.i_critical, &mut v);
        if !(self.i_bias > 0.0 && self.i_bias < self.i_critical) {
            v.push(format!(
                "i_bias must satisfy 0 < i_bias < i_critical (got i_bias = {}, i_critical = {})",
                self.i_bias, self.i_critical
            ));
        }
        if !(self.i_retrap > 0.0 && self.i_retrap < 1.0) {
            v.push(format!(
                "i_retrap must lie in (0, 1) (got {})",
                self.i_retrap
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CircuitError::InvalidConfig(v))
        }
    }

    /// Series-chain current for a given sum of nanowire currents.
    #[inline]
    pub fn chain_current(&self, wire_sum: f64) -> f64 {
        let n = self.n_elements as f64;
        (self.r_load * self.i_bias + self.r_parallel * wire_sum)
            / (self.r_load + n * self.r_parallel)
    }

    /// Decay constant of the common (all-wires) mode once every hotspot has healed.
    pub fn recovery_time_constant(&self) -> f64 {
        let n = self.n_elements as f64;
        self.l_element * (self.r_load + n * self.r_parallel) / (self.r_parallel * self.r_load)
    }

    /// Time constant of a nanowire current collapsing into its shunt while resistive.
    pub fn hotspot_time_constant(&self) -> f64 {
        self.l_element / (self.r_parallel + self.r_hotspot)
    }

    fn retrap_current(&self) -> f64 {
        self.i_retrap * self.i_critical
    }
}

/// Which elements absorb a photon, and when.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FiringPattern {
    pub fired: Vec<usize>,
    pub t_fire: Vec<f64>,
}

impl FiringPattern {
    pub fn none() -> Self {
        Self::default()
    }

    /// Elements `0..n` all firing at `t`.
    pub fn first_n(n: usize, t: f64) -> Self {
        FiringPattern {
            fired: (0..n).collect(),
            t_fire: vec![t; n],
        }
    }

    pub fn simultaneous(elements: &[usize], t: f64) -> Self {
        FiringPattern {
            fired: elements.to_vec(),
            t_fire: vec![t; elements.len()],
        }
    }

    pub fn photon_number(&self) -> usize {
        self.fired.len()
    }

    pub fn validate(&self, n_elements: usize) -> Result<(), CircuitError> {
        if self.fired.len() != self.t_fire.len() {
            return Err(CircuitError::InvalidPattern(
                "fired and t_fire lengths differ".into(),
            ));
        }
        let mut seen = vec![false; n_elements];
        for (&k, &t) in self.fired.iter().zip(&self.t_fire) {
            if k >= n_elements {
                return Err(CircuitError::InvalidPattern(format!(
                    "element {k} out of range 0..{n_elements}"
                )));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(CircuitError::InvalidPattern(format!(
                    "element {k} listed twice"
                )));
            }
            if !(t >= 0.0 && t.is_finite()) {
                return Err(CircuitError::InvalidPattern(format!(
                    "firing time {t} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Sampled transient of every nanowire current, the chain current and the load voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientTrace {
    pub times: Vec<f64>,
    /// `i_wire[k][j]` is the current of element `k` at `times[j]`.
    pub i_wire: Vec<Vec<f64>>,
    pub i_chain: Vec<f64>,
    pub v_out: Vec<f64>,
}

impl TransientTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn peak_voltage(&self) -> f64 {
        self.v_out.iter().copied().fold(0.0, f64::max)
    }

    /// Largest `|i_k − reference| / reference` over the trace.
    pub fn max_relative_deviation(&self, element: usize, reference: f64) -> f64 {
        self.i_wire[element]
            .iter()
            .map(|i| (i - reference).abs() / reference)
            .fold(0.0, f64::max)
    }

    /// `v_out` linearly interpolated at time `t`.
    pub fn v_out_at(&self, t: f64) -> f64 {
        interpolate(&self.times, &self.v_out, t)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "time_s")?;
        for k in 0..self.i_wire.len() {
            write!(w, ",i_wire_{k}")?;
        }
        writeln!(w, ",i_chain,v_out")?;
        for j in 0..self.times.len() {
            write!(w, "{}", self.times[j])?;
            for wire in &self.i_wire {
                write!(w, ",{}", wire[j])?;
            }
            writeln!(w, ",{},{}", self.i_chain[j], self.v_out[j])?;
        }
        Ok(())
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    if x <= xs[0] {
        return ys[0];
    }
    let j = xs.partition_point(|&t| t <= x);
    if j >= xs.len() {
        return ys[ys.len() - 1];
    }
    let (x0, x1) = (xs[j - 1], xs[j]);
    ys[j - 1] + (ys[j] - ys[j - 1]) * (x - x0) / (x1 - x0)
}

/// Single-point trace of the superconducting, pre-fire state.
pub fn steady_state(cfg: &SndConfig) -> TransientTrace {
    TransientTrace {
        times: vec![0.0],
        i_wire: vec![vec![cfg.i_bias]; cfg.n_elements],
        i_chain: vec![cfg.i_bias],
        v_out: vec![0.0],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Hotspot {
    Idle,
    Active,
    Healed,
}

/// Extremes seen on every accepted state, including event instants between grid points.
#[derive(Debug, Clone, Copy)]
struct RunSummary {
    peak_v: f64,
    peak_t: f64,
}

struct Network<'a> {
    cfg: &'a SndConfig,
    resistance: Vec<f64>,
}

impl Network<'_> {
    fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let chain = self.cfg.chain_current(y.iter().sum());
        let inv_l = 1.0 / self.cfg.l_element;
        for k in 0..y.len() {
            dy[k] = (self.cfg.r_parallel * (chain - y[k]) - self.resistance[k] * y[k]) * inv_l;
        }
    }

    fn step(&self, t: f64, y: &[f64], h: f64, out: &mut [f64], scratch: &mut Rk4Scratch) {
        let mut f = |_t: f64, y: &[f64], d: &mut [f64]| self.rhs(y, d);
        rk4_step(&mut f, t, y, h, out, scratch);
    }
}

/// Core integrator: calls `observe(t, wires, i_chain, v_out)` on every grid point.
fn integrate<O>(
    cfg: &SndConfig,
    pattern: &FiringPattern,
    t_end: f64,
    dt: f64,
    mut observe: O,
) -> Result<RunSummary, CircuitError>
where
    O: FnMut(f64, &[f64], f64, f64),
{
    cfg.validate()?;
    pattern.validate(cfg.n_elements)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CircuitError::InvalidWindow(format!(
            "dt must be positive (got {dt})"
        )));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(CircuitError::InvalidWindow(format!(
            "t_end must be positive (got {t_end})"
        )));
    }

    let n = cfg.n_elements;
    let threshold = cfg.retrap_current();
    let mut fire_at = vec![f64::INFINITY; n];
    for (&k, &t) in pattern.fired.iter().zip(&pattern.t_fire) {
        fire_at[k] = t;
    }
    let mut state = vec![Hotspot::Idle; n];
    let mut net = Network {
        cfg,
        resistance: vec![0.0; n],
    };
    let mut scratch = Rk4Scratch::new(n);

    let v_of = |y: &[f64]| cfg.r_load * (cfg.i_bias - cfg.chain_current(y.iter().sum()));
    let mut y = vec![cfg.i_bias; n];
    let mut summary = RunSummary {
        peak_v: 0.0,
        peak_t: 0.0,
    };
    let steps = (t_end / dt - 1e-9).ceil().max(1.0) as usize;
    let mut trial = vec![0.0; n];
    let mut probe = vec![0.0; n];

    {
        let chain = cfg.chain_current(y.iter().sum());
        observe(0.0, &y, chain, cfg.r_load * (cfg.i_bias - chain));
    }

    for step in 0..steps {
        let t0 = step as f64 * dt;
        let t1 = if step + 1 == steps {
            t_end
        } else {
            (step + 1) as f64 * dt
        };
        let y_start = y.clone();
        let mut t = t0;

        while t < t1 {
            // Open hotspots whose photons have arrived.
            for k in 0..n {
                if state[k] == Hotspot::Idle && fire_at[k] <= t {
                    state[k] = Hotspot::Active;
                    net.resistance[k] = cfg.r_hotspot;
                }
            }
            let next_fire = (0..n)
                .filter(|&k| state[k] == Hotspot::Idle)
                .map(|k| fire_at[k])
                .fold(f64::INFINITY, f64::min);
            let seg_end = t1.min(next_fire);
            let h = seg_end - t;

            net.step(t, &y, h, &mut trial, &mut scratch);

            // Earliest retrapping crossing inside this segment.
            let mut first: Option<f64> = None;
            for k in 0..n {
                if state[k] == Hotspot::Active && trial[k] < threshold {
                    let theta = if y[k] <= threshold {
                        0.0
                    } else {
                        locate_crossing(&net, t, &y, h, k, threshold, &mut probe, &mut scratch)
                    };
                    first = Some(first.map_or(theta, |f: f64| f.min(theta)));
                }
            }

            match first {
                Some(theta) => {
                    let h_event = theta * h;
                    if h_event > 0.0 {
                        net.step(t, &y, h_event, &mut trial, &mut scratch);
                        y.copy_from_slice(&trial);
                    }
                    t += h_event;
                    // Heal every active wire at (or numerically on) the threshold.
                    for k in 0..n {
                        if state[k] == Hotspot::Active && y[k] <= threshold * (1.0 + 1e-9) {
                            state[k] = Hotspot::Healed;
                            net.resistance[k] = 0.0;
                        }
                    }
                }
                None => {
                    y.copy_from_slice(&trial);
                    t = seg_end;
                }
            }

            if y.iter().any(|v| !v.is_finite()) {
                return Err(CircuitError::Diverged { t });
            }
            let v = v_of(&y);
            if v > summary.peak_v {
                summary = RunSummary {
                    peak_v: v,
                    peak_t: t,
                };
            }
        }

        let change = y
            .iter()
            .zip(&y_start)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change > MAX_STEP_CHANGE * cfg.i_critical {
            return Err(CircuitError::Resolution {
                t: t1,
                dt,
                fraction: change / cfg.i_critical,
            });
        }
        let chain = cfg.chain_current(y.iter().sum());
        observe(t1, &y, chain, cfg.r_load * (cfg.i_bias - chain));
    }
    Ok(summary)
}

/// Fraction `θ ∈ (0, 1]` of a step of length `h` at which wire `k` reaches `threshold`.
#[allow(clippy::too_many_arguments)]
fn locate_crossing(
    net: &Network<'_>,
    t: f64,
    y: &[f64],
    h: f64,
    k: usize,
    threshold: f64,
    probe: &mut [f64],
    scratch: &mut Rk4Scratch,
) -> f64 {
    // Illinois regula falsi on g(θ) = i_k(t + θh) − threshold, g(0) > 0 > g(1).
    let (mut a, mut b) = (0.0, 1.0);
    let mut ga = y[k] - threshold;
    net.step(t, y, h, probe, scratch);
    let mut gb = probe[k] - threshold;
    let mut side = 0i8;
    for _ in 0..60 {
        let c = (a * gb - b * ga) / (gb - ga);
        net.step(t, y, c * h, probe, scratch);
        let gc = probe[k] - threshold;
        if gc.abs() <= 1e-12 * threshold || b - a < 1e-14 {
            return c;
        }
        if gc > 0.0 {
            a = c;
            ga = gc;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            b = c;
            gb = gc;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
    }
    b
}

/// Full transient for a firing pattern on a uniform grid of step `dt`.
pub fn simulate_transient(
    cfg: &SndConfig,
    pattern: &FiringPattern,
    t_end: f64,
    dt: f64,
) -> Result<TransientTrace, CircuitError> {
    let n = cfg.n_elements;
    let capacity = (t_end / dt).ceil().max(0.0) as usize + 1;
    let mut trace = TransientTrace {
        times: Vec::with_capacity(capacity),
        i_wire: vec![Vec::with_capacity(capacity); n],
        i_chain: Vec::with_capacity(capacity),
        v_out: Vec::with_capacity(capacity),
    };
    integrate(cfg, pattern, t_end, dt, |t, y, chain, v| {
        trace.times.push(t);
        for (k, &i) in y.iter().enumerate() {
            trace.i_wire[k].push(i);
        }
        trace.i_chain.push(chain);
        trace.v_out.push(v);
    })?;
    Ok(trace)
}

/// Only the load voltage, sampled on the grid, plus the exact peak.
fn simulate_v_out(
    cfg: &SndConfig,
    pattern: &FiringPattern,
    t_end: f64,
    dt: f64,
) -> Result<(Vec<f64>, RunSummary), CircuitError> {
    let mut v_out = Vec::with_capacity((t_end / dt).ceil() as usize + 1);
    let summary = integrate(cfg, pattern, t_end, dt, |_, _, _, v| v_out.push(v))?;
    Ok((v_out, summary))
}

/// Load-voltage waveform for a single element firing at `t = 0`, on the grid `k·dt`.
pub fn single_fire_pulse(cfg: &SndConfig, t_end: f64, dt: f64) -> Result<Vec<f64>, CircuitError> {
    simulate_v_out(cfg, &FiringPattern::first_n(1, 0.0), t_end, dt).map(|(v, _)| v)
}

/// Pulse height `H(n) = max v_out` for `n = 1..=N` simultaneous firings.
pub fn pulse_heights(cfg: &SndConfig, t_end: f64, dt: f64) -> Result<Vec<f64>, CircuitError> {
    cfg.validate()?;
    (1..=cfg.n_elements)
        .into_par_iter()
        .map(|n| {
            simulate_v_out(cfg, &FiringPattern::first_n(n, 0.0), t_end, dt).map(|(_, s)| s.peak_v)
        })
        .collect()
}

/// Static IV characteristic: superconducting up to `I_C`, then every wire normal
/// and the array reads `N·R_normal ∥ N·R_p`.
pub fn iv_curve(cfg: &SndConfig, i_sweep: &[f64]) -> Vec<(f64, f64)> {
    let n = cfg.n_elements as f64;
    let (r_wires, r_shunts) = (n * cfg.r_normal, n * cfg.r_parallel);
    let r_normal_branch = r_wires * r_shunts / (r_wires + r_shunts);
    i_sweep
        .iter()
        .map(|&i| {
            if i.abs() <= cfg.i_critical {
                (i, 0.0)
            } else {
                (i, i * r_normal_branch)
            }
        })
        .collect()
}

/// Peak and 1/e decay of the all-elements pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FallTime {
    pub peak: f64,
    pub t_peak: f64,
    /// Time from the peak until `v_out` first drops to `peak / e`.
    pub tau: f64,
}

/// Simulates all `N` elements firing at `t = 0` and measures the 1/e fall time.
///
/// The step is tightened to resolve the hotspot collapse and the window is
/// stretched to contain the decay when `L_0` is large.
pub fn fall_time(cfg: &SndConfig, dt: f64) -> Result<FallTime, CircuitError> {
    cfg.validate()?;
    let dt = dt.min(cfg.hotspot_time_constant() / 8.0);
    let t_end = DEFAULT_T_END.max(8.0 * cfg.recovery_time_constant());
    let (v, summary) =
        simulate_v_out(cfg, &FiringPattern::first_n(cfg.n_elements, 0.0), t_end, dt)?;
    let target = summary.peak_v / std::f64::consts::E;
    let start = (summary.peak_t / dt).ceil() as usize;
    for j in start.max(1)..v.len() {
        if v[j] <= target {
            let t_j = j as f64 * dt;
            let (t_a, v_a) = if j == start {
                (summary.peak_t, summary.peak_v)
            } else {
                (t_j - dt, v[j - 1])
            };
            let t_cross = t_a + (v_a - target) / (v_a - v[j]) * (t_j - t_a);
            return Ok(FallTime {
                peak: summary.peak_v,
                t_peak: summary.peak_t,
                tau: t_cross - summary.peak_t,
            });
        }
    }
    Err(CircuitError::Calibration(
        "pulse did not decay to 1/e within the simulation window".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub l_element: f64,
    pub fall_time: f64,
    pub iterations: usize,
}

/// Search bracket for the per-element inductance, H.
pub const CALIBRATION_BRACKET: (f64, f64) = (1e-9, 1e-6);

/// Finds `L_0` such that the simulated all-elements pulse decays with the
/// requested 1/e fall time, by bisection in `ln L_0`.
pub fn calibrate_inductance(
    cfg: &SndConfig,
    target_fall: f64,
    dt: f64,
) -> Result<Calibration, CircuitError> {
    if !(target_fall > 0.0 && target_fall.is_finite()) {
        return Err(CircuitError::Calibration(format!(
            "target fall time must be positive (got {target_fall})"
        )));
    }
    let measure = |l: f64| fall_time(&cfg.with_inductance(l), dt).map(|f| f.tau);
    let (mut lo, mut hi) = CALIBRATION_BRACKET;
    let (tau_lo, tau_hi) = (measure(lo)?, measure(hi)?);
    if !(tau_lo <= target_fall && target_fall <= tau_hi) {
        return Err(CircuitError::Calibration(format!(
            "target {target_fall:e} s outside reachable range [{tau_lo:e}, {tau_hi:e}] s"
        )));
    }
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mid = (lo * hi).sqrt();
        let tau = measure(mid)?;
        if (tau / target_fall - 1.0).abs() < 1e-5 || iterations >= 80 {
            return Ok(Calibration {
                l_element: mid,
                fall_time: tau,
                iterations,
            });
        }
        if tau < target_fall {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}
