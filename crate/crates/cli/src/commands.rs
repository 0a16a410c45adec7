//! One function per subcommand. Each writes its artifacts into `out` and
//! returns a short summary for stdout.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use snd_core::analysis::{
    analyze_sweep, count_rate_analysis, dqe, fit_power_law, fit_sweep_efficiency, noise_curves,
    write_count_rate_csv, write_peaks_csv, write_probabilities_csv, CountRateOptions, DqeTable,
    MixtureOptions, SweepAnalysis,
};
use snd_core::circuit::{
    calibrate_inductance, iv_curve, pulse_heights, simulate_transient, FiringPattern,
    TransientTrace, DEFAULT_DT, DEFAULT_T_END,
};
use snd_core::experiment::{
    aperture_fraction, photons_per_pulse, run_power_sweep, PowerSweepResult, VirtualExperiment,
};
use snd_core::noisemodel::{element_heights, excess_noise_curve, write_noise_csv};
use snd_core::photonstats::{
    click_distribution, fit_efficiency, mc_click_distribution, ElementEfficiencies,
};

use crate::config::RunConfig;
use crate::svg::{self, Axes, Series};
use crate::sweep_csv::read_sweep_csv;

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn write_with(
    out: &Path,
    name: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let mut w = create(out, name)?;
    f(&mut w).with_context(|| format!("writing {name}"))?;
    w.flush()?;
    Ok(())
}

fn plot(out: &Path, name: &str, svg: String) -> Result<()> {
    fs::write(out.join(name), svg).with_context(|| format!("writing {name}"))
}

pub fn experiment(cfg: &RunConfig) -> Result<VirtualExperiment> {
    let heights = element_heights(cfg.heights, cfg.detector.n_elements)?;
    Ok(VirtualExperiment::new(
        &cfg.detector,
        cfg.efficiencies()?,
        &cfg.readout,
        &heights,
        cfg.height_jitter,
    )?)
}

pub fn transient(
    cfg: &RunConfig,
    n: usize,
    stride: usize,
    out: &Path,
    with_plot: bool,
) -> Result<String> {
    let det = &cfg.detector;
    if n > det.n_elements {
        bail!(
            "--n {n} exceeds the {} elements of the detector",
            det.n_elements
        );
    }
    let full = simulate_transient(
        det,
        &FiringPattern::first_n(n, 0.0),
        DEFAULT_T_END,
        DEFAULT_DT,
    )?;
    let pick = |v: &[f64]| {
        v.iter()
            .step_by(stride.max(1))
            .copied()
            .collect::<Vec<f64>>()
    };
    let trace = TransientTrace {
        times: pick(&full.times),
        i_wire: full.i_wire.iter().map(|w| pick(w)).collect(),
        i_chain: pick(&full.i_chain),
        v_out: pick(&full.v_out),
    };
    write_with(out, "transient.csv", |w| trace.write_csv(w))?;
    let mut summary = format!(
        "n = {n}, R_L = {} Ω, peak v_out = {:.4e} V",
        det.r_load,
        full.peak_voltage()
    );
    if n < det.n_elements {
        let dev = full.max_relative_deviation(n, det.i_bias);
        summary.push_str(&format!(", max |I_uf - I_B|/I_B = {dev:.3e}"));
    }
    if with_plot {
        let v: Vec<(f64, f64)> = trace
            .times
            .iter()
            .zip(&trace.v_out)
            .map(|(t, v)| (t * 1e9, v * 1e3))
            .collect();
        plot(
            out,
            "transient.svg",
            svg::line_plot(
                "Output voltage",
                "time (ns)",
                "v_out (mV)",
                &[Series {
                    label: "v_out".into(),
                    points: &v,
                }],
                Axes::default(),
            ),
        )?;
    }
    Ok(summary)
}

pub fn iv(cfg: &RunConfig, points: usize, out: &Path, with_plot: bool) -> Result<String> {
    let det = &cfg.detector;
    let points = points.max(2);
    let sweep: Vec<f64> = (0..points)
        .map(|i| 2.0 * det.i_critical * i as f64 / (points - 1) as f64)
        .collect();
    let curve = iv_curve(det, &sweep);
    write_with(out, "iv.csv", |w| {
        writeln!(w, "current_a,voltage_v")?;
        curve.iter().try_for_each(|(i, v)| writeln!(w, "{i},{v}"))
    })?;
    let (i_last, v_last) = curve[curve.len() - 1];
    if with_plot {
        let pts: Vec<(f64, f64)> = curve.iter().map(|(i, v)| (i * 1e6, v * 1e3)).collect();
        plot(
            out,
            "iv.svg",
            svg::line_plot(
                "IV",
                "current (µA)",
                "voltage (mV)",
                &[Series {
                    label: "iv".into(),
                    points: &pts,
                }],
                Axes::default(),
            ),
        )?;
    }
    Ok(format!(
        "{points} points, normal-branch resistance {:.1} Ω",
        v_last / i_last
    ))
}

pub fn stats(
    n: usize,
    eta: f64,
    mu: f64,
    mc: Option<(usize, u64)>,
    out: &Path,
    with_plot: bool,
) -> Result<String> {
    let d = click_distribution(n, eta, mu)?;
    write_with(out, "stats.csv", |w| d.write_csv(w))?;
    let exact_fit = fit_efficiency(n, mu, &d.probs)?;
    let mut fits = vec![("exact", exact_fit)];
    let mut series = vec![("exact".to_string(), d.probs.clone())];
    if let Some((trials, seed)) = mc {
        let m = mc_click_distribution(&ElementEfficiencies::uniform(n, eta)?, mu, trials, seed)?;
        write_with(out, "stats_mc.csv", |w| m.write_csv(w))?;
        fits.push(("monte_carlo", fit_efficiency(n, mu, &m.probs)?));
        series.push(("monte carlo".to_string(), m.probs));
    }
    write_with(out, "fit.csv", |w| {
        writeln!(w, "source,eta,residual,degenerate")?;
        fits.iter()
            .try_for_each(|(s, f)| writeln!(w, "{s},{},{},{}", f.eta, f.residual, f.degenerate))
    })?;
    if with_plot {
        let pts: Vec<Vec<(f64, f64)>> = series
            .iter()
            .map(|(_, p)| p.iter().enumerate().map(|(k, &v)| (k as f64, v)).collect())
            .collect();
        let s: Vec<Series> = series
            .iter()
            .zip(&pts)
            .map(|((l, _), p)| Series {
                label: l.clone(),
                points: p,
            })
            .collect();
        plot(
            out,
            "stats.svg",
            svg::line_plot("Click distribution", "n", "P(n)", &s, Axes::default()),
        )?;
    }
    let fitted: Vec<String> = fits
        .iter()
        .map(|(s, f)| format!("{s} η = {:.6}", f.eta))
        .collect();
    Ok(format!(
        "N = {n}, η = {eta}, μ̄ = {mu}, mean clicks {:.4}; fitted {}",
        d.mean(),
        fitted.join(", ")
    ))
}

pub fn noise(cfg: &RunConfig, out: &Path, with_plot: bool) -> Result<String> {
    let heights = element_heights(cfg.heights, cfg.detector.n_elements)?;
    let curve = excess_noise_curve(&heights);
    write_with(out, "noise.csv", |w| write_noise_csv(&curve, w))?;
    let top = curve
        .iter()
        .max_by(|a, b| a.fwhm.total_cmp(&b.fwhm))
        .expect("curve has n = 0");
    if with_plot {
        let pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.n as f64, p.fwhm)).collect();
        plot(
            out,
            "noise.svg",
            svg::line_plot(
                "Combinatorial excess noise",
                "n",
                "FWHM",
                &[Series {
                    label: "fwhm".into(),
                    points: &pts,
                }],
                Axes::default(),
            ),
        )?;
    }
    Ok(format!(
        "{} levels, maximum FWHM {:.4} at n = {}",
        curve.len(),
        top.fwhm,
        top.n
    ))
}

pub fn sweep(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    with_plot: bool,
) -> Result<(PowerSweepResult, String)> {
    let exp = experiment(cfg)?;
    let powers = cfg.sweep.resolved_powers();
    let result = run_power_sweep(
        &exp,
        &cfg.laser,
        &powers,
        cfg.sweep.shots,
        cfg.sweep.bins,
        seed,
    )?;
    write_with(out, "sweep.csv", |w| result.write_csv(w))?;
    write_with(out, "fired.csv", |w| {
        writeln!(w, "power_w,mu_bar,n,count")?;
        for ((p, mu), counts) in result
            .powers
            .iter()
            .zip(&result.mu_bars)
            .zip(&result.fired_counts)
        {
            for (n, c) in counts.iter().enumerate() {
                writeln!(w, "{p},{mu},{n},{c}")?;
            }
        }
        Ok(())
    })?;
    if with_plot {
        let rows: Vec<Vec<f64>> = result.histograms.iter().map(|h| h.counts.clone()).collect();
        plot(
            out,
            "sweep.svg",
            svg::heatmap(
                "Pulse-height histograms",
                "output voltage bin",
                "power index",
                &rows,
            ),
        )?;
    }
    let summary = format!(
        "{} powers × {} shots, level spacing {:.4e} V, superposition error {:.3}%",
        result.powers.len(),
        result.shots_per_power,
        result.level_spacing,
        100.0 * result.superposition_error
    );
    Ok((result, summary))
}

/// Rebuilds a sweep from its CSV; mean photon numbers and the level spacing
/// come from the config.
pub fn load_sweep(cfg: &RunConfig, input: &Path) -> Result<PowerSweepResult> {
    let (powers, histograms) = read_sweep_csv(input)?;
    let totals: Vec<f64> = histograms.iter().map(|h| h.total()).collect();
    if totals.iter().any(|&t| t != totals[0]) {
        bail!(
            "{}: every power must hold the same number of shots",
            input.display()
        );
    }
    let exp = experiment(cfg)?;
    Ok(PowerSweepResult {
        mu_bars: powers
            .iter()
            .map(|&p| photons_per_pulse(&cfg.laser.with_power(p)))
            .collect(),
        powers,
        histograms,
        fired_counts: Vec::new(),
        shots_per_power: totals[0] as usize,
        seed: 0,
        level_spacing: exp.level_spacing(),
        superposition_error: exp.superposition_error(),
    })
}

fn mixture_options(cfg: &RunConfig) -> MixtureOptions {
    MixtureOptions {
        max_peaks: cfg.analysis.max_peaks,
        ..MixtureOptions::default()
    }
}

pub fn analyze(
    cfg: &RunConfig,
    sweep: &PowerSweepResult,
    out: &Path,
    with_plot: bool,
) -> Result<String> {
    let n = cfg.detector.n_elements;
    let analysis = analyze_sweep(sweep, &mixture_options(cfg));
    write_with(out, "peaks.csv", |w| write_peaks_csv(&analysis, w))?;
    let probs = analysis.probabilities(n);
    write_with(out, "probabilities.csv", |w| {
        write_probabilities_csv(&sweep.powers, &probs, w)
    })?;
    let etas = fit_sweep_efficiency(&analysis, &sweep.mu_bars, n)?;
    write_with(out, "efficiency.csv", |w| {
        writeln!(w, "power_w,mu_bar,eta,residual,degenerate")?;
        for ((p, mu), f) in sweep.powers.iter().zip(&sweep.mu_bars).zip(&etas) {
            writeln!(w, "{p},{mu},{},{},{}", f.eta, f.residual, f.degenerate)?;
        }
        Ok(())
    })?;
    let table = noise_curves(
        &analysis.fits,
        &sweep.powers,
        n,
        cfg.analysis.noise_min_area,
    );
    write_with(out, "noise_vn.csv", |w| table.write_csv(w))?;
    write_with(out, "levels.csv", |w| {
        writeln!(w, "n,center_v")?;
        for (k, c) in analysis.ladder.iter().enumerate() {
            if let Some(c) = c {
                writeln!(w, "{k},{c}")?;
            }
        }
        Ok(())
    })?;
    let linearity = level_linearity(&analysis);
    if let Some(fit) = &linearity {
        write_with(out, "linearity.csv", |w| {
            writeln!(w, "a_v,alpha,r_squared")?;
            writeln!(w, "{},{},{}", fit.a, fit.alpha, fit.r_squared)
        })?;
    }
    write_with(out, "report.txt", |w| {
        for (p, f) in sweep.powers.iter().zip(&analysis.fits) {
            writeln!(w, "power_w = {p}")?;
            write!(w, "{}", f.report())?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    if with_plot {
        let curves: Vec<(usize, Vec<(f64, f64)>)> = (1..=n.min(4))
            .map(|k| {
                (
                    k,
                    sweep
                        .powers
                        .iter()
                        .zip(&probs)
                        .map(|(&p, row)| (p, row[k]))
                        .collect(),
                )
            })
            .collect();
        let s: Vec<Series> = curves
            .iter()
            .map(|(k, pts)| Series {
                label: format!("P({k})"),
                points: pts,
            })
            .collect();
        plot(
            out,
            "probabilities.svg",
            svg::line_plot(
                "Extracted P(n)",
                "power (W)",
                "P(n)",
                &s,
                Axes {
                    log_x: true,
                    log_y: true,
                },
            ),
        )?;
    }
    let mut summary = format!(
        "{} powers, {} distinct levels",
        sweep.powers.len(),
        analysis.distinct_levels()
    );
    if let Some(fit) = linearity {
        summary.push_str(&format!(
            ", level heights H = {:.4e}·n^{:.4}",
            fit.a, fit.alpha
        ));
    }
    Ok(summary)
}

/// Power law through the level centers above the zero level.
fn level_linearity(analysis: &SweepAnalysis) -> Option<snd_core::analysis::PowerLawFit> {
    let zero = analysis.ladder.first().copied().flatten()?;
    let pts: Vec<(f64, f64)> = analysis
        .ladder
        .iter()
        .enumerate()
        .skip(1)
        .filter_map(|(k, c)| c.map(|c| (k as f64, c - zero)))
        .filter(|(_, h)| *h > 0.0)
        .collect();
    fit_power_law(&pts).ok()
}

pub fn count_rate(
    cfg: &RunConfig,
    sweep: &PowerSweepResult,
    out: &Path,
    with_plot: bool,
) -> Result<String> {
    let n = cfg.detector.n_elements;
    let analysis = analyze_sweep(sweep, &mixture_options(cfg));
    let etas = fit_sweep_efficiency(&analysis, &sweep.mu_bars, n)?;
    let opts = CountRateOptions {
        rep_rate: cfg.laser.rep_rate,
        dcr: cfg.count_rate.dcr,
        subtract_dark: cfg.count_rate.subtract_dark,
        n_elements: n,
        etas: etas.iter().map(|f| f.eta).collect(),
        thresholds: cfg.count_rate.thresholds.clone(),
        min_counts: cfg.count_rate.min_counts,
    };
    let outcome = count_rate_analysis(sweep, &analysis, &opts)?;
    write_with(out, "count_rate.csv", |w| {
        write_count_rate_csv(&outcome.curves, w)
    })?;
    write_with(out, "slopes.csv", |w| {
        writeln!(w, "threshold_n,slope")?;
        for c in &outcome.curves {
            match c.low_power_slope {
                Some(s) => writeln!(w, "{},{s}", c.threshold_label)?,
                None => writeln!(w, "{},", c.threshold_label)?,
            }
        }
        Ok(())
    })?;
    let coupling = cfg
        .beam
        .coupling_override
        .unwrap_or_else(|| aperture_fraction(&cfg.beam));
    if let Some(c1) = outcome.curves.iter().find(|c| c.threshold_label == 1) {
        write_with(out, "dqe.csv", |w| {
            writeln!(w, "power_w,incident_rate_hz,count_rate_hz,dqe,clamped")?;
            for ((p, mu), r) in c1.powers.iter().zip(&sweep.mu_bars).zip(&c1.rates) {
                let incident = mu * cfg.laser.rep_rate * coupling;
                match dqe(*r, incident) {
                    Ok(d) => writeln!(w, "{p},{incident},{r},{},{}", d.value, d.clamped)?,
                    Err(_) => writeln!(w, "{p},{incident},{r},,")?,
                }
            }
            Ok(())
        })?;
    }
    if with_plot {
        let pts: Vec<Vec<(f64, f64)>> = outcome
            .curves
            .iter()
            .map(|c| {
                c.powers
                    .iter()
                    .copied()
                    .zip(c.rates.iter().copied())
                    .collect()
            })
            .collect();
        let s: Vec<Series> = outcome
            .curves
            .iter()
            .zip(&pts)
            .map(|(c, p)| Series {
                label: format!("≥{}", c.threshold_label),
                points: p,
            })
            .collect();
        plot(
            out,
            "count_rate.svg",
            svg::line_plot(
                "Count rate",
                "power (W)",
                "rate (Hz)",
                &s,
                Axes {
                    log_x: true,
                    log_y: true,
                },
            ),
        )?;
    }
    let mut lines: Vec<String> = outcome
        .curves
        .iter()
        .map(|c| match c.low_power_slope {
            Some(s) => format!("≥{}: slope {s:.3}", c.threshold_label),
            None => format!("≥{}: no slope", c.threshold_label),
        })
        .collect();
    if !cfg.count_rate.dqe_vs_bias.is_empty() {
        let table = DqeTable::new(cfg.count_rate.dqe_vs_bias.clone())?;
        write_with(out, "dqe_vs_bias.csv", |w| {
            writeln!(w, "i_bias_a,dqe")?;
            for p in table.points() {
                writeln!(w, "{},{}", p.i_bias, p.dqe)?;
            }
            Ok(())
        })?;
        let i_b = cfg.detector.i_bias;
        let peak = table.peak();
        lines.push(match table.at(i_b) {
            Some(d) => format!("DQE at I_B = {i_b:e} A: {d:.4e}"),
            None => format!("I_B = {i_b:e} A is outside the DQE table"),
        });
        lines.push(format!("peak DQE {:.4e} at {:e} A", peak.dqe, peak.i_bias));
    }
    lines.extend(outcome.notices.iter().map(|s| format!("note: {s}")));
    Ok(lines.join("\n"))
}

pub fn calibrate(cfg: &RunConfig, tau: f64, out: &Path, with_plot: bool) -> Result<String> {
    let cal = calibrate_inductance(&cfg.detector, tau, DEFAULT_DT)?;
    write_with(out, "calibration.csv", |w| {
        writeln!(w, "l_element_h,fall_time_s,iterations")?;
        writeln!(w, "{},{},{}", cal.l_element, cal.fall_time, cal.iterations)
    })?;
    let det = cfg.detector.with_inductance(cal.l_element);
    let heights = pulse_heights(&det, DEFAULT_T_END, DEFAULT_DT)?;
    write_with(out, "pulse_heights.csv", |w| {
        writeln!(w, "n,height_v")?;
        heights
            .iter()
            .enumerate()
            .try_for_each(|(k, h)| writeln!(w, "{},{h}", k + 1))
    })?;
    let pts: Vec<(f64, f64)> = heights
        .iter()
        .enumerate()
        .map(|(k, &h)| ((k + 1) as f64, h))
        .collect();
    let fit = fit_power_law(&pts)?;
    write_with(out, "linearity.csv", |w| {
        writeln!(w, "a_v,alpha,r_squared")?;
        writeln!(w, "{},{},{}", fit.a, fit.alpha, fit.r_squared)
    })?;
    if with_plot {
        plot(
            out,
            "pulse_heights.svg",
            svg::line_plot(
                "Pulse height",
                "n",
                "H (V)",
                &[Series {
                    label: "H(n)".into(),
                    points: &pts,
                }],
                Axes {
                    log_x: true,
                    log_y: true,
                },
            ),
        )?;
    }
    Ok(format!(
        "L_0 = {:.6e} H ({} iterations), fall time {:.5e} s, H = {:.4e}·n^{:.4}",
        cal.l_element, cal.iterations, cal.fall_time, fit.a, fit.alpha
    ))
}
