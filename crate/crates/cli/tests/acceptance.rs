//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --release -p snd-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use snd_cli::commands;
use snd_cli::config::{parse_config, RunConfig, PAPER12};
use snd_core::analysis::{
    analyze_sweep, count_rate_analysis, fit_gaussian_mixture_with, fit_power_law,
    fit_sweep_efficiency, noise_curves, CountRateOptions, MixtureOptions,
};
use snd_core::circuit::{
    calibrate_inductance, fall_time, pulse_heights, simulate_transient, FiringPattern, DEFAULT_DT,
    DEFAULT_T_END,
};
use snd_core::experiment::{run_power_sweep, HeightJitter, VirtualExperiment};
use snd_core::histogram::Histogram;
use snd_core::noisemodel::{
    element_heights, excess_noise_curve, subset_sum_distribution, HeightProfile,
};
use snd_core::photonstats::{
    click_distribution, click_distribution_alternating, exact_click_distribution, fit_efficiency,
    mc_click_distribution, ElementEfficiencies,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bundled() -> RunConfig {
    parse_config(PAPER12).expect("bundled config is valid")
}

fn etas() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

const MUS: [f64; 8] = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0];

fn within_budget(elapsed: Duration, budget_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < budget_s, format!("{s:.1} s < {budget_s} s"))
}

/// Binomial vs alternating form on the full grid; both vs 10⁶-trial Monte Carlo
/// (3σ per bin) on a subset of the grid that fits the runtime budget.
fn c1_click_statistics() -> Outcome {
    let start = Instant::now();
    let mut worst_forms = 0.0f64;
    for n in [1, 4, 12] {
        for &eta in &etas() {
            for &mu in &MUS {
                let b = click_distribution(n, eta, mu).unwrap();
                let a = click_distribution_alternating(n, eta, mu).unwrap();
                worst_forms = a
                    .iter()
                    .zip(&b.probs)
                    .map(|(x, y)| (x - y).abs())
                    .fold(worst_forms, f64::max);
            }
        }
    }
    const TRIALS: usize = 1_000_000;
    let mut worst_z = 0.0f64;
    let (mut bins, mut beyond) = (0usize, 0usize);
    let mut points = 0;
    let mut seed = 100;
    for n in [1, 4, 12] {
        for eta in [0.1, 0.5, 1.0] {
            for mu in [0.1, 1.0, 5.0, 20.0, 50.0] {
                seed += 1;
                points += 1;
                let b = click_distribution(n, eta, mu).unwrap();
                let m = mc_click_distribution(
                    &ElementEfficiencies::uniform(n, eta).unwrap(),
                    mu,
                    TRIALS,
                    seed,
                )
                .unwrap();
                for (p, q) in b.probs.iter().zip(&m.probs) {
                    let sigma = (p * (1.0 - p) / TRIALS as f64).sqrt();
                    let z = if sigma > 0.0 {
                        (q - p).abs() / sigma
                    } else if q == p {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                    worst_z = worst_z.max(z);
                    bins += 1;
                    beyond += usize::from(z > 3.0);
                }
            }
        }
    }
    let (fast, budget) = within_budget(start.elapsed(), 30.0);
    outcome(
        worst_forms < 1e-9 && worst_z <= 3.0 && fast,
        format!(
            "max |binomial - alternating| = {worst_forms:.2e} (< 1e-9, 240 grid points); worst MC deviation {worst_z:.2} sigma (<= 3, {points} points x 1e6 trials); {beyond} of {bins} bins beyond 3 sigma ({:.2} expected by chance); {budget}",
            0.0027 * bins as f64
        ),
    )
}

fn c2_closed_form_and_normalization() -> Outcome {
    let mut worst_single = 0.0f64;
    let mut worst_sum = 0.0f64;
    for &eta in &etas() {
        for &mu in &MUS {
            let d = click_distribution(1, eta, mu).unwrap();
            worst_single = worst_single.max((d.probs[1] - (1.0 - (-eta * mu).exp())).abs());
            for n in 1..=12 {
                let d = click_distribution(n, eta, mu).unwrap();
                worst_sum = worst_sum.max((d.probs.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    outcome(
        worst_single <= 1e-12 && worst_sum <= 1e-10,
        format!("N=1: max |P(1) - (1 - e^-eta mu)| = {worst_single:.2e} (<= 1e-12); max |sum P - 1| = {worst_sum:.2e} (<= 1e-10, N = 1..12)"),
    )
}

/// Deepest relative dip of the first unfired element's current below `I_B`.
fn unfired_dips(cfg: &snd_core::circuit::SndConfig) -> Vec<f64> {
    (1..cfg.n_elements)
        .map(|n| {
            let t = simulate_transient(
                cfg,
                &FiringPattern::first_n(n, 0.0),
                DEFAULT_T_END,
                DEFAULT_DT,
            )
            .unwrap();
            t.max_relative_deviation(n, cfg.i_bias)
        })
        .collect()
}

fn c3_unfired_current() -> Outcome {
    let start = Instant::now();
    let det = bundled().detector;
    let high = unfired_dips(&det.with_load(1e6));
    let low = unfired_dips(&det.with_load(50.0));
    let high_max = high.iter().copied().fold(0.0, f64::max);
    let monotone = low.windows(2).all(|w| w[1] > w[0]);
    let (fast, budget) = within_budget(start.elapsed(), 10.0);
    outcome(
        high_max < 1e-3 && monotone && fast,
        format!(
            "R_L = 1 MOhm: max |I_uf - I_B|/I_B = {high_max:.2e} (< 1e-3); R_L = 50 Ohm dips n=1..11 {:.3} .. {:.3}, monotone: {monotone}; {budget}",
            low[0],
            low[low.len() - 1]
        ),
    )
}

fn c4_calibration() -> Outcome {
    let det = bundled().detector;
    let target = 11.3e-9;
    let cal = calibrate_inductance(&det, target, DEFAULT_DT).unwrap();
    let cfg = det.with_inductance(cal.l_element);
    let tau = fall_time(&cfg, DEFAULT_DT).unwrap().tau;
    let trace = simulate_transient(
        &cfg,
        &FiringPattern::first_n(12, 0.0),
        DEFAULT_T_END,
        DEFAULT_DT,
    )
    .unwrap();
    let tail = trace.v_out_at(33e-9) / trace.peak_voltage();
    let rel = (tau / target - 1.0).abs();
    outcome(
        rel <= 0.01 && tail < 0.10,
        format!(
            "L_0 = {:.4} nH, re-simulated fall time {:.4} ns ({:.3}% off, <= 1%); v_out(33 ns)/peak = {:.3} (< 0.10)",
            cal.l_element * 1e9,
            tau * 1e9,
            100.0 * rel,
            tail
        ),
    )
}

fn c5_linearity() -> Outcome {
    let heights = pulse_heights(&bundled().detector, DEFAULT_T_END, DEFAULT_DT).unwrap();
    let pts: Vec<(f64, f64)> = heights
        .iter()
        .enumerate()
        .map(|(k, &h)| ((k + 1) as f64, h))
        .collect();
    let fit = fit_power_law(&pts).unwrap();
    outcome(
        (fit.alpha - 0.98).abs() <= 0.03,
        format!("alpha = {:.4} (0.98 +- 0.03)", fit.alpha),
    )
}

fn c6_noise_model() -> Outcome {
    let start = Instant::now();
    let heights = element_heights(
        HeightProfile {
            center: 1.0,
            fwhm: 0.1,
        },
        12,
    )
    .unwrap();
    let curve = excess_noise_curve(&heights);
    let f: Vec<f64> = curve.iter().map(|p| p.fwhm).collect();
    let ends = f[0] == 0.0 && f[12] == 0.0;
    let argmax = (0..=12).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
    let sym = (1..12)
        .map(|n| (f[n] - f[12 - n]).abs() / f[n].max(f[12 - n]))
        .fold(0.0, f64::max);
    let s2 = heights.population_std().powi(2);
    let var_err = (0..=12)
        .map(|n| {
            let d = subset_sum_distribution(&heights, n).unwrap();
            (d.variance() - n as f64 * s2 * (12 - n) as f64 / 11.0).abs()
        })
        .fold(0.0, f64::max);
    let (fast, budget) = within_budget(start.elapsed(), 5.0);
    outcome(
        ends && argmax == 6 && sym <= 0.02 && var_err <= 1e-12 && fast,
        format!(
            "FWHM(0) = {}, FWHM(12) = {}; argmax n = {argmax}; max symmetry error {:.3}% (<= 2%); max variance error {var_err:.1e} (<= 1e-12); {budget}",
            f[0],
            f[12],
            100.0 * sym
        ),
    )
}

fn c7_end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = bundled();
    let exp = commands::experiment(&cfg).unwrap();
    let powers = cfg.sweep.resolved_powers();
    let sweep = run_power_sweep(&exp, &cfg.laser, &powers, 20_000, cfg.sweep.bins, 7).unwrap();
    let analysis = analyze_sweep(&sweep, &MixtureOptions::default());
    let probs = analysis.probabilities(12);
    let eff = cfg.efficiencies().unwrap();
    let worst = probs
        .iter()
        .zip(&sweep.mu_bars)
        .map(|(p, &mu)| {
            let exact = exact_click_distribution(&eff, mu);
            p.iter()
                .zip(&exact.probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let levels = analysis.distinct_levels();
    let (fast, budget) = within_budget(start.elapsed(), 300.0);
    outcome(
        powers.len() == 20 && levels >= 13 && worst <= 0.02 && fast,
        format!(
            "{} powers x 20000 shots: {levels} distinct levels (>= 13); max |P(n) - generating| = {worst:.4} (<= 0.02); {budget}",
            powers.len()
        ),
    )
}

/// Fitted η from 10⁶-trial Monte Carlo click data at each μ̄.
fn fitted_etas(eff: &ElementEfficiencies, mus: &[f64], seed: u64) -> Vec<f64> {
    mus.iter()
        .enumerate()
        .map(|(i, &mu)| {
            let m = mc_click_distribution(eff, mu, 1_000_000, seed + i as u64).unwrap();
            fit_efficiency(eff.len(), mu, &m.probs).unwrap().eta
        })
        .collect()
}

fn c8_eta_trend() -> Outcome {
    // One element ten times more efficient than the other eleven; Σ w = 0.5.
    let mut det = [0.1; 12];
    det[0] = 1.0;
    let total: f64 = det.iter().sum();
    let skewed =
        ElementEfficiencies::new(det.iter().map(|d| d / total).collect(), vec![0.5; 12]).unwrap();
    let mus: Vec<f64> = (0..11).map(|i| 1.7 * 1.7f64.powi(i)).collect();
    let eta = fitted_etas(&skewed, &mus, 800);
    let decreasing = eta.windows(2).all(|w| w[1] < w[0]);
    let tail = &eta[eta.len() - 3..];
    let tail_spread = (tail[0] - tail[2]) / tail[2];
    let drop = (eta[0] - tail[2]) / tail[2];
    let plateau = tail_spread <= 0.02 && drop >= 10.0 * tail_spread;

    let uniform = ElementEfficiencies::uniform(12, 0.5).unwrap();
    let umus: Vec<f64> = (0..10).map(|i| 0.2 * 1.85f64.powi(i)).collect();
    let ueta = fitted_etas(&uniform, &umus, 900);
    let worst_uniform = ueta
        .iter()
        .map(|e| (e / 0.5 - 1.0).abs())
        .fold(0.0, f64::max);
    let listed: Vec<String> = eta.iter().map(|e| format!("{e:.4}")).collect();
    outcome(
        decreasing && plateau && worst_uniform <= 0.05,
        format!(
            "non-uniform eta over mu {:.1}..{:.0}: [{}], strictly decreasing: {decreasing}, last-3 spread {:.2}% (<= 2%) after a {:.0}% drop; uniform: max |eta/0.5 - 1| = {:.2}% (<= 5%)",
            mus[0],
            mus[mus.len() - 1],
            listed.join(", "),
            100.0 * tail_spread,
            100.0 * drop,
            100.0 * worst_uniform
        ),
    )
}

fn quiet_bundled() -> RunConfig {
    let mut cfg = bundled();
    cfg.readout.noise_rms = Some(1.7e-5);
    cfg
}

fn c9_count_rate_slopes() -> Outcome {
    let start = Instant::now();
    let mut cfg = quiet_bundled();
    cfg.sweep.powers = None;
    cfg.sweep.power_min = 4e-11;
    cfg.sweep.power_max = 4e-9;
    cfg.sweep.steps = 24;
    let shots = 1_000_000;
    let exp = commands::experiment(&cfg).unwrap();
    let sweep = run_power_sweep(
        &exp,
        &cfg.laser,
        &cfg.sweep.resolved_powers(),
        shots,
        cfg.sweep.bins,
        9,
    )
    .unwrap();
    let analysis = analyze_sweep(&sweep, &MixtureOptions::default());
    let etas = fit_sweep_efficiency(&analysis, &sweep.mu_bars, 12).unwrap();
    let opts = CountRateOptions {
        rep_rate: cfg.laser.rep_rate,
        dcr: 0.0,
        subtract_dark: true,
        n_elements: 12,
        etas: etas.iter().map(|f| f.eta).collect(),
        thresholds: vec![1, 2, 3, 4],
        min_counts: 10.0,
    };
    let out = count_rate_analysis(&sweep, &analysis, &opts).unwrap();
    let mut ok = out.curves.len() == 4;
    let mut parts = Vec::new();
    for c in &out.curves {
        let n = c.threshold_label as f64;
        match c.low_power_slope {
            Some(s) => {
                ok &= (s / n - 1.0).abs() <= 0.15;
                parts.push(format!("n={}: {s:.3}", c.threshold_label));
            }
            None => {
                ok = false;
                parts.push(format!("n={}: none", c.threshold_label));
            }
        }
    }
    outcome(
        ok,
        format!(
            "slopes {} (each within +-15% of n; 25 powers x {shots} shots); {:.0} s",
            parts.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

/// V_N relative to the level spacing, per n, from one mixture fit per μ̄.
fn level_noise(exp: &VirtualExperiment, mus: &[f64], shots: usize) -> Vec<Vec<Option<f64>>> {
    let fits: Vec<_> = mus
        .iter()
        .enumerate()
        .map(|(i, &mu)| {
            let s: Vec<f64> = exp
                .run_shots(mu, shots, 10, i as u64)
                .iter()
                .map(|s| s.sample)
                .collect();
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let h = Histogram::from_samples(&s, lo, hi + 1e-9, 512);
            fit_gaussian_mixture_with(
                &h,
                &MixtureOptions {
                    spacing_hint: Some(exp.level_spacing()),
                    ..Default::default()
                },
            )
        })
        .collect();
    let table = noise_curves(&fits, mus, 12, 200.0);
    (0..mus.len())
        .map(|i| {
            table
                .vs_n(i)
                .iter()
                .map(|v| v.map(|v| v / exp.level_spacing()))
                .collect()
        })
        .collect()
}

fn c10_noise_trends() -> Outcome {
    let mut cfg = quiet_bundled();
    cfg.readout.noise_rms = Some(0.2 * 3.4e-5);
    cfg.heights = HeightProfile {
        center: 1.0,
        fwhm: 0.2,
    };
    let uniform = ElementEfficiencies::uniform(12, 0.5).unwrap();
    let build = |jitter: HeightJitter| {
        let heights = element_heights(cfg.heights, 12).unwrap();
        VirtualExperiment::new(
            &cfg.detector,
            uniform.clone(),
            &cfg.readout,
            &heights,
            jitter,
        )
        .unwrap()
    };
    let shots = 200_000;

    let flat = level_noise(&build(HeightJitter::default()), &[16.6], shots);
    let row = &flat[0];
    let seen: Vec<usize> = (0..=12).filter(|&n| row[n].is_some()).collect();
    let argmax = *seen
        .iter()
        .max_by(|&&a, &&b| row[a].unwrap().total_cmp(&row[b].unwrap()))
        .unwrap();
    let interior = argmax > seen[0] && argmax < seen[seen.len() - 1] && (4..=6).contains(&argmax);

    let mus = [12.0, 16.6, 22.0];
    let jit = level_noise(
        &build(HeightJitter {
            base: 0.0,
            per_photon: 0.003,
        }),
        &mus,
        shots,
    );
    let common: Vec<usize> = (0..=12)
        .filter(|&n| jit.iter().all(|r| r[n].is_some()))
        .collect();
    let rising = !common.is_empty()
        && common
            .iter()
            .all(|&n| jit.windows(2).all(|w| w[1][n].unwrap() > w[0][n].unwrap()));
    outcome(
        interior && rising,
        format!(
            "V_N(n) at mu = 16.6 peaks at n = {argmax} (interior, in 4..=6); with per-photon height jitter V_N rises with power for every n in {:?}: {rising}",
            common
        ),
    )
}

fn run_cli(args: &[&str]) {
    let mut argv = vec!["snd"];
    argv.extend_from_slice(args);
    assert_eq!(snd_cli::run_command(argv), 0, "snd {args:?} failed");
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let runs: [(&str, Vec<&str>); 4] = [
        (
            "sweep",
            vec![
                "sweep",
                "--seed",
                "7",
                "--shots",
                "3000",
                "--power-steps",
                "6",
            ],
        ),
        (
            "stats",
            vec![
                "stats", "--seed", "7", "--shots", "200000", "--eta", "0.4", "--mu", "3",
            ],
        ),
        (
            "count-rate",
            vec![
                "count-rate",
                "--seed",
                "7",
                "--shots",
                "3000",
                "--power-steps",
                "6",
            ],
        ),
        ("analyze", vec!["analyze"]),
    ];
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for rep in ["a", "b"] {
        for (name, args) in &runs {
            let out = tmp
                .path()
                .join(rep)
                .join(if *name == "analyze" { "sweep" } else { name });
            let out = out.to_str().unwrap().to_string();
            let mut argv = args.clone();
            argv.extend(["--out", out.as_str()]);
            run_cli(&argv);
        }
    }
    for name in ["sweep", "stats", "count-rate"] {
        let a = csv_files(&tmp.path().join("a").join(name));
        let b = csv_files(&tmp.path().join("b").join(name));
        if a.len() != b.len() {
            mismatched.push(format!("{name}: file sets differ"));
        }
        for ((fa, da), (_, db)) in a.iter().zip(&b) {
            compared += 1;
            if da != db {
                mismatched.push(format!("{name}/{fa}"));
            }
        }
    }
    outcome(
        mismatched.is_empty() && compared >= 10,
        format!("{compared} CSV files from sweep, stats --shots, count-rate and analyze compared byte-for-byte; mismatches: {mismatched:?}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        (
            "click statistics: closed forms and Monte Carlo",
            c1_click_statistics,
        ),
        (
            "N=1 closed form and normalization",
            c2_closed_form_and_normalization,
        ),
        ("unfired-element current vs load", c3_unfired_current),
        ("fall-time calibration and tail", c4_calibration),
        ("pulse-height linearity", c5_linearity),
        ("combinatorial excess noise", c6_noise_model),
        ("end-to-end sweep and mixture fitting", c7_end_to_end),
        ("fitted efficiency trend", c8_eta_trend),
        ("count-rate low-power slopes", c9_count_rate_slopes),
        ("level-noise trends", c10_noise_trends),
        ("determinism", c11_determinism),
    ];
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let o = run();
        println!(
            "{} {id:>2}. {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
