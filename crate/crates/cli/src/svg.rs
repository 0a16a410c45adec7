//! Minimal standalone SVG line and heatmap plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

#[derive(Debug, Clone, Copy, Default)]
pub struct Axes {
    pub log_x: bool,
    pub log_y: bool,
}

pub struct Series<'a> {
    pub label: String,
    pub points: &'a [(f64, f64)],
}

fn tf(v: f64, log: bool) -> Option<f64> {
    let v = if log {
        (v > 0.0).then(|| v.log10())?
    } else {
        v
    };
    v.is_finite().then_some(v)
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(s: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>
<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>
"#,
        W / 2.0,
        escape(title),
        W / 2.0,
        H - 15.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
}

fn tick_labels(s: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64), axes: Axes) {
    let fmt = |v: f64, log: bool| {
        if log {
            format!("{:.3e}", 10f64.powf(v))
        } else {
            format!("{v:.3e}")
        }
    };
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="{}" text-anchor="start">{}</text>"#,
        H - MARGIN + 16.0,
        fmt(x0, axes.log_x)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        W - MARGIN,
        H - MARGIN + 16.0,
        fmt(x1, axes.log_x)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        MARGIN - 4.0,
        H - MARGIN,
        fmt(y0, axes.log_y)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        MARGIN - 4.0,
        MARGIN + 10.0,
        fmt(y1, axes.log_y)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Polyline plot; points that cannot be shown on a log axis are skipped.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    axes: Axes,
) -> String {
    let shown: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter_map(|&(x, y)| Some((tf(x, axes.log_x)?, tf(y, axes.log_y)?)))
                .collect()
        })
        .collect();
    let xr = range(shown.iter().flatten().map(|p| p.0));
    let yr = range(shown.iter().flatten().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - xr.0) / (xr.1 - xr.0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - yr.0) / (yr.1 - yr.0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    header(&mut s, title, x_label, y_label);
    tick_labels(&mut s, xr, yr, axes);
    for (i, (pts, meta)) in shown.iter().zip(series).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN + 4.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            escape(&meta.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Rows of cells drawn bottom-up, shaded by `log(1 + value)`.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, rows: &[Vec<f64>]) -> String {
    let mut s = String::new();
    header(&mut s, title, x_label, y_label);
    let n_rows = rows.len().max(1);
    let n_cols = rows.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let vmax = rows.iter().flatten().fold(0.0f64, |a, &v| a.max(v.ln_1p()));
    let cw = (W - 2.0 * MARGIN) / n_cols as f64;
    let ch = (H - 2.0 * MARGIN) / n_rows as f64;
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            let level = if vmax > 0.0 { v.ln_1p() / vmax } else { 0.0 };
            let shade = (255.0 * (1.0 - level)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},255)"/>"#,
                MARGIN + c as f64 * cw,
                H - MARGIN - (r + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_is_wellformed() {
        let pts = [(1.0, 2.0), (10.0, 20.0), (0.0, 5.0)];
        let svg = line_plot(
            "t",
            "x",
            "y",
            &[Series {
                label: "a<b".into(),
                points: &pts,
            }],
            Axes {
                log_x: true,
                log_y: true,
            },
        );
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn heatmap_skips_empty_cells() {
        let svg = heatmap("h", "x", "y", &[vec![0.0, 1.0], vec![3.0, 0.0]]);
        assert_eq!(svg.matches("<rect").count(), 2 + 2);
    }
}
