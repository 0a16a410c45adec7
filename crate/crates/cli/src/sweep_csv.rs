//! Reads the long-form sweep CSV back into histograms.

use std::path::Path;

use anyhow::{bail, Context, Result};
use snd_core::histogram::Histogram;

#[derive(Debug, serde::Deserialize)]
struct Row {
    power_w: f64,
    bin_center_v: f64,
    count: f64,
}

/// Histograms per power, in file order. Powers must appear as contiguous blocks
/// on one shared, uniform binning.
pub fn read_sweep_csv(path: &Path) -> Result<(Vec<f64>, Vec<Histogram>)> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open sweep CSV {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["power_w", "bin_center_v", "count"] {
        bail!(
            "{}: expected header power_w,bin_center_v,count",
            path.display()
        );
    }
    let mut blocks: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.with_context(|| format!("{}: bad record {}", path.display(), i + 2))?;
        match blocks.last_mut() {
            Some((p, centers, counts)) if *p == row.power_w => {
                centers.push(row.bin_center_v);
                counts.push(row.count);
            }
            _ => {
                if blocks.iter().any(|b| b.0 == row.power_w) {
                    bail!(
                        "{}: power {} appears in more than one block",
                        path.display(),
                        row.power_w
                    );
                }
                blocks.push((row.power_w, vec![row.bin_center_v], vec![row.count]));
            }
        }
    }
    let Some((_, centers, _)) = blocks.first() else {
        bail!("{}: no data rows", path.display())
    };
    let bins = centers.len();
    if bins < 2 {
        bail!("{}: need at least two bins per power", path.display());
    }
    let width = (centers[bins - 1] - centers[0]) / (bins - 1) as f64;
    if !(width > 0.0) {
        bail!("{}: bin centers must increase", path.display());
    }
    let (lo, hi) = (centers[0] - 0.5 * width, centers[bins - 1] + 0.5 * width);
    let mut powers = Vec::with_capacity(blocks.len());
    let mut hists = Vec::with_capacity(blocks.len());
    for (p, c, counts) in blocks {
        if c.len() != bins
            || c.iter()
                .zip(centers_of(lo, width, bins))
                .any(|(a, b)| (a - b).abs() > 1e-6 * width)
        {
            bail!("{}: power {p} uses a different binning", path.display());
        }
        let mut h = Histogram::empty(lo, hi, bins);
        h.counts = counts;
        powers.push(p);
        hists.push(h);
    }
    Ok((powers, hists))
}

fn centers_of(lo: f64, width: f64, bins: usize) -> impl Iterator<Item = f64> {
    (0..bins).map(move |i| lo + (i as f64 + 0.5) * width)
}
