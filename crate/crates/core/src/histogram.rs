//! Fixed-width histograms.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Left edge of bin 0.
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn empty(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(bins > 0 && hi > lo, "histogram needs bins > 0 and hi > lo");
        Histogram {
            lo,
            bin_width: (hi - lo) / bins as f64,
            counts: vec![0.0; bins],
        }
    }

    pub fn from_samples(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut h = Self::empty(lo, hi, bins);
        for &x in samples {
            h.add(x, 1.0);
        }
        h
    }

    pub fn from_weighted(points: &[f64], weights: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut h = Self::empty(lo, hi, bins);
        for (&x, &w) in points.iter().zip(weights) {
            h.add(x, w);
        }
        h
    }

    /// Bin index for `x`; values outside the range are clamped to the end bins.
    pub fn index_of(&self, x: f64) -> usize {
        let idx = ((x - self.lo) / self.bin_width).floor();
        if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(self.counts.len() - 1)
        }
    }

    pub fn add(&mut self, x: f64, weight: f64) {
        let i = self.index_of(x);
        self.counts[i] += weight;
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.bin_width * self.counts.len() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|i| self.center(i)).collect()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Weighted mean and population standard deviation of bin centres.
    pub fn moments(&self) -> (f64, f64) {
        let total = self.total();
        if total <= 0.0 {
            return (f64::NAN, f64::NAN);
        }
        let mean = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| c * self.center(i))
            .sum::<f64>()
            / total;
        let var = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| c * (self.center(i) - mean).powi(2))
            .sum::<f64>()
            / total;
        (mean, var.sqrt())
    }

    /// Sum of counts in bins whose centre lies strictly above `threshold`.
    pub fn total_above(&self, threshold: f64) -> f64 {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| self.center(*i) > threshold)
            .map(|(_, c)| c)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binning_and_clamping() {
        let h = Histogram::from_samples(&[-5.0, 0.0, 0.24, 0.25, 0.99, 1.0, 7.0], 0.0, 1.0, 4);
        assert_eq!(h.counts, vec![3.0, 1.0, 0.0, 3.0]);
        assert_eq!(h.total(), 7.0);
        assert!((h.center(1) - 0.375).abs() < 1e-15);
        assert!((h.hi() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn moments_of_symmetric_histogram() {
        let h = Histogram {
            lo: 0.0,
            bin_width: 1.0,
            counts: vec![1.0, 0.0, 1.0],
        };
        let (m, s) = h.moments();
        assert!((m - 1.5).abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(h.total_above(1.5), 1.0);
    }
}
