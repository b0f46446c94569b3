//! Normalized histograms of projection distances.

use std::io::Write;

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    /// Fraction of values per bin; sums to 1.
    pub masses: Vec<f64>,
}

impl Histogram {
    /// Bin `values` into `bins` equal-width bins over `range`, or over
    /// `[min, max]` of the data when no range is given. Values outside an
    /// explicit range are clamped into the end bins.
    pub fn new(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Self> {
        if values.is_empty() {
            bail!(InvalidArgument, "histogram of no values");
        }
        if bins == 0 {
            bail!(InvalidArgument, "histogram needs at least one bin");
        }
        if values.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "histogram values must be finite");
        }
        let (mut lo, mut hi) = range.unwrap_or_else(|| {
            values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
        });
        if !(lo <= hi) {
            bail!(InvalidArgument, "histogram range [{lo}, {hi}] is empty");
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let n = values.len() as f64;
        Ok(Self { edges, masses: counts.iter().map(|&c| c as f64 / n).collect() })
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "bin_left,bin_right,mass")?;
        for (i, m) in self.masses.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], m)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_values_fill_one_bin() {
        let h = Histogram::new(&[2.5; 7], 5, None).unwrap();
        assert_eq!(h.masses.iter().filter(|&&m| m > 0.0).count(), 1);
        assert_eq!(h.masses.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn two_groups_split_evenly() {
        let h = Histogram::new(&[0.1, 0.1, 0.9, 0.9], 2, Some((0.0, 1.0))).unwrap();
        assert_eq!(h.masses, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_rejected() {
        assert!(Histogram::new(&[], 3, None).is_err());
    }
}
