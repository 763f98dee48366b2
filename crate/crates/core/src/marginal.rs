//! One-dimensional posterior marginals: Gaussian mixtures from the
//! hyperparameter grid and empirical marginals from draws.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Anything that can report quantiles of a scalar posterior.
pub trait Quantiles {
    fn quantile(&self, p: f64) -> f64;

    fn median(&self) -> f64 {
        self.quantile(0.5)
    }
}

/// Weighted mixture of normals. A component with zero sd is a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMarginal {
    /// `(weight, mean, sd)` per component; weights sum to one.
    pub components: Vec<(f64, f64, f64)>,
}

impl MixtureMarginal {
    pub fn point_mass(value: f64) -> Self {
        Self {
            components: vec![(1.0, value, 0.0)],
        }
    }

    pub fn normal(mean: f64, sd: f64) -> Self {
        Self {
            components: vec![(1.0, mean, sd)],
        }
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|(w, m, _)| w * m).sum()
    }

    pub fn sd(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = self
            .components
            .iter()
            .map(|(w, m, s)| w * (s * s + m * m))
            .sum();
        (second - mean * mean).max(0.0).sqrt()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|&(w, m, s)| {
                let c = if s > 0.0 {
                    Normal::new(m, s).map(|n| n.cdf(x)).unwrap_or(0.5)
                } else if x >= m {
                    1.0
                } else {
                    0.0
                };
                w * c
            })
            .sum()
    }

    /// Probability that the quantity exceeds `threshold`.
    pub fn exceedance(&self, threshold: f64) -> f64 {
        (1.0 - self.cdf(threshold)).clamp(0.0, 1.0)
    }
}

impl Quantiles for MixtureMarginal {
    fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(1e-15, 1.0 - 1e-15);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &(_, m, s) in &self.components {
            lo = lo.min(m - 40.0 * s);
            hi = hi.max(m + 40.0 * s);
        }
        if lo == hi {
            return lo;
        }
        // Smallest x with cdf(x) >= p.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-14 * (1.0 + mid.abs()) {
                break;
            }
        }
        hi
    }
}

/// Empirical marginal from a sample, using linear interpolation between
/// order statistics (type 7).
#[derive(Debug, Clone)]
pub struct EmpiricalMarginal {
    sorted: Vec<f64>,
}

impl EmpiricalMarginal {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self { sorted: values }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }

    /// Fraction of values strictly above `threshold`.
    pub fn exceedance(&self, threshold: f64) -> f64 {
        let below = self.sorted.partition_point(|&v| v <= threshold);
        (self.sorted.len() - below) as f64 / self.sorted.len() as f64
    }
}

impl Quantiles for EmpiricalMarginal {
    fn quantile(&self, p: f64) -> f64 {
        empirical_quantile(&self.sorted, p)
    }
}

/// Type-7 quantile of already sorted data.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Weighted quantile of discrete support points, interpolating the
/// mid-point CDF. Used for hyperparameter summaries on the grid.
pub fn weighted_quantile(points: &[(f64, f64)], p: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|(_, w)| *w > 0.0).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.is_empty() {
        return f64::NAN;
    }
    if pts.len() == 1 {
        return pts[0].0;
    }
    let total: f64 = pts.iter().map(|x| x.1).sum();
    let mut acc = 0.0;
    let mids: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(x, w)| {
            let mid = (acc + 0.5 * w) / total;
            acc += w;
            (x, mid)
        })
        .collect();
    if p <= mids[0].1 {
        return mids[0].0;
    }
    for pair in mids.windows(2) {
        let ((x0, c0), (x1, c1)) = (pair[0], pair[1]);
        if p <= c1 {
            if c1 == c0 {
                return x1;
            }
            return x0 + (p - c0) / (c1 - c0) * (x1 - x0);
        }
    }
    mids[mids.len() - 1].0
}
