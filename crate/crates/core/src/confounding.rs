//! Simplified spatial+ decorrelation of covariates and rate-ratio
//! back-transformation of standardized coefficients.
//!
//! A covariate `X` is expanded in the eigenvectors `U_1..U_n` of the
//! structure matrix of the random effect it may be confounded with
//! (eigenvalues descending). The trailing, smoothest eigenvectors carry the
//! large-scale component `Z*`; the model uses the residual `Z = X - Z*`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginal::Quantiles;
use crate::structure::EigenSystem;

/// Fraction of eigenvectors that may be assigned to the large-scale part.
pub const MAX_REMOVED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Spatial,
    Temporal,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Spatial => "spatial",
            Axis::Temporal => "temporal",
        })
    }
}

/// How many trailing eigenvectors a given `k` removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalCount {
    /// `U_{n-k}, …, U_n`: k+1 vectors, null vector included.
    #[default]
    IndexRange,
    /// Exactly `k` vectors.
    Exact,
}

impl RemovalCount {
    pub fn removed(self, k: usize) -> usize {
        match self {
            RemovalCount::IndexRange => k + 1,
            RemovalCount::Exact => k,
        }
    }
}

/// Largest admissible `k` for an axis of length `n`.
pub fn max_k(n: usize) -> usize {
    (MAX_REMOVED_FRACTION * n as f64 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateVector {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub standardized: bool,
    pub center: f64,
    pub scale: f64,
}

impl CovariateVector {
    pub fn raw(axis: Axis, values: Vec<f64>) -> Self {
        Self {
            axis,
            values,
            standardized: false,
            center: 0.0,
            scale: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn mean_and_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// `(x - mean) / sd` with the sample (n − 1) standard deviation.
pub fn standardize_covariate(axis: Axis, x: &[f64]) -> Result<CovariateVector> {
    if x.len() < 2 {
        return Err(Error::Data("covariate needs at least two values".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("covariate contains non-finite values".into()));
    }
    let (center, scale) = mean_and_sd(x);
    if scale <= 1e-12 * center.abs().max(1.0) {
        return Err(Error::Data("cannot standardize a constant covariate".into()));
    }
    Ok(CovariateVector {
        axis,
        values: x.iter().map(|v| (v - center) / scale).collect(),
        standardized: true,
        center,
        scale,
    })
}

#[derive(Debug, Clone)]
pub struct DecorrelatedCovariate {
    pub axis: Axis,
    /// Residual component used in the regression.
    pub z: DVector<f64>,
    /// Removed large-scale component `Z*`.
    pub z_star: DVector<f64>,
    /// Removed eigenvectors as columns, smallest eigenvalue last.
    pub removed_span: DMatrix<f64>,
    pub k: usize,
    pub removal: RemovalCount,
    /// Expansion coefficients `a_i = ⟨X, U_i⟩` for all eigenvectors.
    pub coefficients: DVector<f64>,
}

impl DecorrelatedCovariate {
    pub fn n_removed(&self) -> usize {
        self.removed_span.ncols()
    }

    /// `‖Z*‖²`.
    pub fn removed_energy(&self) -> f64 {
        self.z_star.norm_squared()
    }

    pub fn retained_energy(&self) -> f64 {
        self.z.norm_squared()
    }
}

/// Removes the projection of `x` on the trailing eigenvectors of `eig`.
pub fn decorrelate_covariate(
    x: &CovariateVector,
    eig: &EigenSystem,
    axis: Axis,
    k: usize,
    removal: RemovalCount,
) -> Result<DecorrelatedCovariate> {
    if x.axis != axis {
        return Err(Error::Dimension(format!(
            "{} covariate cannot be decorrelated against a {} structure",
            x.axis, axis
        )));
    }
    let n = eig.dim();
    if x.len() != n {
        return Err(Error::Dimension(format!(
            "covariate has {} values but the {axis} structure has dimension {n}",
            x.len()
        )));
    }
    if k > max_k(n) {
        return Err(Error::InvalidSpec(format!(
            "k = {k} exceeds the cap of {} for an axis of length {n}",
            max_k(n)
        )));
    }
    let m = removal.removed(k);
    if m > n {
        return Err(Error::InvalidSpec(format!("cannot remove {m} of {n} eigenvectors")));
    }
    let xv = DVector::from_column_slice(&x.values);
    let coefficients = eig.vectors.transpose() * &xv;
    let removed_span = eig.vectors.columns(n - m, m).into_owned();
    let z_star = &removed_span * coefficients.rows(n - m, m);
    let z = &xv - &z_star;
    Ok(DecorrelatedCovariate {
        axis,
        z,
        z_star,
        removed_span,
        k,
        removal,
        coefficients,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRatioSummary {
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

/// Rate ratio for a change of `delta` original units in a covariate that
/// entered the model standardized with sd `scale`. Quantiles map through the
/// monotone transform `exp(β · delta / scale)`.
pub fn rate_ratio(beta: &impl Quantiles, scale: f64, delta: f64) -> Result<RateRatioSummary> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Data(format!("covariate scale must be positive, got {scale}")));
    }
    let f = |q: f64| (q * delta / scale).exp();
    let (lo, hi) = (beta.quantile(0.025), beta.quantile(0.975));
    let (lower, upper) = if delta >= 0.0 { (f(lo), f(hi)) } else { (f(hi), f(lo)) };
    Ok(RateRatioSummary {
        lower,
        median: f(beta.quantile(0.5)),
        upper,
    })
}
