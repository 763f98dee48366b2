use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LogDensity, ModelTarget, OracleMethod, OracleResult, QuantitySummary};
use crate::error::{Error, Result};
use crate::model::AssembledModel;

const MAX_GRID_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOracleConfig {
    /// Points per axis; odd so the half-resolution subgrid shares endpoints.
    pub points: usize,
    /// Half-width of the box in marginal standard deviations.
    pub half_width: f64,
}

impl Default for GridOracleConfig {
    fn default() -> Self {
        Self {
            points: 401,
            half_width: 8.0,
        }
    }
}

fn fd_gradient_hessian<T: LogDensity + ?Sized>(t: &T, v: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = v.len();
    let h: Vec<f64> = v.iter().map(|x| 1e-4 * x.abs().max(1.0)).collect();
    let f = |dv: &[(usize, f64)]| {
        let mut p = v.to_vec();
        for &(i, s) in dv {
            p[i] += s;
        }
        t.log_density(&p)
    };
    let f0 = f(&[]);
    let mut g = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let (fp, fm) = (f(&[(i, h[i])]), f(&[(i, -h[i])]));
        g[i] = (fp - fm) / (2.0 * h[i]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let v = (f(&[(i, h[i]), (j, h[j])]) - f(&[(i, h[i]), (j, -h[j])]) - f(&[(i, -h[i]), (j, h[j])])
                + f(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (g, hess)
}

/// Newton ascent with finite-difference derivatives; returns the mode and
/// the negative Hessian there.
fn locate_mode<T: LogDensity + ?Sized>(t: &T, start: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let mut x = start.to_vec();
    let mut fx = t.log_density(&x);
    for _ in 0..200 {
        let (g, h) = fd_gradient_hessian(t, &x);
        let neg = -h;
        let step = match neg.clone().cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone() * 1e-2,
        };
        let mut s = 1.0;
        let mut improved = false;
        for _ in 0..50 {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + s * b).collect();
            let fc = t.log_density(&cand);
            if fc >= fx {
                improved = fc > fx;
                x = cand;
                fx = fc;
                break;
            }
            s *= 0.5;
        }
        if !improved || step.amax() * s < 1e-10 {
            break;
        }
    }
    let (_, h) = fd_gradient_hessian(t, &x);
    let neg = -h;
    if neg.clone().cholesky().is_none() {
        return Err(Error::Numerical("oracle mode has a non-negative-definite curvature".into()));
    }
    Ok((x, neg))
}

#[derive(Clone)]
struct Sums {
    weight: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    coarse_weight: f64,
    coarse_first: Vec<f64>,
    coarse_second: Vec<f64>,
    axis: Vec<Vec<f64>>,
}

impl Sums {
    fn new(n_q: usize, dim: usize, points: usize) -> Self {
        Self {
            weight: 0.0,
            first: vec![0.0; n_q],
            second: vec![0.0; n_q],
            coarse_weight: 0.0,
            coarse_first: vec![0.0; n_q],
            coarse_second: vec![0.0; n_q],
            axis: vec![vec![0.0; points]; dim],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.weight += other.weight;
        self.coarse_weight += other.coarse_weight;
        for i in 0..self.first.len() {
            self.first[i] += other.first[i];
            self.second[i] += other.second[i];
            self.coarse_first[i] += other.coarse_first[i];
            self.coarse_second[i] += other.coarse_second[i];
        }
        for (a, b) in self.axis.iter_mut().zip(other.axis) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self
    }
}

fn trapezoid_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i + 1 == n {
        0.5
    } else {
        1.0
    }
}

/// Quantile from a density tabulated on an even grid, trapezoid CDF.
fn tabulated_quantile(xs: &[f64], dens: &[f64], p: f64) -> f64 {
    let mut cdf = vec![0.0; xs.len()];
    for i in 1..xs.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (xs[i] - xs[i - 1]);
    }
    let total = *cdf.last().unwrap();
    let target = p * total;
    let k = cdf.partition_point(|&c| c < target).clamp(1, xs.len() - 1);
    let (c0, c1) = (cdf[k - 1], cdf[k]);
    if c1 == c0 {
        return xs[k];
    }
    xs[k - 1] + (target - c0) / (c1 - c0) * (xs[k] - xs[k - 1])
}

/// Dense trapezoid quadrature of an at most three-dimensional density over
/// a ±`half_width`-sd box around its mode.
pub fn grid_posterior_density<T, F>(
    target: &T,
    map: F,
    names: Vec<String>,
    start: &[f64],
    config: &GridOracleConfig,
) -> Result<OracleResult>
where
    T: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let dim = target.dim();
    if dim == 0 || dim > MAX_GRID_DIM {
        return Err(Error::Dimension(format!(
            "grid oracle needs 1 to {MAX_GRID_DIM} free dimensions, got {dim}"
        )));
    }
    let n = config.points;
    if n < 5 || n.is_multiple_of(2) {
        return Err(Error::InvalidSpec("grid oracle needs an odd number of at least 5 points".into()));
    }
    let (mode, neg_hess) = locate_mode(target, start)?;
    let cov = neg_hess
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular curvature at the oracle mode".into()))?;
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            let half = config.half_width * cov[(i, i)].sqrt();
            (0..n)
                .map(|k| mode[i] - half + 2.0 * half * k as f64 / (n - 1) as f64)
                .collect()
        })
        .collect();
    let reference = target.log_density(&mode);
    let n_q = names.len();
    let total = n.pow(dim as u32);
    let sums = (0..total)
        .into_par_iter()
        .fold(
            || Sums::new(n_q, dim, n),
            |mut acc, flat| {
                let mut idx = [0usize; MAX_GRID_DIM];
                let mut rem = flat;
                for i in (0..dim).rev() {
                    idx[i] = rem % n;
                    rem /= n;
                }
                let point: Vec<f64> = (0..dim).map(|i| axes[i][idx[i]]).collect();
                let lw = target.log_density(&point) - reference;
                if !lw.is_finite() {
                    return acc;
                }
                let density = lw.exp();
                let w = density * (0..dim).map(|i| trapezoid_weight(idx[i], n)).product::<f64>();
                let q = map(&point);
                acc.weight += w;
                for j in 0..n_q {
                    acc.first[j] += w * q[j];
                    acc.second[j] += w * q[j] * q[j];
                }
                for i in 0..dim {
                    let other: f64 = (0..dim).filter(|&k| k != i).map(|k| trapezoid_weight(idx[k], n)).product();
                    acc.axis[i][idx[i]] += density * other;
                }
                if idx[..dim].iter().all(|k| k % 2 == 0) {
                    let m = n.div_ceil(2);
                    let cw = density * (0..dim).map(|i| trapezoid_weight(idx[i] / 2, m)).product::<f64>();
                    acc.coarse_weight += cw;
                    for j in 0..n_q {
                        acc.coarse_first[j] += cw * q[j];
                        acc.coarse_second[j] += cw * q[j] * q[j];
                    }
                }
                acc
            },
        )
        .reduce(|| Sums::new(n_q, dim, n), Sums::merge);
    if !(sums.weight > 0.0) {
        return Err(Error::Numerical("grid oracle found no posterior mass".into()));
    }
    let mut quadrature_error: f64 = 0.0;
    let quantities = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let mean = sums.first[j] / sums.weight;
            let var = (sums.second[j] / sums.weight - mean * mean).max(0.0);
            let cmean = sums.coarse_first[j] / sums.coarse_weight;
            let cvar = (sums.coarse_second[j] / sums.coarse_weight - cmean * cmean).max(0.0);
            quadrature_error = quadrature_error.max((mean - cmean).abs()).max((var.sqrt() - cvar.sqrt()).abs());
            // Quantiles are available when the quantity follows one axis.
            let (median, q025, q975) = if dim == 1 {
                let lo = map(&[axes[0][0]])[j];
                let hi = map(&[axes[0][n - 1]])[j];
                if hi != lo {
                    let xs: Vec<f64> = axes[0].iter().map(|&a| map(&[a])[j]).collect();
                    let (xs, dens): (Vec<f64>, Vec<f64>) = if hi > lo {
                        (xs, sums.axis[0].clone())
                    } else {
                        (xs.into_iter().rev().collect(), sums.axis[0].iter().rev().copied().collect())
                    };
                    (
                        Some(tabulated_quantile(&xs, &dens, 0.5)),
                        Some(tabulated_quantile(&xs, &dens, 0.025)),
                        Some(tabulated_quantile(&xs, &dens, 0.975)),
                    )
                } else {
                    (Some(lo), Some(lo), Some(lo))
                }
            } else {
                (None, None, None)
            };
            QuantitySummary {
                name,
                mean,
                sd: var.sqrt(),
                mcse: 0.0,
                ess: f64::INFINITY,
                median,
                q025,
                q975,
                rhat: None,
            }
        })
        .collect();
    Ok(OracleResult {
        method: OracleMethod::Grid,
        quantities,
        draws: Vec::new(),
        acceptance: Vec::new(),
        quadrature_error: Some(quadrature_error),
        warnings: Vec::new(),
    })
}

/// Quadrature posterior of a model's free coordinates, at a fixed θ when
/// given. Models without hyperparameters need no θ.
pub fn grid_posterior(model: &AssembledModel, theta: Option<&[f64]>, config: &GridOracleConfig) -> Result<OracleResult> {
    let target = ModelTarget::new(model, theta);
    let start = target.crude_start();
    grid_posterior_density(&target, |v| target.quantities(v), target.names(), &start, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Normal1 {
        mean: f64,
        sd: f64,
    }

    impl LogDensity for Normal1 {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, v: &[f64]) -> f64 {
            -0.5 * ((v[0] - self.mean) / self.sd).powi(2)
        }
    }

    #[test]
    fn gaussian_moments_and_quantiles() {
        let t = Normal1 { mean: 1.5, sd: 0.3 };
        let r = grid_posterior_density(&t, |v| v.to_vec(), vec!["x".into()], &[0.0], &GridOracleConfig::default()).unwrap();
        let q = &r.quantities[0];
        assert!((q.mean - 1.5).abs() < 1e-9);
        assert!((q.sd - 0.3).abs() < 1e-9);
        assert!((q.median.unwrap() - 1.5).abs() < 1e-4);
        assert!((q.q975.unwrap() - (1.5 + 1.959964 * 0.3)).abs() < 1e-3);
    }

    #[test]
    fn rejects_high_dimensions() {
        struct Flat4;
        impl LogDensity for Flat4 {
            fn dim(&self) -> usize {
                4
            }
            fn log_density(&self, _: &[f64]) -> f64 {
                0.0
            }
        }
        assert!(grid_posterior_density(&Flat4, |v| v.to_vec(), Vec::new(), &[0.0; 4], &GridOracleConfig::default()).is_err());
    }

    #[test]
    fn tabulated_quantile_uniform() {
        let xs: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let dens = vec![1.0; 11];
        assert!((tabulated_quantile(&xs, &dens, 0.25) - 0.25).abs() < 1e-12);
    }
}
