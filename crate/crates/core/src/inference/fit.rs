//! Integration over hyperparameters on a grid.
//!
//! The mode of `log p̃(θ | O)` is located by BFGS, the curvature there defines
//! standardized axes, and a regular grid along those axes carries the
//! posterior weights. Latent marginals are the weighted mixtures of the
//! per-point Gaussian approximations.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::criteria::DevianceDiagnostics;
use super::laplace::{
    find_mode, gaussian_approx_from, log_marginal_hyper_from, posterior_precision, GaussianApprox,
};
use crate::error::{Error, Result};
use crate::marginal::{weighted_quantile, MixtureMarginal};
use crate::model::AssembledModel;
use crate::structure::eigendecompose;

pub const DEFAULT_SEED: u64 = 20_100_101;

/// Grid construction and posterior-draw settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Spacing in standardized units along each curvature axis.
    pub step: f64,
    /// Minimum half-width of the grid in standardized units.
    pub half_width: f64,
    /// Axes extend past `half_width` (up to this) while the log density at
    /// the edge is within `extend_threshold` of the mode.
    pub max_half_width: f64,
    pub extend_threshold: f64,
    /// Grid points whose summed axis drops exceed this are skipped.
    pub prune_threshold: f64,
    /// Explicit per-dimension `(low, high)` ranges in log-precision; overrides
    /// the curvature-based grid when set.
    pub ranges: Option<Vec<(f64, f64)>>,
    /// Bound on |log τ| for the mode search.
    pub theta_bound: f64,
    pub theta_start: Option<Vec<f64>>,
    /// Draws used for DIC/WAIC diagnostics.
    pub n_draws: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            step: 0.75,
            half_width: 3.0,
            max_half_width: 10.0,
            extend_threshold: 8.0,
            prune_threshold: 12.0,
            ranges: None,
            theta_bound: 15.0,
            theta_start: None,
            n_draws: 1000,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub theta: Vec<f64>,
    pub log_marginal: f64,
    pub weight: f64,
    pub approx: GaussianApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSummary {
    pub name: String,
    pub mean_log_precision: f64,
    pub median_log_precision: f64,
    pub q025_log_precision: f64,
    pub q975_log_precision: f64,
    pub mean_precision: f64,
    pub median_precision: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_mode: Vec<f64>,
    pub points: Vec<GridPoint>,
    /// Mixture posterior mean of each latent coordinate.
    pub mean: DVector<f64>,
    /// Mixture posterior sd of each latent coordinate.
    pub sd: DVector<f64>,
    pub hyper: Vec<HyperSummary>,
    pub diagnostics: DevianceDiagnostics,
    pub config: GridConfig,
    pub warnings: Vec<String>,
}

/// Latent draws from the mixture approximation.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub latent: Vec<DVector<f64>>,
    pub seed: u64,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.latent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent.is_empty()
    }

    /// `n` copies of one latent vector.
    pub fn point_mass(x: DVector<f64>, n: usize) -> Self {
        Self {
            latent: vec![x; n],
            seed: 0,
        }
    }

    /// Values of latent coordinate `j` across draws.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.latent.iter().map(|x| x[j]).collect()
    }
}

impl FitResult {
    /// Assembles a fit from evaluated grid points: normalizes weights, forms
    /// mixture marginals and computes deviance diagnostics.
    pub fn from_points(
        model: &AssembledModel,
        theta_mode: Vec<f64>,
        evaluated: Vec<(Vec<f64>, GaussianApprox)>,
        config: GridConfig,
        mut warnings: Vec<String>,
    ) -> Result<Self> {
        if evaluated.is_empty() {
            return Err(Error::Numerical("every grid point failed".into()));
        }
        let max = evaluated
            .iter()
            .map(|(_, a)| a.log_marginal)
            .fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = evaluated.iter().map(|(_, a)| (a.log_marginal - max).exp()).collect();
        let total: f64 = raw.iter().sum();
        let points: Vec<GridPoint> = evaluated
            .into_iter()
            .zip(raw)
            .map(|((theta, approx), w)| GridPoint {
                theta,
                log_marginal: approx.log_marginal,
                weight: w / total,
                approx,
            })
            .collect();

        let n = model.n_latent();
        let mut mean = DVector::zeros(n);
        let mut second = DVector::zeros(n);
        for p in &points {
            mean.axpy(p.weight, &p.approx.mode, 1.0);
            let m2 = p.approx.mode.component_mul(&p.approx.mode)
                + p.approx.marginal_sd.component_mul(&p.approx.marginal_sd);
            second.axpy(p.weight, &m2, 1.0);
        }
        let sd = DVector::from_iterator(
            n,
            (0..n).map(|j| (second[j] - mean[j] * mean[j]).max(0.0).sqrt()),
        );

        let hyper = model
            .hyper_names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.theta[i], p.weight)).collect();
                let mean_log: f64 = pts.iter().map(|(t, w)| t * w).sum();
                let median_log = weighted_quantile(&pts, 0.5);
                HyperSummary {
                    name: name.clone(),
                    mean_log_precision: mean_log,
                    median_log_precision: median_log,
                    q025_log_precision: weighted_quantile(&pts, 0.025),
                    q975_log_precision: weighted_quantile(&pts, 0.975),
                    mean_precision: pts.iter().map(|(t, w)| t.exp() * w).sum(),
                    median_precision: median_log.exp(),
                }
            })
            .collect::<Vec<_>>();

        for (h, &t) in hyper.iter().zip(&theta_mode) {
            if t.abs() >= config.theta_bound - 1e-6 {
                warnings.push(format!(
                    "log-precision of {} reached the search bound ({t:.2}); the improper hyperprior may be driving the fit",
                    h.name
                ));
            }
        }

        let mut fit = Self {
            theta_mode,
            points,
            mean,
            sd,
            hyper,
            diagnostics: DevianceDiagnostics::default(),
            config,
            warnings,
        };
        let draws = fit.sample(model, fit.config.n_draws, fit.config.seed)?;
        fit.diagnostics = DevianceDiagnostics::from_draws(model, &draws, &fit.mean);
        for w in &fit.warnings {
            warn!("{w}");
        }
        Ok(fit)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.weight).collect()
    }

    /// Mixture marginal of latent coordinate `j`.
    pub fn marginal(&self, j: usize) -> MixtureMarginal {
        MixtureMarginal {
            components: self
                .points
                .iter()
                .filter(|p| p.weight > 0.0)
                .map(|p| (p.weight, p.approx.mode[j], p.approx.marginal_sd[j]))
                .collect(),
        }
    }

    /// Joint latent draws from the mixture: a grid point by weight, then a
    /// Gaussian draw from its approximation.
    pub fn sample(&self, model: &AssembledModel, n: usize, seed: u64) -> Result<PosteriorDraws> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cumulative: Vec<f64> = self
            .points
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p.weight;
                Some(*acc)
            })
            .collect();
        let d = model.n_free();
        let mut assignments: Vec<Vec<(usize, DVector<f64>)>> = vec![Vec::new(); self.points.len()];
        for draw in 0..n {
            let u: f64 = rng.random::<f64>() * cumulative.last().copied().unwrap_or(1.0);
            let k = cumulative.partition_point(|&c| c < u).min(self.points.len() - 1);
            let eps = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            assignments[k].push((draw, eps));
        }
        let pieces: Vec<Vec<(usize, DVector<f64>)>> = assignments
            .into_par_iter()
            .enumerate()
            .filter(|(_, a)| !a.is_empty())
            .map(|(k, a)| -> Result<Vec<(usize, DVector<f64>)>> {
                let p = &self.points[k];
                let h = posterior_precision(model, &p.theta, &p.approx.mode_free);
                let chol = Cholesky::new(h).ok_or_else(|| {
                    Error::Numerical("posterior precision lost definiteness while sampling".into())
                })?;
                let lt = chol.l().transpose();
                Ok(a
                    .into_iter()
                    .map(|(draw, eps)| {
                        let v = lt
                            .solve_upper_triangular(&eps)
                            .expect("Cholesky factor has a positive diagonal");
                        (draw, model.expand(&(&p.approx.mode_free + v)))
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut latent = vec![DVector::zeros(0); n];
        for (draw, x) in pieces.into_iter().flatten() {
            latent[draw] = x;
        }
        Ok(PosteriorDraws { latent, seed })
    }

    pub fn theta_grid(&self) -> Vec<(Vec<f64>, f64)> {
        self.points.iter().map(|p| (p.theta.clone(), p.weight)).collect()
    }
}

/// Bounded BFGS on the negative log marginal with central-difference
/// gradients.
/// Negative log marginal of θ that updates a warm-start latent mode.
type WarmObjective<'a> = dyn FnMut(&DVector<f64>, &mut Option<DVector<f64>>) -> f64 + 'a;

fn locate_mode(model: &AssembledModel, config: &GridConfig) -> Result<(Vec<f64>, DVector<f64>)> {
    let dim = model.n_hyper();
    let bound = config.theta_bound;
    let clamp = |t: &DVector<f64>| t.map(|v| v.clamp(-bound, bound));
    let mut warm = find_mode(model, &vec![0.0; dim], None).map(|m| m.z).ok();
    let mut eval = |t: &DVector<f64>, warm: &mut Option<DVector<f64>>| -> f64 {
        match log_marginal_hyper_from(model, t.as_slice(), warm.as_ref()) {
            Ok((v, z)) => {
                *warm = Some(z);
                -v
            }
            Err(_) => f64::INFINITY,
        }
    };
    let mut x = clamp(&DVector::from_vec(
        config.theta_start.clone().unwrap_or_else(|| vec![1.0; dim]),
    ));
    let mut f = eval(&x, &mut warm);
    if !f.is_finite() {
        return Err(Error::Numerical("log marginal undefined at the starting θ".into()));
    }
    let h = 1e-4;
    let grad = |x: &DVector<f64>, warm: &mut Option<DVector<f64>>, eval: &mut WarmObjective| {
        let mut g = DVector::zeros(dim);
        for i in 0..dim {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            g[i] = (eval(&xp, warm) - eval(&xm, warm)) / (2.0 * h);
        }
        g
    };
    let mut g = grad(&x, &mut warm, &mut eval);
    let mut inv_h = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..200 {
        // Projected gradient: ignore components pushing against an active bound.
        let pg_norm = (0..dim)
            .map(|i| {
                if (x[i] >= bound && g[i] < 0.0) || (x[i] <= -bound && g[i] > 0.0) {
                    0.0
                } else {
                    g[i]
                }
            })
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if pg_norm < 1e-5 {
            break;
        }
        let mut dir = -(&inv_h * &g);
        if dir.dot(&g) >= 0.0 {
            inv_h = DMatrix::identity(dim, dim);
            dir = -g.clone();
        }
        let max_step = dir.amax();
        if max_step > 2.0 {
            dir *= 2.0 / max_step;
        }
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let cand = clamp(&(&x + &dir * t));
            let fc = eval(&cand, &mut warm);
            if fc <= f + 1e-4 * g.dot(&(&cand - &x)) {
                next = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_)) = next else { break };
        let gn = grad(&xn, &mut warm, &mut eval);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(dim, dim);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            inv_h = &left * &inv_h * &right + &s * s.transpose() * rho;
        }
        let converged = (f - fn_).abs() < 1e-10 * f.abs().max(1.0) && s.amax() < 1e-7;
        x = xn;
        f = fn_;
        g = gn;
        if converged {
            break;
        }
    }
    let z = warm.unwrap_or_else(|| super::laplace::initial_point(model));
    Ok((x.iter().copied().collect(), z))
}

/// Hessian of the negative log marginal by central differences.
fn hessian(model: &AssembledModel, theta: &[f64], warm: &DVector<f64>) -> Result<DMatrix<f64>> {
    let dim = theta.len();
    let h = 0.02;
    let f = |t: &[f64]| -> Result<f64> { log_marginal_hyper_from(model, t, Some(warm)).map(|(v, _)| -v) };
    let f0 = f(theta)?;
    let mut hess = DMatrix::zeros(dim, dim);
    let shifted = |i: usize, di: f64, j: usize, dj: f64| {
        let mut t = theta.to_vec();
        t[i] += di;
        t[j] += dj;
        t
    };
    for i in 0..dim {
        let fp = f(&shifted(i, h, i, 0.0))?;
        let fm = f(&shifted(i, -h, i, 0.0))?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let fpp = f(&shifted(i, h, j, h))?;
            let fpm = f(&shifted(i, h, j, -h))?;
            let fmp = f(&shifted(i, -h, j, h))?;
            let fmm = f(&shifted(i, -h, j, -h))?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// Evaluates Gaussian approximations at each θ in parallel; failures are
/// dropped with a warning.
pub fn evaluate_grid(
    model: &AssembledModel,
    thetas: Vec<Vec<f64>>,
    warm: &DVector<f64>,
) -> (Vec<(Vec<f64>, GaussianApprox)>, Vec<String>) {
    let results: Vec<_> = thetas
        .into_par_iter()
        .map(|t| {
            let r = gaussian_approx_from(model, &t, Some(warm));
            (t, r)
        })
        .collect();
    let mut ok = Vec::new();
    let mut warnings = Vec::new();
    for (t, r) in results {
        match r {
            Ok(a) => ok.push((t, a)),
            Err(e) => warnings.push(format!("grid point θ = {t:?} dropped: {e}")),
        }
    }
    (ok, warnings)
}

/// Fits the model: θ mode, curvature-aligned grid, weights, mixtures and
/// deviance diagnostics.
pub fn fit_model(model: &AssembledModel, config: &GridConfig) -> Result<FitResult> {
    let dim = model.n_hyper();
    if dim == 0 {
        let ga = gaussian_approx_from(model, &[], None)?;
        return FitResult::from_points(model, Vec::new(), vec![(Vec::new(), ga)], config.clone(), Vec::new());
    }
    if !(config.step > 0.0) {
        return Err(Error::InvalidSpec("grid step must be positive".into()));
    }
    let (theta_mode, warm) = locate_mode(model, config)?;
    let mut warnings = Vec::new();

    let thetas: Vec<Vec<f64>> = if let Some(ranges) = &config.ranges {
        if ranges.len() != dim {
            return Err(Error::Dimension(format!("{} grid ranges for {dim} hyperparameters", ranges.len())));
        }
        let axes: Vec<Vec<f64>> = ranges
            .iter()
            .map(|&(lo, hi)| {
                let n = ((hi - lo) / config.step).round().max(0.0) as usize;
                (0..=n).map(|i| lo + i as f64 * config.step).collect()
            })
            .collect();
        cartesian(&axes)
    } else {
        let hess = hessian(model, &theta_mode, &warm)?;
        let eig = eigendecompose(&((&hess + hess.transpose()) * 0.5))?;
        // Flat or negative directions get a unit-scale axis.
        let sds: Vec<f64> = eig
            .values
            .iter()
            .map(|&v| if v > 1e-2 { 1.0 / v.sqrt() } else { 1.0 / 0.1f64.sqrt() })
            .collect();
        if eig.values.iter().any(|&v| v <= 1e-2) {
            warnings.push("log marginal of θ is nearly flat along some direction; grid axes were floored".into());
        }
        let to_theta = |zc: &[f64]| -> Vec<f64> {
            let mut t = DVector::from_column_slice(&theta_mode);
            for (k, &zk) in zc.iter().enumerate() {
                t.axpy(zk * sds[k], &eig.vectors.column(k).into_owned(), 1.0);
            }
            t.iter().copied().collect()
        };
        let mode_value = log_marginal_hyper_from(model, &theta_mode, Some(&warm))?.0;
        let drop_at = |zc: &[f64]| match log_marginal_hyper_from(model, &to_theta(zc), Some(&warm)) {
            Ok((v, _)) => (mode_value - v).max(0.0),
            Err(_) => f64::INFINITY,
        };
        let n_min = (config.half_width / config.step).round() as i64;
        let n_max = (config.max_half_width / config.step).round() as i64;
        // Per axis: (index, drop in log density from the mode).
        let mut axes: Vec<Vec<(i64, f64)>> = Vec::with_capacity(dim);
        for k in 0..dim {
            let mut axis = vec![(0i64, 0.0)];
            for sign in [-1i64, 1] {
                for i in 1..=n_max {
                    let mut zc = vec![0.0; dim];
                    zc[k] = (sign * i) as f64 * config.step;
                    let drop = drop_at(&zc);
                    if drop.is_finite() {
                        axis.push((sign * i, drop));
                    }
                    if !drop.is_finite() || (i >= n_min && drop >= config.extend_threshold) {
                        break;
                    }
                }
            }
            axis.sort_by_key(|&(i, _)| i);
            axes.push(axis);
        }
        let mut points: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 0.0)];
        for axis in &axes {
            points = points
                .iter()
                .flat_map(|(prefix, total)| {
                    axis.iter().filter_map(move |&(i, drop)| {
                        let t = total + drop;
                        (t <= config.prune_threshold).then(|| {
                            let mut p = prefix.clone();
                            p.push(i as f64 * config.step);
                            (p, t)
                        })
                    })
                })
                .collect();
        }
        points.iter().map(|(zc, _)| to_theta(zc)).collect()
    };
    let (evaluated, mut grid_warnings) = evaluate_grid(model, thetas, &warm);
    warnings.append(&mut grid_warnings);
    FitResult::from_points(model, theta_mode, evaluated, config.clone(), warnings)
}
