use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LogDensity, ModelTarget, OracleMethod, OracleResult, QuantitySummary, MAX_ORACLE_DIM};
use crate::error::{Error, Result};
use crate::marginal::empirical_quantile;
use crate::model::AssembledModel;

const TARGET_ACCEPTANCE: f64 = 0.234;
const FIRST_WINDOW: usize = 200;
const MIN_ESS: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Iterations per chain; the first half is adaptive burn-in.
    pub iterations: usize,
    pub chains: usize,
    pub seed: u64,
    /// Retained draws per chain after thinning.
    pub max_stored: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            chains: 4,
            seed: 1,
            max_stored: 10_000,
        }
    }
}

struct Chain {
    draws: Vec<Vec<f64>>,
    acceptance: f64,
}

fn diagonal_scales<T: LogDensity + ?Sized>(target: &T, v: &[f64]) -> Vec<f64> {
    let f0 = target.log_density(v);
    (0..v.len())
        .map(|i| {
            let h = 1e-3 * v[i].abs().max(1.0);
            let mut p = v.to_vec();
            p[i] += h;
            let mut m = v.to_vec();
            m[i] -= h;
            let c = -(target.log_density(&p) - 2.0 * f0 + target.log_density(&m)) / (h * h);
            if c.is_finite() && c > 1e-8 {
                1.0 / c.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

fn covariance(samples: &[Vec<f64>]) -> DMatrix<f64> {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov / (n - 1.0)
}

fn run_chain<T, F>(target: &T, map: &F, start: Vec<f64>, scales: &[f64], config: &McmcConfig, seed: u64) -> Chain
where
    T: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let d = start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let burn = config.iterations / 2;
    let post = config.iterations - burn;
    let thin = post.div_ceil(config.max_stored.max(1)).max(1);

    let mut x = start;
    // Dispersed starting points for the convergence diagnostic.
    for (xi, s) in x.iter_mut().zip(scales) {
        *xi += s * rng.sample::<f64, _>(StandardNormal);
    }
    let mut fx = target.log_density(&x);
    let base = 2.38 / (d as f64).sqrt();
    let mut chol = DMatrix::from_diagonal(&DVector::from_column_slice(scales));
    let mut log_scale = 0.0f64;
    let mut window: Vec<Vec<f64>> = Vec::new();
    let mut next_checkpoint = FIRST_WINDOW;
    let mut window_start = 0usize;
    let mut accepted_post = 0usize;
    let mut draws = Vec::with_capacity(post / thin + 1);

    for it in 0..config.iterations {
        let eps = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &chol * eps * (base * log_scale.exp());
        let y: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let fy = target.log_density(&y);
        let log_u: f64 = rng.random::<f64>().ln();
        let accept = fy.is_finite() && log_u < fy - fx;
        if accept {
            x = y;
            fx = fy;
        }
        if it < burn {
            let a = if accept { 1.0 } else { 0.0 };
            log_scale += (a - TARGET_ACCEPTANCE) / ((it - window_start + 1) as f64).powf(0.6);
            window.push(x.clone());
            if it + 1 == next_checkpoint && window.len() > 2 * d + 10 {
                let mut cov = covariance(&window);
                for i in 0..d {
                    cov[(i, i)] += 1e-12 * cov[(i, i)].max(1e-300) + 1e-14;
                }
                if let Some(c) = Cholesky::new(cov) {
                    chol = c.l();
                    log_scale = 0.0;
                }
                window.clear();
                window_start = it + 1;
                next_checkpoint *= 2;
            } else if it + 1 == next_checkpoint {
                next_checkpoint *= 2;
            }
        } else {
            if accept {
                accepted_post += 1;
            }
            if (it - burn).is_multiple_of(thin) {
                draws.push(map(&x));
            }
        }
    }
    Chain {
        draws,
        acceptance: accepted_post as f64 / post.max(1) as f64,
    }
}

/// ESS of one chain from autocorrelations summed in pairs until the first
/// negative pair.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return n as f64;
    }
    let rho = |k: usize| -> f64 {
        centered[..n - k].iter().zip(&centered[k..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * c0)
    };
    let mut sum = 0.0;
    let mut k = 0;
    while k + 1 < n {
        let pair = if k == 0 { 1.0 + rho(1) } else { rho(k) + rho(k + 1) };
        if pair < 0.0 {
            break;
        }
        sum += pair;
        k += 2;
    }
    // τ = 2 Σ pairs − 1
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    n as f64 / tau
}

/// Split-chain potential scale reduction factor.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .filter(|h| h.len() > 1)
        .collect();
    let m = halves.len() as f64;
    if halves.len() < 2 {
        return f64::NAN;
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return 1.0;
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Adaptive random-walk Metropolis on an arbitrary density. `map` turns a
/// state into the monitored quantities named by `names`.
pub fn mcmc_density<T, F>(target: &T, map: F, names: Vec<String>, start: &[f64], config: &McmcConfig) -> Result<OracleResult>
where
    T: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let d = target.dim();
    if d > MAX_ORACLE_DIM {
        return Err(Error::Dimension(format!("oracle limited to {MAX_ORACLE_DIM} dimensions, got {d}")));
    }
    if start.len() != d {
        return Err(Error::Dimension(format!("start has {} entries for a {d}-dimensional target", start.len())));
    }
    if config.chains == 0 || config.iterations < 2 * FIRST_WINDOW {
        return Err(Error::InvalidSpec("MCMC needs at least one chain and 400 iterations".into()));
    }
    if !target.log_density(start).is_finite() {
        return Err(Error::Numerical("log density is not finite at the starting point".into()));
    }
    let scales = diagonal_scales(target, start);
    let chains: Vec<Chain> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, &map, start.to_vec(), &scales, config, config.seed + c as u64))
        .collect();

    let n_q = names.len();
    let mut quantities = Vec::with_capacity(n_q);
    let mut warnings = Vec::new();
    for (j, name) in names.into_iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = chains.iter().map(|c| c.draws.iter().map(|d| d[j]).collect()).collect();
        let mut all: Vec<f64> = per_chain.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let ess: f64 = if sd > 0.0 {
            per_chain.iter().map(|c| effective_sample_size(c)).sum()
        } else {
            n
        };
        if ess < MIN_ESS {
            warnings.push(format!("effective sample size of {name} is {ess:.0}"));
        }
        all.sort_by(f64::total_cmp);
        quantities.push(QuantitySummary {
            name,
            mean,
            sd,
            mcse: sd / ess.sqrt(),
            ess,
            median: Some(empirical_quantile(&all, 0.5)),
            q025: Some(empirical_quantile(&all, 0.025)),
            q975: Some(empirical_quantile(&all, 0.975)),
            rhat: (sd > 0.0).then(|| split_rhat(&per_chain)),
        });
    }
    for w in &warnings {
        warn!("{w}");
    }
    let acceptance = chains.iter().map(|c| c.acceptance).collect();
    Ok(OracleResult {
        method: OracleMethod::Mcmc,
        quantities,
        draws: chains.into_iter().flat_map(|c| c.draws).collect(),
        acceptance,
        quadrature_error: None,
        warnings,
    })
}

/// MCMC over a model's free latent coordinates and θ (or at a fixed θ).
pub fn mcmc_sample_with(model: &AssembledModel, theta: Option<&[f64]>, config: &McmcConfig) -> Result<OracleResult> {
    let target = ModelTarget::new(model, theta);
    let start = target.crude_start();
    mcmc_density(&target, |v| target.quantities(v), target.names(), &start, config)
}

/// MCMC with four chains and default settings.
pub fn mcmc_sample(model: &AssembledModel, iterations: usize, seed: u64) -> Result<OracleResult> {
    mcmc_sample_with(
        model,
        None,
        &McmcConfig {
            iterations,
            seed,
            ..McmcConfig::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Gaussian {
        precision: DMatrix<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.precision.nrows()
        }
        fn log_density(&self, v: &[f64]) -> f64 {
            let x = DVector::from_column_slice(v);
            -0.5 * x.dot(&(&self.precision * &x))
        }
    }

    fn config(seed: u64) -> McmcConfig {
        McmcConfig {
            iterations: 40_000,
            seed,
            ..McmcConfig::default()
        }
    }

    #[test]
    fn standard_normal_mean() {
        let t = Gaussian {
            precision: DMatrix::identity(1, 1),
        };
        let r = mcmc_density(&t, |v| v.to_vec(), vec!["x".into()], &[0.0], &config(3)).unwrap();
        let q = &r.quantities[0];
        assert!(q.mean.abs() < 3.0 * q.mcse, "mean {} mcse {}", q.mean, q.mcse);
        assert!((q.sd - 1.0).abs() < 0.05);
        assert!(q.rhat.unwrap() < 1.01);
    }

    #[test]
    fn correlated_pair() {
        let rho: f64 = 0.8;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let t = Gaussian {
            precision: cov.try_inverse().unwrap(),
        };
        let r = mcmc_density(&t, |v| v.to_vec(), vec!["a".into(), "b".into()], &[0.0, 0.0], &config(5)).unwrap();
        let n = r.draws.len() as f64;
        let (ma, mb) = (r.quantities[0].mean, r.quantities[1].mean);
        let c: f64 = r.draws.iter().map(|d| (d[0] - ma) * (d[1] - mb)).sum::<f64>() / (n - 1.0);
        let corr = c / (r.quantities[0].sd * r.quantities[1].sd);
        assert!((corr - rho).abs() < 0.05, "correlation {corr}");
    }

    #[test]
    fn ess_of_independent_draws_is_close_to_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..4000).map(|_| rng.sample(StandardNormal)).collect();
        let ess = effective_sample_size(&xs);
        assert!(ess > 3000.0 && ess < 5500.0, "{ess}");
    }

    #[test]
    fn ess_of_ar1_matches_theory() {
        let phi = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut x = 0.0;
        let xs: Vec<f64> = (0..200_000)
            .map(|_| {
                x = phi * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        let expected = 200_000.0 * (1.0 - phi) / (1.0 + phi);
        let ess = effective_sample_size(&xs);
        assert!((ess / expected - 1.0).abs() < 0.15, "{ess} vs {expected}");
    }

    #[test]
    fn rhat_detects_separated_chains() {
        let a: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 5.0).collect();
        assert!(split_rhat(&[a.clone(), b]) > 1.5);
        assert!(split_rhat(&[a.clone(), a]) < 1.05);
    }

    #[test]
    fn dimension_guard() {
        let t = Gaussian {
            precision: DMatrix::identity(201, 201),
        };
        let start = vec![0.0; 201];
        assert!(mcmc_density(&t, |v| v.to_vec(), Vec::new(), &start, &config(1)).is_err());
    }
}
