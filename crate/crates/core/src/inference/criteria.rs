//! Deviance-based model comparison.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::fit::PosteriorDraws;
use crate::error::{Error, Result};
use crate::model::AssembledModel;

/// Minimum number of draws for a WAIC estimate.
pub const MIN_WAIC_DRAWS: usize = 100;

/// Per-draw pointwise log-likelihoods of the observed cells plus the
/// deviance at the posterior mean.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DevianceDiagnostics {
    /// `pointwise[d][i]`: log-likelihood of observed cell `i` under draw `d`.
    pub pointwise: Vec<Vec<f64>>,
    pub deviance_at_mean: f64,
}

impl DevianceDiagnostics {
    pub fn from_draws(model: &AssembledModel, draws: &PosteriorDraws, mean: &DVector<f64>) -> Self {
        Self {
            pointwise: draws
                .latent
                .iter()
                .map(|x| model.pointwise_log_likelihood(x))
                .collect(),
            deviance_at_mean: model.deviance(mean),
        }
    }

    pub fn n_draws(&self) -> usize {
        self.pointwise.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
    pub p_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

/// `DIC = D̄ + p_D` with `p_D = D̄ − D(x̄)`.
pub fn compute_dic(diag: &DevianceDiagnostics) -> Result<Dic> {
    if diag.pointwise.is_empty() {
        return Err(Error::Numerical("DIC needs posterior draws".into()));
    }
    let mean_deviance = diag
        .pointwise
        .iter()
        .map(|ll| -2.0 * ll.iter().sum::<f64>())
        .sum::<f64>()
        / diag.n_draws() as f64;
    let p_d = mean_deviance - diag.deviance_at_mean;
    Ok(Dic {
        dic: mean_deviance + p_d,
        mean_deviance,
        deviance_at_mean: diag.deviance_at_mean,
        p_d,
    })
}

/// `WAIC = −2 (lppd − p_WAIC)` with the variance form of `p_WAIC`.
pub fn compute_waic(diag: &DevianceDiagnostics) -> Result<Waic> {
    let s = diag.n_draws();
    if s < MIN_WAIC_DRAWS {
        return Err(Error::Numerical(format!(
            "WAIC needs at least {MIN_WAIC_DRAWS} draws, got {s}"
        )));
    }
    let n_obs = diag.pointwise[0].len();
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    for i in 0..n_obs {
        let col: Vec<f64> = diag.pointwise.iter().map(|d| d[i]).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean_exp = col.iter().map(|v| (v - max).exp()).sum::<f64>() / s as f64;
        lppd += max + mean_exp.ln();
        let mean = col.iter().sum::<f64>() / s as f64;
        p_waic += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s as f64 - 1.0);
    }
    Ok(Waic {
        waic: -2.0 * (lppd - p_waic),
        lppd,
        p_waic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(rows: Vec<Vec<f64>>, at_mean: f64) -> DevianceDiagnostics {
        DevianceDiagnostics {
            pointwise: rows,
            deviance_at_mean: at_mean,
        }
    }

    #[test]
    fn dic_of_constant_draws_has_no_penalty() {
        let d = diag(vec![vec![-1.0, -2.0]; 10], 6.0);
        let dic = compute_dic(&d).unwrap();
        assert!((dic.p_d).abs() < 1e-12);
        assert!((dic.dic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn waic_of_constant_draws() {
        let d = diag(vec![vec![-1.0, -2.0]; 200], 6.0);
        let w = compute_waic(&d).unwrap();
        assert!((w.lppd + 3.0).abs() < 1e-12);
        assert!(w.p_waic.abs() < 1e-12);
        assert!((w.waic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn waic_hand_computed() {
        // One cell, two values alternating.
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![if i % 2 == 0 { -1.0 } else { -3.0 }]).collect();
        let w = compute_waic(&diag(rows, 0.0)).unwrap();
        let lppd = (0.5 * ((-1.0f64).exp() + (-3.0f64).exp())).ln();
        let var = 100.0 / 99.0;
        assert!((w.lppd - lppd).abs() < 1e-12);
        assert!((w.p_waic - var).abs() < 1e-12);
    }

    #[test]
    fn waic_requires_enough_draws() {
        assert!(compute_waic(&diag(vec![vec![-1.0]; 99], 0.0)).is_err());
        assert!(compute_dic(&diag(Vec::new(), 0.0)).is_err());
    }
}
