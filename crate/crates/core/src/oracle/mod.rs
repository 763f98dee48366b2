//! Brute-force reference inference for small models: adaptive random-walk
//! Metropolis and dense quadrature. Neither path shares code with the
//! Laplace engine beyond the model definition itself.

mod grid;
mod mcmc;

pub use grid::{grid_posterior, grid_posterior_density, GridOracleConfig};
pub use mcmc::{effective_sample_size, mcmc_density, mcmc_sample, mcmc_sample_with, split_rhat, McmcConfig};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::inference::PosteriorDraws;
use crate::model::{AssembledModel, Likelihood};

/// Largest parameter dimension the oracles accept.
pub const MAX_ORACLE_DIM: usize = 200;

/// Unnormalized log density over an unconstrained real vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, v: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMethod {
    Mcmc,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantitySummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub mcse: f64,
    pub ess: f64,
    pub median: Option<f64>,
    pub q025: Option<f64>,
    pub q975: Option<f64>,
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub method: OracleMethod,
    pub quantities: Vec<QuantitySummary>,
    /// Retained draws of the monitored quantities (empty for quadrature).
    pub draws: Vec<Vec<f64>>,
    pub acceptance: Vec<f64>,
    /// Change in the moments when the quadrature grid is halved.
    pub quadrature_error: Option<f64>,
    pub warnings: Vec<String>,
}

impl OracleResult {
    pub fn get(&self, name: &str) -> Option<&QuantitySummary> {
        self.quantities.iter().find(|q| q.name == name)
    }

    pub fn means(&self) -> Vec<f64> {
        self.quantities.iter().map(|q| q.mean).collect()
    }

    pub fn sds(&self) -> Vec<f64> {
        self.quantities.iter().map(|q| q.sd).collect()
    }

    /// The first `n_latent` monitored quantities of every draw as latent
    /// vectors.
    pub fn latent_draws(&self, n_latent: usize) -> PosteriorDraws {
        PosteriorDraws {
            latent: self
                .draws
                .iter()
                .map(|d| DVector::from_column_slice(&d[..n_latent]))
                .collect(),
            seed: 0,
        }
    }
}

/// Joint posterior of a model's free latent coordinates and, unless fixed,
/// its log-precisions.
pub struct ModelTarget<'a> {
    model: &'a AssembledModel,
    theta: Option<Vec<f64>>,
}

impl<'a> ModelTarget<'a> {
    pub fn new(model: &'a AssembledModel, theta: Option<&[f64]>) -> Self {
        Self {
            model,
            theta: theta.map(<[f64]>::to_vec),
        }
    }

    fn split<'v>(&'v self, v: &'v [f64]) -> (&'v [f64], &'v [f64]) {
        let n = self.model.n_free();
        match &self.theta {
            Some(t) => (&v[..n], t),
            None => (&v[..n], &v[n..]),
        }
    }

    /// Monitored quantities: the full latent vector, then free θ.
    pub fn quantities(&self, v: &[f64]) -> Vec<f64> {
        let (z, theta) = self.split(v);
        let mut out: Vec<f64> = self.model.expand(&DVector::from_column_slice(z)).iter().copied().collect();
        if self.theta.is_none() {
            out.extend_from_slice(theta);
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.model.n_latent() + self.model.n_hyper());
        for b in &self.model.blocks {
            if b.len == 1 {
                names.push(b.name.clone());
            } else {
                names.extend((0..b.len).map(|i| format!("{}[{i}]", b.name)));
            }
        }
        if self.theta.is_none() {
            names.extend(self.model.hyper_names.iter().map(|h| format!("log_tau_{h}")));
        }
        names
    }

    /// Crude start: ridge least squares of empirical log-rates on the free
    /// design, and each log-precision from the spread of its block.
    pub fn crude_start(&self) -> Vec<f64> {
        let m = self.model;
        let n_free = m.n_free();
        let fd = m.free_design();
        let y: DVector<f64> = match m.likelihood {
            Likelihood::Poisson => {
                let off = m.observed_offsets();
                DVector::from_iterator(
                    off.len(),
                    m.observed().iter().zip(off.iter()).map(|(&o, &lo)| (o + 0.5).ln() - lo),
                )
            }
            Likelihood::Gaussian { .. } => m.observed().clone(),
        };
        let mut normal = fd.tr_mul(fd);
        for i in 0..n_free {
            normal[(i, i)] += 1e-3;
        }
        let z = normal
            .cholesky()
            .map(|c| c.solve(&fd.tr_mul(&y)))
            .unwrap_or_else(|| DVector::zeros(n_free));
        let mut v = z.iter().copied().collect::<Vec<f64>>();
        if self.theta.is_none() {
            let mut theta = vec![0.0; m.n_hyper()];
            for b in m.blocks.iter().filter(|b| b.hyper.is_some()) {
                let zb = z.rows(b.free_offset, b.free_len()).into_owned();
                let quad = zb.dot(&(&b.restricted * &zb)) / b.prior_rank.max(1) as f64;
                theta[b.hyper.unwrap()] = -quad.max(1e-4).ln().clamp(-10.0, 10.0);
            }
            v.extend(theta);
        }
        v
    }
}

impl LogDensity for ModelTarget<'_> {
    fn dim(&self) -> usize {
        self.model.n_free() + if self.theta.is_some() { 0 } else { self.model.n_hyper() }
    }

    fn log_density(&self, v: &[f64]) -> f64 {
        let (z, theta) = self.split(v);
        if theta.iter().any(|t| !t.is_finite() || t.abs() > 50.0) {
            return f64::NEG_INFINITY;
        }
        let m = self.model;
        let zv = DVector::from_column_slice(z);
        let fd = m.free_design();
        let off = m.observed_offsets();
        let mut ll = 0.0;
        for (k, &o) in m.observed().iter().enumerate() {
            let eta = fd.row(k).dot(&zv.transpose()) + off[k];
            ll += m.cell_log_likelihood(o, eta);
        }
        let hyper: f64 = theta.iter().map(|t| -std::f64::consts::LN_2 - 0.5 * t).sum();
        let value = ll + m.log_prior_latent(&zv, theta) + hyper;
        if value.is_nan() {
            f64::NEG_INFINITY
        } else {
            value
        }
    }
}
