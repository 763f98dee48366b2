//! Synthetic datasets drawn from the model's own priors.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Cell, Dataset};
use crate::confounding::Axis;
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::model::{AssembledModel, Likelihood, ModelCell, ModelInput, ModelKind, ModelSpec, SecondPrior};
use crate::structure::{eigendecompose, icar_structure, rw_structure, RANK_TOL};

/// Label of the single area of an age-time simulation.
pub const POOLED_AREA: &str = "all";
/// Year of an age-space simulation.
pub const SIMULATED_YEAR: i32 = 2000;

#[derive(Debug, Clone)]
pub struct SimulationInput {
    pub spec: ModelSpec,
    pub age_labels: Vec<String>,
    /// Years (as integers) for age-time models, area labels for age-space.
    pub second_labels: Vec<String>,
    pub graph: Option<AdjacencyGraph>,
    /// Raw covariate values on the second axis, one vector per spec covariate.
    pub covariates: Vec<Vec<f64>>,
    /// Per-cell exposures in model-cell order, or a single shared value.
    pub exposures: Vec<f64>,
    pub alpha: f64,
    /// Log-precisions in model order; `+∞` switches a block off.
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub sex: String,
}

/// Latent truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub alpha: f64,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// Full latent vector in model layout.
    pub latent: Vec<f64>,
    /// Log-rate of every model cell.
    pub log_rates: Vec<f64>,
    pub seed: u64,
}

fn template_model(input: &SimulationInput) -> Result<AssembledModel> {
    let n_age = input.age_labels.len();
    let n_second = input.second_labels.len();
    let n_cells = n_age * n_second;
    let exposure = |i: usize| -> Result<f64> {
        let e = match input.exposures.len() {
            1 => input.exposures[0],
            n if n == n_cells => input.exposures[i],
            n => return Err(Error::Dimension(format!("{n} exposures for {n_cells} cells"))),
        };
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::Data(format!("exposure must be positive, got {e}")));
        }
        Ok(e)
    };
    let cells = (0..n_cells)
        .map(|i| {
            Ok(ModelCell {
                age: i % n_age,
                second: i / n_age,
                observed: Some(0.0),
                exposure: exposure(i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let second_structure = match (input.spec.kind, input.spec.second_prior) {
        (_, None) => None,
        (ModelKind::AgeTime, Some(SecondPrior::Rw1)) => Some(rw_structure(n_second, 1)?),
        (ModelKind::AgeTime, Some(SecondPrior::Rw2)) => Some(rw_structure(n_second, 2)?),
        (ModelKind::AgeSpace, Some(_)) => {
            let g = input
                .graph
                .as_ref()
                .ok_or_else(|| Error::InvalidSpec("age-space simulation needs a graph".into()))?;
            if g.n_areas() != n_second {
                return Err(Error::Dimension(format!("graph has {} areas for {n_second} labels", g.n_areas())));
            }
            Some(icar_structure(g))
        }
        (kind, Some(p)) => return Err(Error::InvalidSpec(format!("{p} prior does not fit a {kind} model"))),
    };
    AssembledModel::from_input(ModelInput {
        spec: input.spec.clone(),
        likelihood: Likelihood::Poisson,
        age_labels: input.age_labels.clone(),
        second_labels: input.second_labels.clone(),
        cells,
        second_structure,
        covariate_values: input.covariates.clone(),
    })
}

/// Draws latent effects from the constrained scaled priors, rates, and
/// Poisson counts. Directions the constraints leave unpenalized are set to
/// zero.
pub fn simulate_dataset(input: &SimulationInput, seed: u64) -> Result<(Dataset, TruthRecord)> {
    if let Some(t) = input.theta.iter().find(|t| t.is_nan() || **t == f64::NEG_INFINITY) {
        return Err(Error::InvalidSpec(format!("log-precision {t} is not admissible")));
    }
    if !input.alpha.is_finite() || input.beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidSpec("intercept and coefficients must be finite".into()));
    }
    let model = template_model(input)?;
    if input.theta.len() != model.n_hyper() {
        return Err(Error::Dimension(format!(
            "{} log-precisions for {} random effects",
            input.theta.len(),
            model.n_hyper()
        )));
    }
    if input.beta.len() != model.covariates.len() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} covariates",
            input.beta.len(),
            model.covariates.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::zeros(model.n_latent());
    x[model.blocks[0].offset] = input.alpha;
    let mut k = 0;
    for b in &model.blocks {
        match b.hyper {
            None if b.offset != model.blocks[0].offset => {
                x[b.offset] = input.beta[k];
                k += 1;
            }
            None => {}
            Some(h) => {
                let tau = input.theta[h].exp();
                // Draws are made even when τ = ∞ so the stream does not
                // depend on which blocks are switched off.
                let eig = eigendecompose(&b.restricted)?;
                let lmax = eig.values.iter().copied().fold(0.0, f64::max);
                let mut z = DVector::zeros(b.free_len());
                for (j, &lambda) in eig.values.iter().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    if lambda > RANK_TOL * lmax.max(1.0) && tau.is_finite() {
                        z.axpy(e / (tau * lambda).sqrt(), &eig.vectors.column(j).into_owned(), 1.0);
                    }
                }
                let effect = &b.basis * z;
                x.rows_mut(b.offset, b.len).copy_from(&effect);
            }
        }
    }
    let log_rates = model.log_rates(&x);

    let n_age = input.age_labels.len();
    let mut cells = Vec::with_capacity(model.cells.len());
    for (i, c) in model.cells.iter().enumerate() {
        let mu = c.exposure * log_rates[i].exp();
        let deaths = if mu > 0.0 {
            Poisson::new(mu)
                .map_err(|e| Error::Numerical(format!("cannot draw a Poisson count with mean {mu}: {e}")))?
                .sample(&mut rng) as u64
        } else {
            0
        };
        cells.push((c.second, c.age, Cell {
            deaths: Some(deaths),
            population: c.exposure,
        }));
    }
    let sexes = vec![input.sex.clone()];
    let mut dataset = match input.spec.kind {
        ModelKind::AgeTime => {
            let years = input
                .second_labels
                .iter()
                .map(|l| l.parse::<i32>().map_err(|_| Error::Data(format!("year label {l:?} is not an integer"))))
                .collect::<Result<Vec<_>>>()?;
            // Single area; grid order is year then age.
            let ordered = cells.iter().map(|(_, _, c)| *c).collect();
            Dataset::new(vec![POOLED_AREA.into()], years, input.age_labels.clone(), sexes, ordered)?
        }
        ModelKind::AgeSpace => {
            let ordered = cells.iter().map(|(_, _, c)| *c).collect();
            Dataset::new(input.second_labels.clone(), vec![SIMULATED_YEAR], input.age_labels.clone(), sexes, ordered)?
        }
    };
    debug_assert_eq!(dataset.age_groups().len(), n_age);
    for (cs, values) in input.spec.covariates.iter().zip(&input.covariates) {
        match cs.axis {
            Axis::Temporal => dataset.set_temporal_covariate(&cs.name, None, values.clone())?,
            Axis::Spatial => dataset.set_spatial_covariate(&cs.name, values.clone())?,
        }
    }
    Ok((
        dataset,
        TruthRecord {
            alpha: input.alpha,
            theta: input.theta.clone(),
            beta: input.beta.clone(),
            latent: x.iter().copied().collect(),
            log_rates: log_rates.iter().copied().collect(),
            seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::InteractionType;

    fn input(theta: Vec<f64>) -> SimulationInput {
        SimulationInput {
            spec: ModelSpec::age_time(SecondPrior::Rw1, Some(InteractionType::II)),
            age_labels: ["40-49", "50-59", "60-69"].map(String::from).to_vec(),
            second_labels: (2010..2015).map(|y| y.to_string()).collect(),
            graph: None,
            covariates: Vec::new(),
            exposures: vec![1e5],
            alpha: -9.0,
            theta,
            beta: Vec::new(),
            sex: "M".into(),
        }
    }

    #[test]
    fn infinite_precisions_give_flat_rates() {
        let (_, truth) = simulate_dataset(&input(vec![f64::INFINITY; 3]), 4).unwrap();
        for lr in &truth.log_rates {
            assert_eq!(*lr, -9.0);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = simulate_dataset(&input(vec![0.0; 3]), 11).unwrap();
        let b = simulate_dataset(&input(vec![0.0; 3]), 11).unwrap();
        assert_eq!(a.0.deaths_csv(), b.0.deaths_csv());
        assert_eq!(a.1, b.1);
        let c = simulate_dataset(&input(vec![0.0; 3]), 12).unwrap();
        assert_ne!(a.1.latent, c.1.latent);
    }

    #[test]
    fn rejects_bad_theta() {
        assert!(simulate_dataset(&input(vec![f64::NAN, 0.0, 0.0]), 1).is_err());
        assert!(simulate_dataset(&input(vec![f64::NEG_INFINITY, 0.0, 0.0]), 1).is_err());
        assert!(simulate_dataset(&input(vec![0.0; 2]), 1).is_err());
    }
}
