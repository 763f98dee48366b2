//! Reported quantities derived from posterior draws: pattern rates, cell
//! rates, exceedance probabilities and variance shares.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{FitResult, PosteriorDraws};
use crate::marginal::empirical_quantile;
use crate::model::{AssembledModel, BlockRole, LatentBlock, ModelKind};

/// Default number of joint draws behind every product.
pub const DEFAULT_PRODUCT_DRAWS: usize = 4000;

/// Rates are reported per this many person-years.
pub const PER_100K: f64 = 1e5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRate {
    pub block: BlockRole,
    pub index: usize,
    pub label: String,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRate {
    pub age: String,
    pub second: String,
    pub observed: bool,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceRow {
    /// Age label for per-cell reports, empty for per-unit reports.
    pub age: String,
    pub unit: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceReport {
    pub threshold: String,
    pub rows: Vec<ExceedanceRow>,
}

/// Reference for area-level exceedance within an age group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExceedanceReference {
    /// `Pr(λ_as > median exp(α + φ_a))`.
    #[default]
    RateScale,
    /// `Pr(ξ_s + δ_as > 0)`.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceShare {
    pub component: String,
    pub precision: f64,
    pub share: f64,
    /// Share among the non-age components; `None` for the age block.
    pub share_excluding_age: Option<f64>,
}

fn summarize(mut values: Vec<f64>) -> (f64, f64, f64) {
    values.sort_by(f64::total_cmp);
    (
        empirical_quantile(&values, 0.5),
        empirical_quantile(&values, 0.025),
        empirical_quantile(&values, 0.975),
    )
}

fn require_draws(draws: &PosteriorDraws) -> Result<()> {
    if draws.is_empty() {
        return Err(Error::Numerical("posterior products need at least one draw".into()));
    }
    Ok(())
}

fn main_block(model: &AssembledModel, role: BlockRole) -> Result<&LatentBlock> {
    if !matches!(role, BlockRole::Age | BlockRole::Time | BlockRole::Space) {
        return Err(Error::InvalidSpec(format!("{} is not a main-effect block", role.name())));
    }
    model
        .block(role)
        .ok_or_else(|| Error::InvalidSpec(format!("model has no {} block", role.name())))
}

fn block_labels(model: &AssembledModel, role: BlockRole) -> &[String] {
    match role {
        BlockRole::Age => &model.age_labels,
        _ => &model.second_labels,
    }
}

/// Quantiles of `scale · exp(α + effect_i)` from joint draws.
pub fn marginal_pattern_rates(
    model: &AssembledModel,
    role: BlockRole,
    draws: &PosteriorDraws,
    scale: f64,
) -> Result<Vec<PatternRate>> {
    require_draws(draws)?;
    let block = main_block(model, role)?;
    let alpha = model.blocks[0].offset;
    let labels = block_labels(model, role);
    Ok((0..block.len)
        .map(|i| {
            let j = block.offset + i;
            let (median, lower, upper) =
                summarize(draws.latent.iter().map(|x| scale * (x[alpha] + x[j]).exp()).collect());
            PatternRate {
                block: role,
                index: i,
                label: labels[i].clone(),
                median,
                lower,
                upper,
            }
        })
        .collect())
}

/// Quantiles of `scale · λ` for every cell, missing cells included.
pub fn cell_rate_estimates(model: &AssembledModel, draws: &PosteriorDraws, scale: f64) -> Result<Vec<CellRate>> {
    require_draws(draws)?;
    let log_rates: Vec<_> = draws.latent.iter().map(|x| model.log_rates(x)).collect();
    Ok(model
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (median, lower, upper) = summarize(log_rates.iter().map(|lr| scale * lr[i].exp()).collect());
            CellRate {
                age: model.age_labels[c.age].clone(),
                second: model.second_labels[c.second].clone(),
                observed: c.observed.is_some(),
                median,
                lower,
                upper,
            }
        })
        .collect())
}

fn fraction_positive(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.filter(|v| *v > 0.0).count() as f64 / n as f64
}

/// `Pr(effect_i > 0 | O)` per unit of a main-effect block.
pub fn exceedance_effect(model: &AssembledModel, role: BlockRole, draws: &PosteriorDraws) -> Result<ExceedanceReport> {
    require_draws(draws)?;
    let block = main_block(model, role)?;
    let labels = block_labels(model, role);
    let rows = (0..block.len)
        .map(|i| ExceedanceRow {
            age: String::new(),
            unit: labels[i].clone(),
            probability: fraction_positive(draws.latent.iter().map(|x| x[block.offset + i]), draws.len()),
        })
        .collect();
    Ok(ExceedanceReport {
        threshold: format!("{} effect > 0", role.name()),
        rows,
    })
}

/// Per age group and area, the probability that the area exceeds the age
/// group's overall level. Rows are ordered area-major, age fastest.
pub fn exceedance_vs_age_mean(
    model: &AssembledModel,
    draws: &PosteriorDraws,
    reference: ExceedanceReference,
) -> Result<ExceedanceReport> {
    require_draws(draws)?;
    if model.spec.kind != ModelKind::AgeSpace {
        return Err(Error::InvalidSpec("area exceedance needs an age-space model".into()));
    }
    let n_age = model.n_age();
    let n = draws.len();
    let mut rows = Vec::with_capacity(model.cells.len());
    match reference {
        ExceedanceReference::RateScale => {
            let age = main_block(model, BlockRole::Age)?;
            let alpha = model.blocks[0].offset;
            let plug_in: Vec<f64> = (0..n_age)
                .map(|a| summarize(draws.latent.iter().map(|x| (x[alpha] + x[age.offset + a]).exp()).collect()).0)
                .collect();
            let log_rates: Vec<_> = draws.latent.iter().map(|x| model.log_rates(x)).collect();
            for (i, c) in model.cells.iter().enumerate() {
                let threshold = plug_in[c.age].ln();
                rows.push(ExceedanceRow {
                    age: model.age_labels[c.age].clone(),
                    unit: model.second_labels[c.second].clone(),
                    probability: fraction_positive(log_rates.iter().map(|lr| lr[i] - threshold), n),
                });
            }
        }
        ExceedanceReference::Joint => {
            let space = model.block(BlockRole::Space);
            let inter = model.block(BlockRole::Interaction);
            for c in &model.cells {
                let effect = |x: &nalgebra::DVector<f64>| {
                    space.map_or(0.0, |b| x[b.offset + c.second])
                        + inter.map_or(0.0, |b| x[b.offset + c.second * n_age + c.age])
                };
                rows.push(ExceedanceRow {
                    age: model.age_labels[c.age].clone(),
                    unit: model.second_labels[c.second].clone(),
                    probability: fraction_positive(draws.latent.iter().map(effect), n),
                });
            }
        }
    }
    Ok(ExceedanceReport {
        threshold: match reference {
            ExceedanceReference::RateScale => "rate > median exp(alpha + age effect)".into(),
            ExceedanceReference::Joint => "space effect + interaction > 0".into(),
        },
        rows,
    })
}

/// Shares of `1/τ_i` in `Σ_j 1/τ_j`. When `age` names one component the
/// remaining shares are also renormalized without it.
pub fn variance_shares(components: &[(String, f64)], age: Option<&str>) -> Result<Vec<VarianceShare>> {
    if components.is_empty() {
        return Err(Error::InvalidSpec("no random-effect components".into()));
    }
    if let Some((name, p)) = components.iter().find(|(_, p)| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::Numerical(format!("precision of {name} is {p}")));
    }
    let total: f64 = components.iter().map(|(_, p)| 1.0 / p).sum();
    let rest: f64 = components
        .iter()
        .filter(|(n, _)| Some(n.as_str()) != age)
        .map(|(_, p)| 1.0 / p)
        .sum();
    Ok(components
        .iter()
        .map(|(name, p)| {
            let is_age = Some(name.as_str()) == age;
            VarianceShare {
                component: name.clone(),
                precision: *p,
                share: (1.0 / p) / total,
                share_excluding_age: (!is_age && rest > 0.0).then(|| (1.0 / p) / rest),
            }
        })
        .collect())
}

/// Variance shares of the random-effect blocks at posterior median
/// precisions.
pub fn variance_decomposition(model: &AssembledModel, fit: &FitResult) -> Result<Vec<VarianceShare>> {
    let mut components = Vec::new();
    for b in model.blocks.iter().filter(|b| b.hyper.is_some()) {
        let s = b.structure.as_ref().expect("random-effect block has a structure");
        if !s.is_scaled() {
            return Err(Error::InvalidSpec(format!("{} structure is not scaled", b.name)));
        }
        let h = &fit.hyper[b.hyper.unwrap()];
        components.push((b.role.name().to_string(), h.median_precision));
    }
    variance_shares(&components, Some(BlockRole::Age.name()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(p: &[(&str, f64)]) -> Vec<(String, f64)> {
        p.iter().map(|(n, v)| (n.to_string(), *v)).collect()
    }

    #[test]
    fn equal_precisions_give_equal_shares() {
        let s = variance_shares(&named(&[("age", 2.0), ("time", 2.0), ("interaction", 2.0)]), Some("age")).unwrap();
        for v in &s {
            assert!((v.share - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(s[0].share_excluding_age, None);
        assert!((s[1].share_excluding_age.unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_component_shares() {
        let s = variance_shares(&named(&[("a", 1.0), ("b", 3.0)]), None).unwrap();
        assert!((s[0].share - 0.75).abs() < 1e-15);
        assert!((s[1].share - 0.25).abs() < 1e-15);
        assert!((s[0].share_excluding_age.unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn bad_precisions_rejected() {
        assert!(variance_shares(&named(&[("a", 0.0)]), None).is_err());
        assert!(variance_shares(&[], None).is_err());
    }
}
