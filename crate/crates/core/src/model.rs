//! Model specifications and their assembly into latent Gaussian models.
//!
//! The linear predictor for cell `(a, j)`, where `j` is a year or an area, is
//!
//! ```text
//! log μ = log N + α + Xβ + φ_a + (γ_j or ξ_j) + δ_{a j}
//! ```
//!
//! Latent coordinates are laid out as `[α, β…, φ, γ|ξ, δ]` with the age index
//! varying fastest inside `δ`. Identifiability constraints are eliminated by
//! working in an orthonormal basis of their null space, block by block, so the
//! free coordinates `z` map to the latent field as `x = B z` with `C x = 0`
//! for every `z`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::confounding::{
    decorrelate_covariate, max_k, standardize_covariate, Axis, CovariateVector, DecorrelatedCovariate,
    RemovalCount,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;
use crate::structure::{
    eigendecompose, icar_structure, interaction_structure, kron_vec, orthonormalize, rw_structure,
    scale_structure, InteractionType, StructureKind, StructureMatrix, RANK_TOL,
};

/// Prior precision of the intercept and regression coefficients.
pub const FIXED_EFFECT_PRECISION: f64 = 0.001;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    AgeTime,
    AgeSpace,
}

impl ModelKind {
    pub fn second_axis(self) -> Axis {
        match self {
            ModelKind::AgeTime => Axis::Temporal,
            ModelKind::AgeSpace => Axis::Spatial,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::AgeTime => "age-time",
            ModelKind::AgeSpace => "age-space",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecondPrior {
    Rw1,
    Rw2,
    Icar,
}

impl fmt::Display for SecondPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecondPrior::Rw1 => "rw1",
            SecondPrior::Rw2 => "rw2",
            SecondPrior::Icar => "icar",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub axis: Axis,
    pub decorrelate: bool,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Include the RW1 age effect. Dropped automatically for a single age group.
    pub age_effect: bool,
    /// Prior of the time or space main effect; `None` omits the block.
    pub second_prior: Option<SecondPrior>,
    pub interaction: Option<InteractionType>,
    pub covariates: Vec<CovariateSpec>,
    pub removal: RemovalCount,
    pub fixed_precision: f64,
    pub sex: Option<String>,
}

impl ModelSpec {
    pub fn age_time(time: SecondPrior, interaction: Option<InteractionType>) -> Self {
        Self {
            kind: ModelKind::AgeTime,
            age_effect: true,
            second_prior: Some(time),
            interaction,
            covariates: Vec::new(),
            removal: RemovalCount::IndexRange,
            fixed_precision: FIXED_EFFECT_PRECISION,
            sex: None,
        }
    }

    pub fn age_space(interaction: Option<InteractionType>) -> Self {
        Self {
            kind: ModelKind::AgeSpace,
            second_prior: Some(SecondPrior::Icar),
            ..Self::age_time(SecondPrior::Rw1, interaction)
        }
    }

    /// Intercept (plus covariates) only.
    pub fn intercept_only() -> Self {
        Self {
            age_effect: false,
            second_prior: None,
            ..Self::age_time(SecondPrior::Rw1, None)
        }
    }

    /// Named presets matching the selected sex-specific models.
    pub fn preset(name: &str) -> Option<Self> {
        let (sex, kind) = name.split_once('_')?;
        let sex = match sex {
            "male" => "M",
            "female" => "F",
            _ => return None,
        };
        let mut spec = match (kind, sex) {
            ("agetime", "M") => Self::age_time(SecondPrior::Rw1, Some(InteractionType::II)),
            ("agetime", "F") => Self::age_time(SecondPrior::Rw2, Some(InteractionType::IV)),
            ("agespace", _) => Self::age_space(Some(InteractionType::III)),
            _ => return None,
        };
        spec.sex = Some(sex.to_string());
        Some(spec)
    }

    pub fn with_interaction(&self, interaction: Option<InteractionType>) -> Self {
        Self {
            interaction,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.second_prior) {
            (ModelKind::AgeTime, Some(SecondPrior::Icar)) => {
                return Err(Error::InvalidSpec("an iCAR prior needs a spatial axis; age-time models take rw1 or rw2".into()))
            }
            (ModelKind::AgeSpace, Some(SecondPrior::Rw1 | SecondPrior::Rw2)) => {
                return Err(Error::InvalidSpec("random-walk priors need a temporal axis; age-space models take icar".into()))
            }
            _ => {}
        }
        if self.interaction.is_some() && (!self.age_effect || self.second_prior.is_none()) {
            return Err(Error::InvalidSpec("an interaction needs both main effects".into()));
        }
        if !(self.fixed_precision >= 0.0 && self.fixed_precision.is_finite()) {
            return Err(Error::InvalidSpec("fixed-effect precision must be non-negative".into()));
        }
        for c in &self.covariates {
            if c.axis != self.kind.second_axis() {
                return Err(Error::InvalidSpec(format!(
                    "{} covariate {} cannot enter an {} model",
                    c.axis, c.name, self.kind
                )));
            }
        }
        Ok(())
    }

    /// Checks the decorrelation cap against the actual axis length.
    pub fn check_dims(&self, n_second: usize) -> Result<()> {
        for c in self.covariates.iter().filter(|c| c.decorrelate) {
            if c.k > max_k(n_second) {
                return Err(Error::InvalidSpec(format!(
                    "covariate {}: k = {} exceeds 20% of {n_second} eigenvectors",
                    c.name, c.k
                )));
            }
        }
        Ok(())
    }

    /// Text form accepted by [`parse_model_spec`].
    pub fn to_config(&self) -> String {
        let mut parts = vec![self.kind.to_string()];
        if self.age_effect {
            parts.push("age=rw1".into());
        }
        if let Some(p) = self.second_prior {
            let key = match self.kind {
                ModelKind::AgeTime => "time",
                ModelKind::AgeSpace => "space",
            };
            parts.push(format!("{key}={p}"));
        }
        parts.push(format!(
            "interaction={}",
            self.interaction.map_or("none".to_string(), |i| i.to_string())
        ));
        for c in &self.covariates {
            if c.decorrelate {
                parts.push(format!("covariate={}:{}:k={}", c.name, c.axis, c.k));
            } else {
                parts.push(format!("covariate={}:{}", c.name, c.axis));
            }
        }
        if self.removal == RemovalCount::Exact {
            parts.push("removal=exact".into());
        }
        if self.fixed_precision != FIXED_EFFECT_PRECISION {
            parts.push(format!("fixed_precision={}", self.fixed_precision));
        }
        if let Some(s) = &self.sex {
            parts.push(format!("sex={s}"));
        }
        parts.join("; ")
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_model_spec(s)
    }
}

/// Parses a `key=value` configuration. Entries are separated by newlines or
/// `;`, `#` starts a comment, and a bare `age-time`/`age-space` sets the kind.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let mut kind = None;
    let mut age = false;
    let mut time = None;
    let mut space = None;
    let mut interaction = None;
    let mut covariates = Vec::new();
    let mut removal = RemovalCount::IndexRange;
    let mut fixed_precision = FIXED_EFFECT_PRECISION;
    let mut sex = None;

    let entries = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split(';'))
        .map(str::trim)
        .filter(|e| !e.is_empty());
    for entry in entries {
        let (key, value) = match entry.split_once('=') {
            Some((k, v)) => (k.trim().to_ascii_lowercase(), v.trim()),
            None => ("kind".to_string(), entry),
        };
        let bad = |what: &str| Error::InvalidSpec(format!("unknown {what} {value:?}"));
        match key.as_str() {
            "kind" => {
                kind = Some(match value.to_ascii_lowercase().as_str() {
                    "age-time" | "agetime" => ModelKind::AgeTime,
                    "age-space" | "agespace" => ModelKind::AgeSpace,
                    _ => return Err(bad("model kind")),
                })
            }
            "age" => match value.to_ascii_lowercase().as_str() {
                "rw1" => age = true,
                _ => return Err(Error::InvalidSpec(format!("age effect takes rw1, got {value:?}"))),
            },
            "time" => {
                time = Some(match value.to_ascii_lowercase().as_str() {
                    "rw1" => SecondPrior::Rw1,
                    "rw2" => SecondPrior::Rw2,
                    "icar" => SecondPrior::Icar,
                    _ => return Err(bad("time prior")),
                })
            }
            "space" => {
                space = Some(match value.to_ascii_lowercase().as_str() {
                    "icar" => SecondPrior::Icar,
                    "rw1" => SecondPrior::Rw1,
                    "rw2" => SecondPrior::Rw2,
                    _ => return Err(bad("space prior")),
                })
            }
            "interaction" => {
                interaction = match value.to_ascii_lowercase().as_str() {
                    "none" | "additive" => None,
                    _ => Some(InteractionType::parse(value).ok_or_else(|| bad("interaction type"))?),
                }
            }
            "covariate" => covariates.push(parse_covariate(value)?),
            "removal" => {
                removal = match value {
                    "index-range" => RemovalCount::IndexRange,
                    "exact" => RemovalCount::Exact,
                    _ => return Err(bad("removal mode")),
                }
            }
            "fixed_precision" => {
                fixed_precision = value.parse().map_err(|_| bad("precision"))?;
            }
            "sex" => sex = Some(value.to_string()),
            _ => return Err(Error::InvalidSpec(format!("unknown key {key:?}"))),
        }
    }

    let kind = kind
        .or(match (time, space) {
            (Some(_), None) => Some(ModelKind::AgeTime),
            (None, Some(_)) => Some(ModelKind::AgeSpace),
            _ => None,
        })
        .ok_or_else(|| Error::InvalidSpec("model kind (age-time or age-space) is required".into()))?;
    let second_prior = match kind {
        ModelKind::AgeTime => {
            if space.is_some() {
                return Err(Error::InvalidSpec("age-time models have no space effect".into()));
            }
            time.unwrap_or(SecondPrior::Rw1)
        }
        ModelKind::AgeSpace => {
            if time.is_some() {
                return Err(Error::InvalidSpec("age-space models have no time effect".into()));
            }
            space.unwrap_or(SecondPrior::Icar)
        }
    };
    let _ = age;
    let spec = ModelSpec {
        kind,
        age_effect: true,
        second_prior: Some(second_prior),
        interaction,
        covariates,
        removal,
        fixed_precision,
        sex,
    };
    spec.validate()?;
    Ok(spec)
}

/// `name:axis`, optionally followed by `:k=<n>` or `:decorrelate`.
fn parse_covariate(value: &str) -> Result<CovariateSpec> {
    let parts: Vec<&str> = value.split(':').map(str::trim).collect();
    if parts.len() < 2 || parts[0].is_empty() {
        return Err(Error::InvalidSpec(format!(
            "covariate must read name:axis[:k=N], got {value:?}"
        )));
    }
    let axis = match parts[1].to_ascii_lowercase().as_str() {
        "spatial" => Axis::Spatial,
        "temporal" => Axis::Temporal,
        other => return Err(Error::InvalidSpec(format!("unknown covariate axis {other:?}"))),
    };
    let default_k = match axis {
        Axis::Spatial => 5,
        Axis::Temporal => 2,
    };
    let mut spec = CovariateSpec {
        name: parts[0].to_string(),
        axis,
        decorrelate: false,
        k: default_k,
    };
    for opt in &parts[2..] {
        if *opt == "decorrelate" {
            spec.decorrelate = true;
        } else if let Some(k) = opt.strip_prefix("k=") {
            spec.k = k
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("bad k in covariate {value:?}")))?;
            spec.decorrelate = true;
        } else {
            return Err(Error::InvalidSpec(format!("unknown covariate option {opt:?}")));
        }
    }
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockRole {
    Intercept,
    Covariate,
    Age,
    Time,
    Space,
    Interaction,
}

impl BlockRole {
    pub fn name(self) -> &'static str {
        match self {
            BlockRole::Intercept => "intercept",
            BlockRole::Covariate => "covariate",
            BlockRole::Age => "age",
            BlockRole::Time => "time",
            BlockRole::Space => "space",
            BlockRole::Interaction => "interaction",
        }
    }
}

/// One latent block with its prior and constraint-free basis.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub role: BlockRole,
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Scaled structure for random effects; `None` for fixed effects.
    pub structure: Option<StructureMatrix>,
    /// Index into the hyperparameter vector for random effects.
    pub hyper: Option<usize>,
    /// Block-local constraint functionals.
    pub constraint_rows: Vec<DVector<f64>>,
    /// Orthonormal basis of the constraint null space, `len × free_len`.
    pub basis: DMatrix<f64>,
    pub free_offset: usize,
    /// `basisᵀ R basis`, the structure on free coordinates.
    pub restricted: DMatrix<f64>,
    pub prior_rank: usize,
    pub log_pdet: f64,
}

impl LatentBlock {
    pub fn free_len(&self) -> usize {
        self.basis.ncols()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn free_range(&self) -> std::ops::Range<usize> {
        self.free_offset..self.free_offset + self.free_len()
    }

    /// Precision multiplier on `restricted`: `τ` for random effects, the fixed
    /// prior precision otherwise.
    pub fn precision(&self, theta: &[f64], fixed_precision: f64) -> f64 {
        match self.hyper {
            Some(h) => theta[h].exp(),
            None => fixed_precision,
        }
    }

    /// Constrained prior log density of the block's free coordinates.
    pub fn log_prior(&self, z: &[f64], precision: f64) -> f64 {
        if self.free_len() == 0 {
            return 0.0;
        }
        if precision == 0.0 {
            return 0.0;
        }
        let zv = DVector::from_column_slice(z);
        let quad = zv.dot(&(&self.restricted * &zv));
        let r = self.prior_rank as f64;
        0.5 * r * precision.ln() + 0.5 * self.log_pdet - 0.5 * r * LN_2PI - 0.5 * precision * quad
    }

    fn new(
        role: BlockRole,
        name: String,
        len: usize,
        structure: Option<StructureMatrix>,
        hyper: Option<usize>,
        constraint_rows: Vec<DVector<f64>>,
    ) -> Self {
        let basis = complement_basis(len, &constraint_rows);
        let restricted = match &structure {
            Some(s) => {
                let r = basis.transpose() * s.entries() * &basis;
                (&r + r.transpose()) * 0.5
            }
            None => DMatrix::identity(basis.ncols(), basis.ncols()),
        };
        let (prior_rank, log_pdet) = if restricted.nrows() == 0 {
            (0, 0.0)
        } else {
            let eig = eigendecompose(&restricted).expect("restricted structure is symmetric");
            let lmax = eig.values.max().max(0.0);
            let positive: Vec<f64> = eig.values.iter().copied().filter(|&v| v > RANK_TOL * lmax).collect();
            (positive.len(), positive.iter().map(|v| v.ln()).sum())
        };
        Self {
            role,
            name,
            offset: 0,
            len,
            structure,
            hyper,
            constraint_rows,
            basis,
            free_offset: 0,
            restricted,
            prior_rank,
            log_pdet,
        }
    }
}

/// Orthonormal basis of `{v : ⟨r, v⟩ = 0 for all rows r}`.
fn complement_basis(len: usize, rows: &[DVector<f64>]) -> DMatrix<f64> {
    if rows.is_empty() {
        return DMatrix::identity(len, len);
    }
    let q = orthonormalize(rows);
    let mut candidates: Vec<DVector<f64>> = q.column_iter().map(|c| c.into_owned()).collect();
    let k = candidates.len();
    for i in 0..len {
        let mut e = DVector::zeros(len);
        e[i] = 1.0;
        candidates.push(e);
    }
    let all = orthonormalize(&candidates);
    all.columns(k, all.ncols() - k).into_owned()
}

/// Linear functionals `C x = 0` over the full latent field.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub rows: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn rhs(&self) -> DVector<f64> {
        DVector::zeros(self.len())
    }

    pub fn rank(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        let rows: Vec<DVector<f64>> = self.rows.row_iter().map(|r| r.transpose()).collect();
        orthonormalize(&rows).ncols()
    }

    /// Largest `|C x|` entry.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            (&self.rows * x).amax()
        }
    }
}

/// Null-space functionals of a structure: polynomials for random walks and
/// component indicators for iCAR.
fn null_rows(s: &StructureMatrix) -> Vec<DVector<f64>> {
    let n = s.dim();
    match s.kind() {
        StructureKind::RandomWalk { order } => (0..*order)
            .map(|deg| DVector::from_iterator(n, (0..n).map(|i| (i as f64).powi(deg as i32))))
            .collect(),
        StructureKind::Icar { .. } => s.sum_to_zero_rows(),
        StructureKind::Identity => Vec::new(),
        StructureKind::Kronecker | StructureKind::Dense => {
            s.null_basis().column_iter().map(|c| c.into_owned()).collect()
        }
    }
}

/// Keeps rows in order, dropping any that are linear combinations of earlier
/// ones.
fn independent_rows(rows: Vec<(String, DVector<f64>)>) -> Vec<(String, DVector<f64>)> {
    let mut kept = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for (label, row) in rows {
        let mut w = row.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let norm = w.norm();
        if norm > 1e-9 * row.norm() {
            basis.push(w / norm);
            kept.push((label, row));
        }
    }
    kept
}

fn interaction_constraints(
    kind: InteractionType,
    second: &StructureMatrix,
    age: &StructureMatrix,
) -> Vec<(String, DVector<f64>)> {
    let (n_second, n_age) = (second.dim(), age.dim());
    let unit = |n: usize, i: usize| {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        e
    };
    let mut rows = Vec::new();
    if kind == InteractionType::I {
        rows.push(("sum(delta)".to_string(), DVector::from_element(n_second * n_age, 1.0)));
        return rows;
    }
    if kind.structured_second() {
        for (d, u) in null_rows(second).iter().enumerate() {
            for a in 0..n_age {
                rows.push((format!("delta null{d} over second, age {a}"), kron_vec(u, &unit(n_age, a))));
            }
        }
    }
    if kind.structured_age() {
        for j in 0..n_second {
            for (d, v) in null_rows(age).iter().enumerate() {
                rows.push((format!("delta null{d} over age, second {j}"), kron_vec(&unit(n_second, j), v)));
            }
        }
    }
    independent_rows(rows)
}

/// Sum-to-zero constraint rows for a specification, as
/// `(block role, label, block-local row)` triples.
fn block_constraints(
    spec: &ModelSpec,
    age: Option<&StructureMatrix>,
    second: Option<&StructureMatrix>,
) -> Vec<(BlockRole, String, DVector<f64>)> {
    let mut out = Vec::new();
    if let Some(a) = age {
        for (i, r) in a.sum_to_zero_rows().into_iter().enumerate() {
            out.push((BlockRole::Age, format!("sum(age) component {i}"), r));
        }
    }
    let second_role = match spec.kind {
        ModelKind::AgeTime => BlockRole::Time,
        ModelKind::AgeSpace => BlockRole::Space,
    };
    if let Some(s) = second {
        for (i, r) in s.sum_to_zero_rows().into_iter().enumerate() {
            out.push((second_role, format!("sum({}) component {i}", second_role.name()), r));
        }
    }
    if let (Some(kind), Some(a), Some(s)) = (spec.interaction, age, second) {
        for (label, r) in interaction_constraints(kind, s, a) {
            out.push((BlockRole::Interaction, label, r));
        }
    }
    out
}

/// Constraint set for the latent layout `[α, β (n_covariates), φ, second, δ]`.
pub fn constraint_set(
    spec: &ModelSpec,
    n_age: usize,
    second: &StructureMatrix,
    n_covariates: usize,
) -> Result<ConstraintSet> {
    let age = rw_structure(n_age, 1)?;
    let second_opt = spec.second_prior.map(|_| second);
    let entries = block_constraints(spec, spec.age_effect.then_some(&age), second_opt);
    let n_second = second.dim();
    let age_off = 1 + n_covariates;
    let second_off = age_off + if spec.age_effect { n_age } else { 0 };
    let inter_off = second_off + if spec.second_prior.is_some() { n_second } else { 0 };
    let n_latent = inter_off + if spec.interaction.is_some() { n_age * n_second } else { 0 };
    let mut rows = DMatrix::zeros(entries.len(), n_latent);
    let mut labels = Vec::new();
    for (i, (role, label, r)) in entries.into_iter().enumerate() {
        let off = match role {
            BlockRole::Age => age_off,
            BlockRole::Time | BlockRole::Space => second_off,
            _ => inter_off,
        };
        rows.view_mut((i, off), (1, r.len())).copy_from(&r.transpose());
        labels.push(label);
    }
    Ok(ConstraintSet { rows, labels })
}

/// Observation model linking the linear predictor to the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Likelihood {
    /// `O ~ Poisson(N exp(η))`.
    Poisson,
    /// `y ~ N(η, 1/precision)`, identity link, no offset.
    Gaussian { precision: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCell {
    pub age: usize,
    pub second: usize,
    /// Observed count (or response); `None` when missing.
    pub observed: Option<f64>,
    pub exposure: f64,
}

#[derive(Debug, Clone)]
pub struct PreparedCovariate {
    pub spec: CovariateSpec,
    pub standardized: CovariateVector,
    pub decorrelated: Option<DecorrelatedCovariate>,
    /// Values entering the design, one per level of the second axis.
    pub column: Vec<f64>,
}

/// Inputs for building a model directly from cells.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub spec: ModelSpec,
    pub likelihood: Likelihood,
    pub age_labels: Vec<String>,
    pub second_labels: Vec<String>,
    /// Cells in `(second, age)` order with age fastest.
    pub cells: Vec<ModelCell>,
    /// Unscaled second-axis structure (ignored when the spec has no second effect).
    pub second_structure: Option<StructureMatrix>,
    /// Raw covariate values on the second axis, matched to `spec.covariates`.
    pub covariate_values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AssembledModel {
    pub spec: ModelSpec,
    pub likelihood: Likelihood,
    pub age_labels: Vec<String>,
    pub second_labels: Vec<String>,
    pub cells: Vec<ModelCell>,
    pub blocks: Vec<LatentBlock>,
    pub constraints: ConstraintSet,
    pub covariates: Vec<PreparedCovariate>,
    pub hyper_names: Vec<String>,
    /// `n_cells × n_latent`, excluding the offset.
    design: DMatrix<f64>,
    offsets: DVector<f64>,
    basis: DMatrix<f64>,
    observed_rows: Vec<usize>,
    observed: DVector<f64>,
    free_design: DMatrix<f64>,
}

impl AssembledModel {
    pub fn from_input(input: ModelInput) -> Result<Self> {
        let ModelInput {
            spec,
            likelihood,
            age_labels,
            second_labels,
            cells,
            second_structure,
            covariate_values,
        } = input;
        spec.validate()?;
        let n_age = age_labels.len();
        let n_second = second_labels.len();
        if cells.len() != n_age * n_second {
            return Err(Error::Dimension(format!(
                "{} cells for a {n_age} × {n_second} grid",
                cells.len()
            )));
        }
        for (i, c) in cells.iter().enumerate() {
            if c.age != i % n_age || c.second != i / n_age {
                return Err(Error::Dimension(format!("cell {i} out of grid order")));
            }
            if c.observed.is_some() && !(c.exposure > 0.0 && c.exposure.is_finite()) {
                return Err(Error::Data(format!(
                    "cell ({}, {}) has exposure {} with an observed count",
                    age_labels[c.age], second_labels[c.second], c.exposure
                )));
            }
            if let (Likelihood::Poisson, Some(o)) = (likelihood, c.observed) {
                if o < 0.0 || o.fract() != 0.0 {
                    return Err(Error::Data(format!("count {o} is not a non-negative integer")));
                }
            }
        }
        if covariate_values.len() != spec.covariates.len() {
            return Err(Error::Dimension("one value vector per covariate required".into()));
        }
        spec.check_dims(n_second)?;

        let age_effect = spec.age_effect && n_age >= 2;
        let age_structure = if age_effect {
            Some(scale_structure(&rw_structure(n_age, 1)?)?)
        } else {
            None
        };
        let second_structure = match spec.second_prior {
            Some(_) => {
                let s = second_structure.ok_or_else(|| {
                    Error::InvalidSpec("a second-axis structure is required".into())
                })?;
                if s.dim() != n_second {
                    return Err(Error::Dimension(format!(
                        "structure of dimension {} for {n_second} levels",
                        s.dim()
                    )));
                }
                Some(if s.is_scaled() { s } else { scale_structure(&s)? })
            }
            None => None,
        };
        if spec.interaction.is_some() && (age_structure.is_none() || second_structure.is_none()) {
            return Err(Error::InvalidSpec("an interaction needs both main effects".into()));
        }

        // Covariates: standardize, then optionally decorrelate.
        let mut covariates = Vec::new();
        for (cs, raw) in spec.covariates.iter().zip(&covariate_values) {
            if raw.len() != n_second {
                return Err(Error::Dimension(format!(
                    "covariate {} has {} values for {n_second} levels",
                    cs.name,
                    raw.len()
                )));
            }
            let standardized = standardize_covariate(cs.axis, raw)?;
            let decorrelated = if cs.decorrelate {
                let s = second_structure.as_ref().ok_or_else(|| {
                    Error::InvalidSpec(format!("covariate {} needs a structured effect to decorrelate against", cs.name))
                })?;
                let eig = eigendecompose(s.entries())?;
                Some(decorrelate_covariate(&standardized, &eig, cs.axis, cs.k, spec.removal)?)
            } else {
                None
            };
            let column = match &decorrelated {
                Some(d) => d.z.iter().copied().collect(),
                None => standardized.values.clone(),
            };
            covariates.push(PreparedCovariate {
                spec: cs.clone(),
                standardized,
                decorrelated,
                column,
            });
        }

        let trimmed_spec = ModelSpec {
            age_effect,
            ..spec.clone()
        };
        let constraints = block_constraints(&trimmed_spec, age_structure.as_ref(), second_structure.as_ref());
        let rows_for = |role: BlockRole| -> Vec<DVector<f64>> {
            constraints
                .iter()
                .filter(|(r, _, _)| *r == role)
                .map(|(_, _, v)| v.clone())
                .collect()
        };

        let mut blocks = Vec::new();
        let mut hyper_names = Vec::new();
        blocks.push(LatentBlock::new(BlockRole::Intercept, "intercept".into(), 1, None, None, Vec::new()));
        for c in &covariates {
            blocks.push(LatentBlock::new(BlockRole::Covariate, c.spec.name.clone(), 1, None, None, Vec::new()));
        }
        if let Some(a) = &age_structure {
            hyper_names.push("age".to_string());
            blocks.push(LatentBlock::new(
                BlockRole::Age,
                "age".into(),
                n_age,
                Some(a.clone()),
                Some(hyper_names.len() - 1),
                rows_for(BlockRole::Age),
            ));
        }
        let second_role = match spec.kind {
            ModelKind::AgeTime => BlockRole::Time,
            ModelKind::AgeSpace => BlockRole::Space,
        };
        if let Some(s) = &second_structure {
            hyper_names.push(second_role.name().to_string());
            blocks.push(LatentBlock::new(
                second_role,
                second_role.name().into(),
                n_second,
                Some(s.clone()),
                Some(hyper_names.len() - 1),
                rows_for(second_role),
            ));
        }
        if let (Some(kind), Some(a), Some(s)) = (spec.interaction, &age_structure, &second_structure) {
            let r = interaction_structure(kind, s, a)?;
            hyper_names.push("interaction".to_string());
            blocks.push(LatentBlock::new(
                BlockRole::Interaction,
                format!("interaction {kind}"),
                n_age * n_second,
                Some(r),
                Some(hyper_names.len() - 1),
                rows_for(BlockRole::Interaction),
            ));
        }
        let (mut off, mut free_off) = (0, 0);
        for b in &mut blocks {
            b.offset = off;
            b.free_offset = free_off;
            off += b.len;
            free_off += b.free_len();
        }
        let n_latent = off;
        let n_free = free_off;

        let mut c_rows = DMatrix::zeros(constraints.len(), n_latent);
        let mut c_labels = Vec::new();
        for (i, (role, label, r)) in constraints.iter().enumerate() {
            let b = blocks.iter().find(|b| b.role == *role).expect("constraint block exists");
            c_rows.view_mut((i, b.offset), (1, b.len)).copy_from(&r.transpose());
            c_labels.push(label.clone());
        }

        let n_cells = cells.len();
        let mut design = DMatrix::zeros(n_cells, n_latent);
        for (i, c) in cells.iter().enumerate() {
            for b in &blocks {
                match b.role {
                    BlockRole::Intercept => design[(i, b.offset)] = 1.0,
                    BlockRole::Covariate => {}
                    BlockRole::Age => design[(i, b.offset + c.age)] = 1.0,
                    BlockRole::Time | BlockRole::Space => design[(i, b.offset + c.second)] = 1.0,
                    BlockRole::Interaction => design[(i, b.offset + c.second * n_age + c.age)] = 1.0,
                }
            }
            for (k, cov) in covariates.iter().enumerate() {
                design[(i, blocks[1 + k].offset)] = cov.column[c.second];
            }
        }
        let offsets = DVector::from_iterator(
            n_cells,
            cells.iter().map(|c| match likelihood {
                Likelihood::Poisson => c.exposure.ln(),
                Likelihood::Gaussian { .. } => 0.0,
            }),
        );

        let mut basis = DMatrix::zeros(n_latent, n_free);
        for b in &blocks {
            basis
                .view_mut((b.offset, b.free_offset), (b.len, b.free_len()))
                .copy_from(&b.basis);
        }
        let observed_rows: Vec<usize> = (0..n_cells).filter(|&i| cells[i].observed.is_some()).collect();
        if observed_rows.is_empty() {
            return Err(Error::Data("no observed cells".into()));
        }
        let observed = DVector::from_iterator(
            observed_rows.len(),
            observed_rows.iter().map(|&i| cells[i].observed.expect("observed")),
        );
        let obs_design = design.select_rows(observed_rows.iter());
        let free_design = &obs_design * &basis;

        Ok(Self {
            spec,
            likelihood,
            age_labels,
            second_labels,
            cells,
            blocks,
            constraints: ConstraintSet {
                rows: c_rows,
                labels: c_labels,
            },
            covariates,
            hyper_names,
            design,
            offsets,
            basis,
            observed_rows,
            observed,
            free_design,
        })
    }

    pub fn n_latent(&self) -> usize {
        self.basis.nrows()
    }

    pub fn n_free(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_hyper(&self) -> usize {
        self.hyper_names.len()
    }

    pub fn n_age(&self) -> usize {
        self.age_labels.len()
    }

    pub fn n_second(&self) -> usize {
        self.second_labels.len()
    }

    pub fn block(&self, role: BlockRole) -> Option<&LatentBlock> {
        self.blocks.iter().find(|b| b.role == role)
    }

    pub fn covariate_block(&self, name: &str) -> Option<&LatentBlock> {
        self.blocks
            .iter()
            .find(|b| b.role == BlockRole::Covariate && b.name == name)
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    /// Constraint-null-space basis, `n_latent × n_free`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Design rows of observed cells in free coordinates.
    pub fn free_design(&self) -> &DMatrix<f64> {
        &self.free_design
    }

    pub fn observed_rows(&self) -> &[usize] {
        &self.observed_rows
    }

    pub fn observed(&self) -> &DVector<f64> {
        &self.observed
    }

    pub fn observed_offsets(&self) -> DVector<f64> {
        DVector::from_iterator(self.observed_rows.len(), self.observed_rows.iter().map(|&i| self.offsets[i]))
    }

    pub fn expand(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.basis * z
    }

    /// Least-squares free coordinates of a feasible latent vector.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * x
    }

    /// Log-rate `η − log N` for every cell.
    pub fn log_rates(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.design * x
    }

    /// Linear predictor including the offset for every cell.
    pub fn linear_predictor(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.design * x + &self.offsets
    }

    /// Block-diagonal prior precision on the free coordinates.
    pub fn prior_precision(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.n_free();
        let mut q = DMatrix::zeros(n, n);
        for b in &self.blocks {
            let p = b.precision(theta, self.spec.fixed_precision);
            let fl = b.free_len();
            q.view_mut((b.free_offset, b.free_offset), (fl, fl))
                .copy_from(&(&b.restricted * p));
        }
        q
    }

    /// Constrained prior log density of free coordinates.
    pub fn log_prior_latent(&self, z: &DVector<f64>, theta: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let zb = z.rows(b.free_offset, b.free_len());
                b.log_prior(zb.as_slice(), b.precision(theta, self.spec.fixed_precision))
            })
            .sum()
    }

    /// Log-likelihood of one observation given its linear predictor.
    pub fn cell_log_likelihood(&self, observed: f64, eta: f64) -> f64 {
        match self.likelihood {
            Likelihood::Poisson => observed * eta - eta.exp() - statrs::function::gamma::ln_gamma(observed + 1.0),
            Likelihood::Gaussian { precision } => {
                0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * (observed - eta).powi(2)
            }
        }
    }

    /// Pointwise log-likelihood of the observed cells for a latent vector.
    pub fn pointwise_log_likelihood(&self, x: &DVector<f64>) -> Vec<f64> {
        let eta = self.linear_predictor(x);
        self.observed_rows
            .iter()
            .zip(self.observed.iter())
            .map(|(&i, &o)| self.cell_log_likelihood(o, eta[i]))
            .collect()
    }

    /// `−2 Σ log p(O | x)` over observed cells, including `log O!`.
    pub fn deviance(&self, x: &DVector<f64>) -> f64 {
        -2.0 * self.pointwise_log_likelihood(x).iter().sum::<f64>()
    }

    /// Position of a cell in `cells`.
    pub fn cell_index(&self, age: usize, second: usize) -> usize {
        second * self.n_age() + age
    }
}

/// Collapses one sex of a dataset onto the model grid. Cells whose every
/// constituent is missing stay missing; otherwise missing constituents are
/// dropped from both the count and the exposure.
pub fn collapse_dataset(
    dataset: &Dataset,
    sex: usize,
    kind: ModelKind,
    area_order: &[usize],
) -> Vec<ModelCell> {
    let n_age = dataset.age_groups().len();
    let (n_second, n_other) = match kind {
        ModelKind::AgeTime => (dataset.years().len(), dataset.areas().len()),
        ModelKind::AgeSpace => (area_order.len(), dataset.years().len()),
    };
    let mut cells = Vec::with_capacity(n_age * n_second);
    for j in 0..n_second {
        for a in 0..n_age {
            let mut deaths = 0.0;
            let mut pop_obs = 0.0;
            let mut pop_all = 0.0;
            let mut any = false;
            for o in 0..n_other {
                let (area, year) = match kind {
                    ModelKind::AgeTime => (o, j),
                    ModelKind::AgeSpace => (area_order[j], o),
                };
                let c = dataset.cell(sex, area, year, a);
                pop_all += c.population;
                if let Some(d) = c.deaths {
                    any = true;
                    deaths += d as f64;
                    pop_obs += c.population;
                }
            }
            cells.push(ModelCell {
                age: a,
                second: j,
                observed: any.then_some(deaths),
                exposure: if any { pop_obs } else { pop_all },
            });
        }
    }
    cells
}

/// Builds the latent Gaussian model for one sex of a dataset. Age-space
/// models need the adjacency graph; areas follow the graph's order.
pub fn assemble_model(
    spec: &ModelSpec,
    dataset: &Dataset,
    graph: Option<&AdjacencyGraph>,
) -> Result<AssembledModel> {
    spec.validate()?;
    let sex = match &spec.sex {
        Some(s) => dataset.sex_index(s)?,
        None if dataset.sexes().len() == 1 => 0,
        None => {
            return Err(Error::InvalidSpec(format!(
                "dataset has sexes {:?}; the specification must select one",
                dataset.sexes()
            )))
        }
    };
    let sex_label = dataset.sexes()[sex].clone();
    let (second_labels, area_order, second_structure) = match spec.kind {
        ModelKind::AgeTime => {
            let labels: Vec<String> = dataset.years().iter().map(|y| y.to_string()).collect();
            let structure = match spec.second_prior {
                Some(SecondPrior::Rw1) => Some(rw_structure(labels.len(), 1)?),
                Some(SecondPrior::Rw2) => Some(rw_structure(labels.len(), 2)?),
                _ => None,
            };
            (labels, Vec::new(), structure)
        }
        ModelKind::AgeSpace => {
            let g = graph.ok_or_else(|| Error::InvalidSpec("age-space models need an adjacency graph".into()))?;
            if g.n_areas() != dataset.areas().len() {
                return Err(Error::Data(format!(
                    "graph has {} areas, dataset has {}",
                    g.n_areas(),
                    dataset.areas().len()
                )));
            }
            let order = g
                .labels()
                .iter()
                .map(|l| {
                    dataset
                        .areas()
                        .iter()
                        .position(|a| a == l)
                        .ok_or_else(|| Error::Data(format!("graph area {l:?} not in dataset")))
                })
                .collect::<Result<Vec<_>>>()?;
            (g.labels().to_vec(), order, spec.second_prior.map(|_| icar_structure(g)))
        }
    };
    let cells = collapse_dataset(dataset, sex, spec.kind, &area_order);
    let mut covariate_values = Vec::new();
    for c in &spec.covariates {
        let values = match c.axis {
            Axis::Spatial => {
                let v = dataset
                    .spatial_covariates()
                    .get(&c.name)
                    .ok_or_else(|| Error::Data(format!("no spatial covariate named {}", c.name)))?;
                area_order.iter().map(|&i| v[i]).collect()
            }
            Axis::Temporal => dataset
                .temporal_covariates()
                .get(&c.name)
                .and_then(|t| t.for_sex(&sex_label))
                .ok_or_else(|| Error::Data(format!("no temporal covariate named {} for sex {sex_label}", c.name)))?
                .to_vec(),
        };
        covariate_values.push(values);
    }
    AssembledModel::from_input(ModelInput {
        spec: ModelSpec {
            sex: Some(sex_label),
            ..spec.clone()
        },
        likelihood: Likelihood::Poisson,
        age_labels: dataset.age_groups().to_vec(),
        second_labels,
        cells,
        second_structure,
        covariate_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_male_and_female_specs() {
        let m = parse_model_spec("age-time; age=rw1; time=rw1; interaction=II").unwrap();
        assert_eq!(m.kind, ModelKind::AgeTime);
        assert_eq!(m.second_prior, Some(SecondPrior::Rw1));
        assert_eq!(m.interaction, Some(InteractionType::II));
        let f = parse_model_spec("age-time\nage=rw1\ntime=rw2\ninteraction=IV\n").unwrap();
        assert_eq!(f.second_prior, Some(SecondPrior::Rw2));
        assert_eq!(f.interaction, Some(InteractionType::IV));
        assert_eq!(parse_model_spec(&f.to_config()).unwrap(), f);
    }

    #[test]
    fn parse_rejects_axis_prior_mismatch() {
        assert!(parse_model_spec("age-space; time=rw1").is_err());
        assert!(parse_model_spec("age-time; time=icar").is_err());
        assert!(parse_model_spec("age-time; interaction=V").is_err());
        assert!(parse_model_spec("age-time; covariate=rural:spatial").is_err());
        assert!(parse_model_spec("time=rw1; colour=blue").is_err());
    }

    #[test]
    fn parse_covariates() {
        let s = parse_model_spec("age-space; interaction=III; covariate=rural:spatial:k=5; covariate=unemp:spatial").unwrap();
        assert_eq!(s.covariates.len(), 2);
        assert!(s.covariates[0].decorrelate);
        assert_eq!(s.covariates[0].k, 5);
        assert!(!s.covariates[1].decorrelate);
        assert!(s.check_dims(47).is_ok());
        let too_many = parse_model_spec("age-space; covariate=rural:spatial:k=10").unwrap();
        assert!(too_many.check_dims(47).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(ModelSpec::preset("male_agetime").unwrap().interaction, Some(InteractionType::II));
        assert_eq!(ModelSpec::preset("female_agetime").unwrap().second_prior, Some(SecondPrior::Rw2));
        assert_eq!(ModelSpec::preset("female_agespace").unwrap().kind, ModelKind::AgeSpace);
        assert!(ModelSpec::preset("child_agetime").is_none());
    }

    #[test]
    fn constraint_counts() {
        let rw13 = rw_structure(13, 1).unwrap();
        let additive = ModelSpec::age_time(SecondPrior::Rw1, None);
        assert_eq!(constraint_set(&additive, 8, &rw13, 0).unwrap().len(), 2);
        let iv = ModelSpec::age_time(SecondPrior::Rw1, Some(InteractionType::IV));
        let c = constraint_set(&iv, 8, &rw13, 0).unwrap();
        assert_eq!(c.len(), 22);
        assert_eq!(c.rank(), 22);
        let path: Vec<(usize, usize)> = (0..46).map(|i| (i, i + 1)).collect();
        let g = AdjacencyGraph::from_edges((0..47).map(|i| i.to_string()).collect(), &path).unwrap();
        let iii = ModelSpec::age_space(Some(InteractionType::III));
        assert_eq!(constraint_set(&iii, 8, &icar_structure(&g), 0).unwrap().len(), 2 + 47);
    }

    #[test]
    fn rw2_interaction_constraints_span_null_space() {
        let rw13 = rw_structure(13, 2).unwrap();
        let iv = ModelSpec::age_time(SecondPrior::Rw2, Some(InteractionType::IV));
        let c = constraint_set(&iv, 8, &rw13, 0).unwrap();
        // main effects 2, interaction nullity 2·8 + 13·1 − 2·1 = 27.
        assert_eq!(c.len(), 2 + 27);
    }

    fn toy_input(spec: ModelSpec, n_age: usize, n_second: usize) -> ModelInput {
        let cells = (0..n_second)
            .flat_map(|j| {
                (0..n_age).map(move |a| ModelCell {
                    age: a,
                    second: j,
                    observed: Some(10.0 + (a + 2 * j) as f64),
                    exposure: 1000.0,
                })
            })
            .collect();
        ModelInput {
            spec,
            likelihood: Likelihood::Poisson,
            age_labels: (0..n_age).map(|a| format!("a{a}")).collect(),
            second_labels: (0..n_second).map(|j| format!("t{j}")).collect(),
            cells,
            second_structure: Some(rw_structure(n_second, 1).unwrap()),
            covariate_values: Vec::new(),
        }
    }

    #[test]
    fn latent_dimension_arithmetic() {
        let m = AssembledModel::from_input(toy_input(
            ModelSpec::age_time(SecondPrior::Rw1, Some(InteractionType::II)),
            8,
            13,
        ))
        .unwrap();
        assert_eq!(m.n_latent(), 1 + 8 + 13 + 104);
        assert_eq!(m.n_hyper(), 3);
        assert_eq!(m.constraints.len(), 2 + 8);
        assert_eq!(m.n_free(), m.n_latent() - m.constraints.len());
        // Every basis vector is feasible.
        assert!((&m.constraints.rows * m.basis()).amax() < 1e-12);
    }

    #[test]
    fn per_block_nullity_matches_constraints() {
        for kind in InteractionType::ALL {
            let m = AssembledModel::from_input(toy_input(
                ModelSpec::age_time(SecondPrior::Rw1, Some(kind)),
                4,
                5,
            ))
            .unwrap();
            for b in m.blocks.iter().filter(|b| b.structure.is_some()) {
                let s = b.structure.as_ref().unwrap();
                let expected = if kind == InteractionType::I && b.role == BlockRole::Interaction {
                    1
                } else {
                    s.nullity()
                };
                assert_eq!(b.constraint_rows.len(), expected, "{kind} {:?}", b.role);
                // Restricted structure is positive definite on the feasible subspace.
                assert_eq!(b.prior_rank, b.free_len());
                assert!(nalgebra::Cholesky::new(b.restricted.clone()).is_some());
            }
        }
    }

    #[test]
    fn missing_cells_excluded_from_likelihood() {
        let mut input = toy_input(ModelSpec::age_time(SecondPrior::Rw1, None), 3, 4);
        input.cells[5].observed = None;
        input.cells[7].observed = None;
        let m = AssembledModel::from_input(input).unwrap();
        assert_eq!(m.observed_rows().len(), 10);
        assert!(!m.observed_rows().contains(&5));
        assert_eq!(m.design().nrows(), 12);
    }

    #[test]
    fn zero_exposure_with_count_rejected() {
        let mut input = toy_input(ModelSpec::age_time(SecondPrior::Rw1, None), 3, 4);
        input.cells[2].exposure = 0.0;
        assert!(matches!(AssembledModel::from_input(input), Err(Error::Data(_))));
    }
}
