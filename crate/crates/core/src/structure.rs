//! Precision structure matrices for intrinsic GMRF priors.
//!
//! Every prior in the models is `N(0, [τ R]⁻)` for some positive semidefinite
//! structure `R`. This module builds the random-walk and iCAR structures,
//! scales them so that the geometric mean of the generalized-inverse diagonal
//! is one, and combines them into Kronecker interaction structures with the
//! age index varying fastest.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjacencyGraph;

/// Relative eigenvalue cutoff used for ranks and generalized inverses.
pub const RANK_TOL: f64 = 1e-9;

/// Where a structure matrix came from. Determines the sum-to-zero rows used
/// for main effects.
#[derive(Debug, Clone, PartialEq)]
pub enum StructureKind {
    RandomWalk { order: usize },
    Icar { component_of: Vec<usize>, n_components: usize },
    Identity,
    Kronecker,
    Dense,
}

#[derive(Debug, Clone)]
pub struct StructureMatrix {
    kind: StructureKind,
    entries: DMatrix<f64>,
    rank: usize,
    null_basis: DMatrix<f64>,
    scaled: bool,
    scale_factor: f64,
}

impl StructureMatrix {
    /// Wraps an arbitrary symmetric PSD matrix, computing rank and null space
    /// by eigendecomposition.
    pub fn from_dense(entries: DMatrix<f64>) -> Result<Self> {
        Self::with_kind(entries, StructureKind::Dense)
    }

    fn with_kind(entries: DMatrix<f64>, kind: StructureKind) -> Result<Self> {
        let eig = eigendecompose(&entries)?;
        let lmax = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if eig.values.iter().any(|&v| v < -RANK_TOL * lmax.max(f64::MIN_POSITIVE)) {
            return Err(Error::Numerical(
                "structure matrix is not positive semidefinite".into(),
            ));
        }
        let cut = RANK_TOL * lmax;
        let rank = eig.values.iter().filter(|&&v| v > cut).count();
        let n = entries.nrows();
        let null_basis = eig.vectors.columns(rank, n - rank).into_owned();
        Ok(Self {
            kind,
            entries,
            rank,
            null_basis,
            scaled: false,
            scale_factor: 1.0,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            kind: StructureKind::Identity,
            entries: DMatrix::identity(n, n),
            rank: n,
            null_basis: DMatrix::zeros(n, 0),
            scaled: true,
            scale_factor: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nullity(&self) -> usize {
        self.dim() - self.rank
    }

    /// Orthonormal basis of the null space, one column per direction.
    pub fn null_basis(&self) -> &DMatrix<f64> {
        &self.null_basis
    }

    pub fn is_scaled(&self) -> bool {
        self.scaled
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    pub fn kind(&self) -> &StructureKind {
        &self.kind
    }

    /// Rows whose vanishing identifies a main effect against the intercept:
    /// a constant row for random walks, one indicator row per connected
    /// component for iCAR. Empty for proper structures.
    pub fn sum_to_zero_rows(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        match &self.kind {
            StructureKind::RandomWalk { .. } => vec![DVector::from_element(n, 1.0)],
            StructureKind::Icar {
                component_of,
                n_components,
            } => (0..*n_components)
                .map(|c| DVector::from_iterator(n, component_of.iter().map(|&k| f64::from(k == c))))
                .collect(),
            StructureKind::Identity => Vec::new(),
            StructureKind::Kronecker | StructureKind::Dense => {
                self.null_basis.column_iter().map(|c| c.into_owned()).collect()
            }
        }
    }

    /// Moore-Penrose generalized inverse via eigendecomposition, discarding
    /// eigenvalues below `RANK_TOL · λ_max`.
    pub fn generalized_inverse(&self) -> DMatrix<f64> {
        pseudo_inverse(&self.entries)
    }

    /// Log pseudo-determinant (sum of log nonzero eigenvalues).
    pub fn log_pdet(&self) -> f64 {
        let eig = eigendecompose(&self.entries).expect("structure matrices are symmetric");
        eig.values.iter().take(self.rank).map(|v| v.ln()).sum()
    }

    /// Geometric mean of the diagonal of the generalized inverse, taken over
    /// entries with nonzero marginal variance (isolated iCAR areas have none).
    pub fn marginal_variance_gm(&self) -> f64 {
        let pinv = self.generalized_inverse();
        geometric_mean_positive(pinv.diagonal().iter().copied())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        is_symmetric(&self.entries, tol)
    }
}

impl fmt::Display for StructureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} structure, dim {}, rank {}, scale {:.6}",
            self.kind,
            self.dim(),
            self.rank,
            self.scale_factor
        )
    }
}

/// Eigenvalues sorted descending with matching orthonormal eigenvectors as
/// columns. The smallest eigenvalues sit at the trailing indices.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.vectors * DMatrix::from_diagonal(&self.values);
        scaled * self.vectors.transpose()
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// Full symmetric eigendecomposition with eigenvalues in descending order.
pub fn eigendecompose(m: &DMatrix<f64>) -> Result<EigenSystem> {
    if !is_symmetric(m, 1e-12) {
        return Err(Error::Dimension(
            "eigendecompose requires a square symmetric matrix".into(),
        ));
    }
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // Deterministic sign: first entry of largest magnitude is positive.
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok(EigenSystem { values, vectors })
}

pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = eigendecompose(m).expect("pseudo_inverse requires a symmetric matrix");
    let lmax = eig.values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let cut = RANK_TOL * lmax;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, &v) in eig.values.iter().enumerate() {
        if v > cut {
            let u = eig.vectors.column(k);
            out += (u * u.transpose()) / v;
        }
    }
    out
}

fn geometric_mean_positive(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values
        .filter(|v| *v > 0.0)
        .fold((0.0, 0usize), |(s, c), v| (s + v.ln(), c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).exp()
    }
}

/// Difference matrix of the given order, `(n - order) × n`.
fn difference_matrix(n: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(n, n);
    for _ in 0..order {
        let rows = d.nrows();
        let mut next = DMatrix::zeros(rows - 1, n);
        for i in 0..rows - 1 {
            let diff = d.row(i + 1) - d.row(i);
            next.set_row(i, &diff);
        }
        d = next;
    }
    d
}

/// Random-walk structure `DᵀD` with `D` the order-th difference matrix.
pub fn rw_structure(n: usize, order: usize) -> Result<StructureMatrix> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidSpec(format!(
            "random-walk order must be 1 or 2, got {order}"
        )));
    }
    if n < order + 1 {
        return Err(Error::InvalidSpec(format!(
            "RW{order} needs at least {} levels, got {n}",
            order + 1
        )));
    }
    let d = difference_matrix(n, order);
    let entries = d.transpose() * d;
    // Null space: polynomials of degree < order, orthonormalized.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for deg in 0..order {
        let v = DVector::from_iterator(n, (0..n).map(|i| (i as f64).powi(deg as i32)));
        basis.push(v);
    }
    let null_basis = orthonormalize(&basis);
    Ok(StructureMatrix {
        kind: StructureKind::RandomWalk { order },
        entries,
        rank: n - order,
        null_basis,
        scaled: false,
        scale_factor: 1.0,
    })
}

/// iCAR structure `D_W − W`. Disconnected graphs get one null direction per
/// connected component.
pub fn icar_structure(graph: &AdjacencyGraph) -> StructureMatrix {
    let n = graph.n_areas();
    let mut entries = DMatrix::zeros(n, n);
    for i in 0..n {
        let nb = graph.neighbours(i);
        entries[(i, i)] = nb.len() as f64;
        for &j in nb {
            entries[(i, j)] = -1.0;
        }
    }
    let comps = graph.n_components();
    let indicators: Vec<DVector<f64>> = (0..comps)
        .map(|c| {
            DVector::from_iterator(
                n,
                graph.component_of().iter().map(|&k| f64::from(k == c)),
            )
        })
        .collect();
    StructureMatrix {
        kind: StructureKind::Icar {
            component_of: graph.component_of().to_vec(),
            n_components: comps,
        },
        entries,
        rank: n - comps,
        null_basis: orthonormalize(&indicators),
        scaled: false,
        scale_factor: 1.0,
    }
}

/// Multiplies `R` by the geometric mean of the diagonal of `R⁻`, so the
/// scaled prior has unit geometric-mean marginal variance.
pub fn scale_structure(r: &StructureMatrix) -> Result<StructureMatrix> {
    if r.rank == 0 || r.entries.amax() == 0.0 {
        return Err(Error::Numerical("cannot scale a zero structure matrix".into()));
    }
    let c = r.marginal_variance_gm();
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Numerical(format!("invalid scale factor {c}")));
    }
    Ok(StructureMatrix {
        kind: r.kind.clone(),
        entries: &r.entries * c,
        rank: r.rank,
        null_basis: r.null_basis.clone(),
        scaled: true,
        scale_factor: r.scale_factor * c,
    })
}

/// Knorr-Held interaction types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InteractionType {
    I,
    II,
    III,
    IV,
}

impl InteractionType {
    pub const ALL: [InteractionType; 4] = [Self::I, Self::II, Self::III, Self::IV];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Some(Self::I),
            "II" | "2" => Some(Self::II),
            "III" | "3" => Some(Self::III),
            "IV" | "4" => Some(Self::IV),
            _ => None,
        }
    }

    /// Whether the time/space factor is structured (II, IV).
    pub fn structured_second(self) -> bool {
        matches!(self, Self::II | Self::IV)
    }

    /// Whether the age factor is structured (III, IV).
    pub fn structured_age(self) -> bool {
        matches!(self, Self::III | Self::IV)
    }
}

impl fmt::Display for InteractionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
        };
        f.write_str(s)
    }
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Interaction structure with the second (time or space) factor on the left,
/// so the age index varies fastest within the interaction block.
pub fn interaction_structure(
    kind: InteractionType,
    second: &StructureMatrix,
    age: &StructureMatrix,
) -> Result<StructureMatrix> {
    if second.dim() == 0 || age.dim() == 0 {
        return Err(Error::Dimension("interaction factor with zero dimension".into()));
    }
    let left = if kind.structured_second() {
        second.clone()
    } else {
        StructureMatrix::identity(second.dim())
    };
    let right = if kind.structured_age() {
        age.clone()
    } else {
        StructureMatrix::identity(age.dim())
    };
    if kind == InteractionType::I {
        return Ok(StructureMatrix::identity(second.dim() * age.dim()));
    }
    let entries = kronecker(&left.entries, &right.entries);
    let null_basis = kronecker_null_basis(&left, &right)?;
    let rank = left.rank * right.rank;
    debug_assert_eq!(rank + null_basis.ncols(), entries.nrows());
    Ok(StructureMatrix {
        kind: StructureKind::Kronecker,
        entries,
        rank,
        null_basis,
        scaled: left.scaled && right.scaled,
        scale_factor: left.scale_factor * right.scale_factor,
    })
}

/// Null space of `L ⊗ R`: `null(L) ⊗ ℝ^b` plus `range(L) ⊗ null(R)`.
fn kronecker_null_basis(left: &StructureMatrix, right: &StructureMatrix) -> Result<DMatrix<f64>> {
    let le = eigendecompose(&left.entries)?;
    let re = eigendecompose(&right.entries)?;
    let (na, nb) = (left.dim(), right.dim());
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for i in left.rank..na {
        for j in 0..nb {
            cols.push(kron_vec(&le.vectors.column(i).into_owned(), &re.vectors.column(j).into_owned()));
        }
    }
    for i in 0..left.rank {
        for j in right.rank..nb {
            cols.push(kron_vec(&le.vectors.column(i).into_owned(), &re.vectors.column(j).into_owned()));
        }
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(na * nb, 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

pub fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        a.len() * b.len(),
        a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)),
    )
}

/// Gram-Schmidt with re-orthogonalization; drops numerically dependent
/// vectors. Returns the basis as columns.
pub fn orthonormalize(vectors: &[DVector<f64>]) -> DMatrix<f64> {
    let n = vectors.first().map_or(0, |v| v.len());
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let norm = w.norm();
        if norm > 1e-10 * norm0 {
            basis.push(w / norm);
        }
    }
    if basis.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}
