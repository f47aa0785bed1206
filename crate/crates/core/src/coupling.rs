//! Coupling specifications and the correlation structures they induce.
//!
//! A coupling of `k` noise vectors in `R^d` is described declaratively by a
//! [`CouplingSpec`]. Every kind here is jointly Gaussian with
//! `Cov(z_i, z_j) = R[i, j] I_d` (or a block version of that on a subspace
//! split), so the `k x k` sample correlation `R` carries all of the
//! dependence structure.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CouplingError, Result};

/// Row-norm tolerance for coupling matrices.
pub const ROW_NORM_TOL: f64 = 1e-9;
/// Smallest eigenvalue accepted as positive semidefinite.
pub const PSD_TOL: f64 = -1e-8;
/// Eigenvalues at or below this are treated as zero when computing rank.
pub const RANK_TOL: f64 = 1e-8;
/// Orthonormality tolerance for subspace bases.
pub const BASIS_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-9;

/// Lower end of the feasible equicorrelation interval for `k` samples.
pub fn min_equicorrelation(k: usize) -> f64 {
    -1.0 / (k as f64 - 1.0)
}

/// Checks `-1/(k-1) <= c <= 1`.
pub fn check_equicorrelation(k: usize, c: f64) -> Result<()> {
    if k < 2 {
        return Err(CouplingError::invalid(
            "equicorrelated coupling needs k >= 2",
        ));
    }
    let lower = min_equicorrelation(k);
    if !(c >= lower && c <= 1.0) {
        return Err(CouplingError::Feasibility {
            k,
            c,
            lower,
            upper: 1.0,
        });
    }
    Ok(())
}

/// Serialized form of a dense matrix: a list of rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRows {
    pub rows: Vec<Vec<f64>>,
}

impl MatrixRows {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        MatrixRows { rows }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let nrows = self.rows.len();
        if nrows == 0 {
            return Err(CouplingError::invalid("matrix has no rows"));
        }
        let ncols = self.rows[0].len();
        if ncols == 0 || self.rows.iter().any(|r| r.len() != ncols) {
            return Err(CouplingError::invalid(
                "matrix rows must be non-empty and of equal length",
            ));
        }
        if self.rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(CouplingError::invalid("matrix has non-finite entries"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| self.rows[i][j]))
    }
}

/// A `k x r` matrix with unit Euclidean norm on each row.
///
/// With `U` an `r x d` matrix of i.i.d. standard normal rows, `Z = A U` is a
/// coupling of `k` standard Gaussian vectors with sample correlation `A Aᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRows", into = "MatrixRows")]
pub struct CouplingMatrix {
    entries: DMatrix<f64>,
}

impl CouplingMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(CouplingError::invalid("coupling matrix must be non-empty"));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(CouplingError::invalid(
                "coupling matrix has non-finite entries",
            ));
        }
        for (i, row) in entries.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > ROW_NORM_TOL {
                return Err(CouplingError::invalid(format!(
                    "row {i} of coupling matrix has norm {norm}, expected 1"
                )));
            }
        }
        Ok(CouplingMatrix { entries })
    }

    /// Rescales every row to unit norm. Fails on a zero row.
    pub fn normalized(mut entries: DMatrix<f64>) -> Result<Self> {
        normalize_rows(&mut entries)?;
        Self::new(entries)
    }

    pub fn identity(k: usize) -> Self {
        CouplingMatrix {
            entries: DMatrix::identity(k, k),
        }
    }

    /// `sqrt(k/(k-1)) (I - 11ᵀ/k)`, the matrix form of the repulsive coupling.
    pub fn repulsive(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(CouplingError::invalid("repulsive coupling needs k >= 2"));
        }
        let kf = k as f64;
        let scale = (kf / (kf - 1.0)).sqrt();
        let m = DMatrix::from_fn(k, k, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            scale * (delta - 1.0 / kf)
        });
        Self::normalized(m)
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn r(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// `A Aᵀ`.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.entries * self.entries.transpose()
    }

    pub fn correlation(&self) -> Result<SampleCorrelation> {
        SampleCorrelation::new(symmetrize(self.gram()))
    }
}

impl TryFrom<MatrixRows> for CouplingMatrix {
    type Error = CouplingError;
    fn try_from(value: MatrixRows) -> Result<Self> {
        CouplingMatrix::new(value.to_matrix()?)
    }
}

impl From<CouplingMatrix> for MatrixRows {
    fn from(value: CouplingMatrix) -> Self {
        MatrixRows::from_matrix(&value.entries)
    }
}

pub(crate) fn normalize_rows(m: &mut DMatrix<f64>) -> Result<()> {
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(CouplingError::invalid(
                "cannot normalize a zero or non-finite row",
            ));
        }
        row /= norm;
    }
    Ok(())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// A symmetric positive semidefinite `k x k` matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRows", into = "MatrixRows")]
pub struct SampleCorrelation {
    entries: DMatrix<f64>,
}

impl SampleCorrelation {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let k = entries.nrows();
        if k == 0 || entries.ncols() != k {
            return Err(CouplingError::mismatch(
                "correlation matrix must be square and non-empty",
            ));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(CouplingError::invalid(
                "correlation matrix has non-finite entries",
            ));
        }
        for i in 0..k {
            if (entries[(i, i)] - 1.0).abs() > SYMMETRY_TOL {
                return Err(CouplingError::invalid(format!(
                    "correlation diagonal entry {i} is {}, expected 1",
                    entries[(i, i)]
                )));
            }
            for j in 0..i {
                if (entries[(i, j)] - entries[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(CouplingError::invalid(
                        "correlation matrix is not symmetric",
                    ));
                }
            }
        }
        let min_eigenvalue = sorted_eigen(&entries)
            .0
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eigenvalue < PSD_TOL {
            return Err(CouplingError::NotPsd { min_eigenvalue });
        }
        Ok(SampleCorrelation { entries })
    }

    pub fn identity(k: usize) -> Self {
        SampleCorrelation {
            entries: DMatrix::identity(k, k),
        }
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        sorted_eigen(&self.entries).0
    }

    /// `B = R - I`.
    pub fn offset_from_identity(&self) -> DMatrix<f64> {
        &self.entries - DMatrix::identity(self.k(), self.k())
    }

    /// `(1 - t) I + t R`.
    pub fn interpolate(&self, t: f64) -> Result<SampleCorrelation> {
        let k = self.k();
        let m = DMatrix::identity(k, k) * (1.0 - t) + &self.entries * t;
        SampleCorrelation::new(m)
    }

    /// Largest off-diagonal entry, or `None` when `k = 1`.
    pub fn max_off_diagonal(&self) -> Option<f64> {
        let k = self.k();
        (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.entries[(i, j)])
            .reduce(f64::max)
    }
}

impl TryFrom<MatrixRows> for SampleCorrelation {
    type Error = CouplingError;
    fn try_from(value: MatrixRows) -> Result<Self> {
        SampleCorrelation::new(value.to_matrix()?)
    }
}

impl From<SampleCorrelation> for MatrixRows {
    fn from(value: SampleCorrelation) -> Self {
        MatrixRows::from_matrix(&value.entries)
    }
}

/// Eigenvalues (descending) and matching eigenvector columns.
fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// How a noise coupling ties the `k` samples together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CouplingKind {
    Identical,
    Independent,
    Antithetic,
    Equicorrelated { c: f64 },
    Repulsive,
    Matrix(CouplingMatrix),
    Subspace(Box<SubspaceSpec>),
}

impl CouplingKind {
    pub fn name(&self) -> &'static str {
        match self {
            CouplingKind::Identical => "identical",
            CouplingKind::Independent => "independent",
            CouplingKind::Antithetic => "antithetic",
            CouplingKind::Equicorrelated { .. } => "equicorrelated",
            CouplingKind::Repulsive => "repulsive",
            CouplingKind::Matrix(_) => "matrix",
            CouplingKind::Subspace(_) => "subspace",
        }
    }

    /// Validates the kind for gallery size `k`, ignoring dimension constraints.
    fn check_for_k(&self, k: usize) -> Result<()> {
        match self {
            CouplingKind::Identical | CouplingKind::Independent => Ok(()),
            CouplingKind::Antithetic if k != 2 => Err(CouplingError::invalid(format!(
                "antithetic coupling requires k = 2, got {k}"
            ))),
            CouplingKind::Antithetic => Ok(()),
            CouplingKind::Repulsive if k < 2 => {
                Err(CouplingError::invalid("repulsive coupling requires k >= 2"))
            }
            CouplingKind::Repulsive => Ok(()),
            CouplingKind::Equicorrelated { c } => check_equicorrelation(k, *c),
            CouplingKind::Matrix(a) if a.k() != k => Err(CouplingError::invalid(format!(
                "coupling matrix has {} rows, expected k = {k}",
                a.k()
            ))),
            CouplingKind::Matrix(_) => Ok(()),
            CouplingKind::Subspace(s) => {
                s.inner.check_for_k(k)?;
                s.outer.check_for_k(k)
            }
        }
    }
}

/// Independent coupling choices on a subspace `V` and on its complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSubspace", into = "RawSubspace")]
pub struct SubspaceSpec {
    basis: DMatrix<f64>,
    pub inner: CouplingKind,
    pub outer: CouplingKind,
}

#[derive(Serialize, Deserialize)]
struct RawSubspace {
    basis: MatrixRows,
    inner: CouplingKind,
    outer: CouplingKind,
}

impl TryFrom<RawSubspace> for SubspaceSpec {
    type Error = CouplingError;
    fn try_from(raw: RawSubspace) -> Result<Self> {
        SubspaceSpec::new(raw.basis.to_matrix()?, raw.inner, raw.outer)
    }
}

impl From<SubspaceSpec> for RawSubspace {
    fn from(s: SubspaceSpec) -> Self {
        RawSubspace {
            basis: MatrixRows::from_matrix(&s.basis),
            inner: s.inner,
            outer: s.outer,
        }
    }
}

impl SubspaceSpec {
    /// `basis` is `d x s` with orthonormal columns spanning `V`.
    pub fn new(basis: DMatrix<f64>, inner: CouplingKind, outer: CouplingKind) -> Result<Self> {
        if basis.ncols() == 0 || basis.ncols() > basis.nrows() {
            return Err(CouplingError::invalid(
                "subspace basis must be d x s with 1 <= s <= d",
            ));
        }
        let gram = basis.transpose() * &basis;
        let s = basis.ncols();
        let dev = (gram - DMatrix::<f64>::identity(s, s)).amax();
        if dev.is_nan() || dev > BASIS_TOL {
            return Err(CouplingError::invalid(format!(
                "subspace basis is not orthonormal (deviation {dev:e})"
            )));
        }
        if matches!(inner, CouplingKind::Subspace(_)) || matches!(outer, CouplingKind::Subspace(_))
        {
            return Err(CouplingError::invalid(
                "subspace couplings cannot be nested",
            ));
        }
        Ok(SubspaceSpec {
            basis,
            inner,
            outer,
        })
    }

    /// Subspace spanned by the listed coordinate axes of `R^d`.
    pub fn coordinates(
        d: usize,
        coords: &[usize],
        inner: CouplingKind,
        outer: CouplingKind,
    ) -> Result<Self> {
        let mut basis = DMatrix::zeros(d, coords.len());
        for (col, &c) in coords.iter().enumerate() {
            if c >= d {
                return Err(CouplingError::invalid(format!(
                    "coordinate {c} out of range for d = {d}"
                )));
            }
            basis[(c, col)] = 1.0;
        }
        Self::new(basis, inner, outer)
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `P_V = Q Qᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }
}

/// Declarative description of a coupling: kind, gallery size `k` and noise dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct CouplingSpec {
    kind: CouplingKind,
    k: usize,
    d: usize,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    kind: CouplingKind,
    k: usize,
    d: usize,
}

impl TryFrom<RawSpec> for CouplingSpec {
    type Error = CouplingError;
    fn try_from(raw: RawSpec) -> Result<Self> {
        CouplingSpec::new(raw.kind, raw.k, raw.d)
    }
}

impl From<CouplingSpec> for RawSpec {
    fn from(s: CouplingSpec) -> Self {
        RawSpec {
            kind: s.kind,
            k: s.k,
            d: s.d,
        }
    }
}

impl CouplingSpec {
    pub fn new(kind: CouplingKind, k: usize, d: usize) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(CouplingError::invalid("k and d must be positive"));
        }
        kind.check_for_k(k)?;
        if let CouplingKind::Subspace(s) = &kind {
            if s.ambient_dim() != d {
                return Err(CouplingError::invalid(format!(
                    "subspace basis has {} rows, expected d = {d}",
                    s.ambient_dim()
                )));
            }
        }
        Ok(CouplingSpec { kind, k, d })
    }

    pub fn identical(k: usize, d: usize) -> Result<Self> {
        Self::new(CouplingKind::Identical, k, d)
    }

    pub fn independent(k: usize, d: usize) -> Result<Self> {
        Self::new(CouplingKind::Independent, k, d)
    }

    pub fn antithetic(d: usize) -> Result<Self> {
        Self::new(CouplingKind::Antithetic, 2, d)
    }

    pub fn repulsive(k: usize, d: usize) -> Result<Self> {
        Self::new(CouplingKind::Repulsive, k, d)
    }

    pub fn equicorrelated(k: usize, d: usize, c: f64) -> Result<Self> {
        Self::new(CouplingKind::Equicorrelated { c }, k, d)
    }

    pub fn matrix(a: CouplingMatrix, d: usize) -> Result<Self> {
        let k = a.k();
        Self::new(CouplingKind::Matrix(a), k, d)
    }

    pub fn subspace(s: SubspaceSpec, k: usize) -> Result<Self> {
        let d = s.ambient_dim();
        Self::new(CouplingKind::Subspace(Box::new(s)), k, d)
    }

    pub fn kind(&self) -> &CouplingKind {
        &self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Same kind in a different noise dimension. Not available for subspace kinds.
    pub fn with_dim(&self, d: usize) -> Result<Self> {
        Self::new(self.kind.clone(), self.k, d)
    }
}

/// Sample-level correlation implied by a spec.
///
/// Subspace couplings are block separable: `Cov(z_i, z_j) = R_V[i,j] P_V + R_perp[i,j] P_perp`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "structure", rename_all = "snake_case")]
pub enum CorrelationStructure {
    Uniform(SampleCorrelation),
    Subspace {
        on_subspace: SampleCorrelation,
        on_complement: SampleCorrelation,
        subspace_dim: usize,
        ambient_dim: usize,
    },
}

impl CorrelationStructure {
    /// `(1/d) E⟨z_i, z_j⟩` for full noise vectors.
    pub fn full_vector(&self) -> DMatrix<f64> {
        match self {
            CorrelationStructure::Uniform(r) => r.entries().clone(),
            CorrelationStructure::Subspace {
                on_subspace,
                on_complement,
                subspace_dim,
                ambient_dim,
            } => {
                let s = *subspace_dim as f64;
                let d = *ambient_dim as f64;
                (on_subspace.entries() * s + on_complement.entries() * (d - s)) / d
            }
        }
    }

    /// The uniform correlation, if the structure is not split.
    pub fn uniform(&self) -> Option<&SampleCorrelation> {
        match self {
            CorrelationStructure::Uniform(r) => Some(r),
            CorrelationStructure::Subspace { .. } => None,
        }
    }
}

/// The `k x k` correlation matrix with 1 on the diagonal and `c` elsewhere.
pub fn equicorrelated_matrix(k: usize, c: f64) -> Result<SampleCorrelation> {
    check_equicorrelation(k, c)?;
    let m = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { c });
    SampleCorrelation::new(m)
}

pub(crate) fn kind_correlation(kind: &CouplingKind, k: usize) -> Result<SampleCorrelation> {
    match kind {
        CouplingKind::Identical => SampleCorrelation::new(DMatrix::from_element(k, k, 1.0)),
        CouplingKind::Independent => Ok(SampleCorrelation::identity(k)),
        CouplingKind::Antithetic => equicorrelated_matrix(2, -1.0),
        CouplingKind::Repulsive => equicorrelated_matrix(k, min_equicorrelation(k)),
        CouplingKind::Equicorrelated { c } => equicorrelated_matrix(k, *c),
        CouplingKind::Matrix(a) => a.correlation(),
        CouplingKind::Subspace(_) => Err(CouplingError::invalid("subspace kinds cannot be nested")),
    }
}

/// The sample correlation implied by `spec`.
pub fn correlation_of(spec: &CouplingSpec) -> Result<CorrelationStructure> {
    match spec.kind() {
        CouplingKind::Subspace(s) => Ok(CorrelationStructure::Subspace {
            on_subspace: kind_correlation(&s.inner, spec.k())?,
            on_complement: kind_correlation(&s.outer, spec.k())?,
            subspace_dim: s.dim(),
            ambient_dim: s.ambient_dim(),
        }),
        kind => Ok(CorrelationStructure::Uniform(kind_correlation(
            kind,
            spec.k(),
        )?)),
    }
}

/// Numerical rank of a correlation matrix at [`RANK_TOL`].
pub fn numerical_rank(r: &SampleCorrelation) -> usize {
    r.eigenvalues().iter().filter(|&&l| l > RANK_TOL).count()
}

/// Factors `R = A Aᵀ` with `A` of shape `k x r` and unit rows.
///
/// Uses the symmetric eigendecomposition, so singular correlations (such as the
/// repulsive one) factor without trouble. Columns follow descending eigenvalue
/// order, each column's first nonzero entry is positive, and columns beyond the
/// numerical rank are zero.
pub fn factor_correlation(r: &SampleCorrelation, width: usize) -> Result<CouplingMatrix> {
    let k = r.k();
    let (values, vectors) = sorted_eigen(r.entries());
    let min_eigenvalue = values.last().copied().unwrap_or(0.0);
    if min_eigenvalue < PSD_TOL {
        return Err(CouplingError::NotPsd { min_eigenvalue });
    }
    let rank = values.iter().filter(|&&l| l > RANK_TOL).count();
    if rank > width {
        return Err(CouplingError::Rank { rank, r: width });
    }
    let mut a = DMatrix::zeros(k, width);
    for (col, &lambda) in values.iter().take(rank).enumerate() {
        let scale = lambda.max(0.0).sqrt();
        let v = vectors.column(col);
        let sign = v
            .iter()
            .find(|x| x.abs() > 1e-12)
            .map(|x| x.signum())
            .unwrap_or(1.0);
        for i in 0..k {
            a[(i, col)] = sign * scale * v[i];
        }
    }
    // Dropping eigenvalues below RANK_TOL shifts row norms by at most ~1e-8.
    normalize_rows(&mut a)?;
    CouplingMatrix::new(a)
}
