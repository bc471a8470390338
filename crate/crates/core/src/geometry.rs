//! Matrix-valued domain types and closed-form orthogonal Procrustes.
//!
//! Clouds are stored as `n × d` matrices, one embedding per row. A map `Q`
//! acts on the right, so a source row `x` is sent to `x Q`.

use nalgebra::{DMatrix, RowDVector, SVD};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Largest admissible `‖QᵀQ − I‖_F` for an [`OrthogonalMap`].
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

const SVD_MAX_ITER: usize = 100_000;

/// `n` embeddings of dimension `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    data: DMatrix<f64>,
}

impl PointCloud {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "point cloud must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (col, row) = (pos / data.nrows(), pos % data.nrows());
            return Err(Error::InvalidInput(format!(
                "non-finite value at row {row}, column {col}"
            )));
        }
        Ok(Self { data })
    }

    /// Builds a cloud from explicit rows, which must all share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::InvalidInput(format!(
                "row {bad} has length {}, expected {d}",
                rows[bad].len()
            )));
        }
        Self::new(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> Result<RowDVector<f64>> {
        if i >= self.nrows() {
            return Err(Error::InvalidInput(format!(
                "row {i} out of bounds for cloud with {} rows",
                self.nrows()
            )));
        }
        Ok(self.data.row(i).into_owned())
    }

    /// New cloud made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty row selection".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.nrows()) {
            return Err(Error::InvalidInput(format!(
                "row {bad} out of bounds for cloud with {} rows",
                self.nrows()
            )));
        }
        Ok(Self {
            data: self.data.select_rows(indices),
        })
    }

    /// First `k` rows (or all of them when `k` exceeds the row count).
    pub fn head(&self, k: usize) -> Self {
        let k = k.clamp(1, self.nrows());
        Self {
            data: self.data.rows(0, k).into_owned(),
        }
    }

    /// `X Q`.
    pub fn transform(&self, map: &OrthogonalMap) -> Result<Self> {
        if map.dim() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "map of dimension {} applied to cloud of dimension {}",
                map.dim(),
                self.dim()
            )));
        }
        Ok(Self {
            data: &self.data * map.matrix(),
        })
    }
}

/// Diagonal Gaussian embeddings: one mean row and one variance row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    means: PointCloud,
    variances: DMatrix<f64>,
}

impl GaussianCloud {
    pub fn new(means: PointCloud, variances: DMatrix<f64>) -> Result<Self> {
        if variances.shape() != means.as_matrix().shape() {
            return Err(Error::InvalidInput(format!(
                "variance shape {:?} does not match mean shape {:?}",
                variances.shape(),
                means.as_matrix().shape()
            )));
        }
        if let Some(pos) = variances.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            let n = variances.nrows();
            return Err(Error::Validation(format!(
                "variance at row {}, column {} is {} (must be finite and > 0)",
                pos % n,
                pos / n,
                variances[pos]
            )));
        }
        Ok(Self { means, variances })
    }

    pub fn nrows(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.dim()
    }

    pub fn means(&self) -> &PointCloud {
        &self.means
    }

    pub fn variances(&self) -> &DMatrix<f64> {
        &self.variances
    }

    pub fn into_parts(self) -> (PointCloud, DMatrix<f64>) {
        (self.means, self.variances)
    }
}

/// A `d × d` matrix `Q` with `QᵀQ = I` up to [`ORTHOGONALITY_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMap {
    matrix: DMatrix<f64>,
}

impl OrthogonalMap {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        check_square_finite(&matrix)?;
        let defect = orthogonality_defect(&matrix);
        if defect > ORTHOGONALITY_TOL {
            return Err(Error::InvalidInput(format!(
                "matrix is not orthogonal: ||QᵀQ - I||_F = {defect:e}"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn transpose(&self) -> Self {
        Self {
            matrix: self.matrix.transpose(),
        }
    }

    /// `self · other`.
    pub fn compose(&self, other: &OrthogonalMap) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::InvalidInput("map dimensions differ".into()));
        }
        project_orthogonal(&(&self.matrix * &other.matrix))
    }

    pub fn orthogonality_defect(&self) -> f64 {
        orthogonality_defect(&self.matrix)
    }
}

/// `‖MᵀM − I‖_F`.
pub fn orthogonality_defect(m: &DMatrix<f64>) -> f64 {
    let mut gram = m.tr_mul(m);
    for i in 0..gram.nrows() {
        gram[(i, i)] -= 1.0;
    }
    gram.norm()
}

fn check_square_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidInput(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Nearest orthogonal matrix to `m`: `UVᵀ` for the SVD `m = U D Vᵀ`.
///
/// This is also the maximiser of `Tr(QᵀM)` over orthogonal `Q`.
pub fn project_orthogonal(m: &DMatrix<f64>) -> Result<OrthogonalMap> {
    check_square_finite(m)?;
    let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, SVD_MAX_ITER).ok_or_else(|| {
        Error::Numerical(format!(
            "SVD of {}x{} matrix did not converge within {SVD_MAX_ITER} iterations \
             (Frobenius norm {:e})",
            m.nrows(),
            m.ncols(),
            m.norm()
        ))
    })?;
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numerical("SVD did not produce singular vectors".into())),
    };
    let matrix = u * v_t;
    let defect = orthogonality_defect(&matrix);
    if !(defect <= ORTHOGONALITY_TOL) {
        return Err(Error::Numerical(format!(
            "projection lost orthogonality: ||QᵀQ - I||_F = {defect:e}"
        )));
    }
    Ok(OrthogonalMap { matrix })
}

/// `argmin_Q ‖XQ − Y‖²_F` over orthogonal `Q` for row-matched clouds.
pub fn solve_procrustes(x: &PointCloud, y: &PointCloud) -> Result<OrthogonalMap> {
    if x.as_matrix().shape() != y.as_matrix().shape() {
        return Err(Error::InvalidInput(format!(
            "procrustes needs equal shapes, got {:?} and {:?}",
            x.as_matrix().shape(),
            y.as_matrix().shape()
        )));
    }
    project_orthogonal(&x.as_matrix().tr_mul(y.as_matrix()))
}

/// `‖XQ − Y‖²_F`.
pub fn procrustes_residual(x: &PointCloud, q: &OrthogonalMap, y: &PointCloud) -> Result<f64> {
    if x.as_matrix().shape() != y.as_matrix().shape() || q.dim() != x.dim() {
        return Err(Error::InvalidInput(format!(
            "inconsistent shapes: X {:?}, Q {}x{}, Y {:?}",
            x.as_matrix().shape(),
            q.dim(),
            q.dim(),
            y.as_matrix().shape()
        )));
    }
    Ok((x.as_matrix() * q.matrix() - y.as_matrix()).norm_squared())
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> OrthogonalMap {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    OrthogonalMap { matrix: q }
}
