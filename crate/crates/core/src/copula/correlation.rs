use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::coarse::CoarseTable;
use crate::error::{Error, Result};
use crate::schema::Coordinate;
use crate::stats;

/// Eigenvalue floor applied during positive-definite repair.
pub const EIGEN_FLOOR: f64 = 1e-8;
pub const MAX_REPAIR_ITERATIONS: usize = 100;
/// Off-diagonal magnitude cap applied to raw sample correlations.
pub const COLLINEAR_CLIP: f64 = 1.0 - 1e-6;

/// A positive-definite correlation matrix with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    entries: DMatrix<f64>,
    cholesky: DMatrix<f64>,
    repair_iterations: usize,
}

impl CorrelationMatrix {
    pub fn identity(dim: usize) -> Self {
        CorrelationMatrix {
            entries: DMatrix::identity(dim, dim),
            cholesky: DMatrix::identity(dim, dim),
            repair_iterations: 0,
        }
    }

    /// Wraps a matrix that must already be a valid correlation matrix.
    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self> {
        check_shape(&entries)?;
        let cholesky = entries.clone().cholesky().ok_or(Error::NotPositiveDefinite(0))?.l();
        Ok(CorrelationMatrix { entries, cholesky, repair_iterations: 0 })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_matrix(matrix_from_rows(rows)?)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Lower-triangular `L` with `L Lᵀ` equal to the entries.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.cholesky
    }

    pub fn repair_iterations(&self) -> usize {
        self.repair_iterations
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.entries.row(i).iter().copied().collect()).collect()
    }

    /// `z = L ε`.
    pub fn correlate(&self, eps: &[f64], z: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.cholesky[(i, j)] * eps[j];
            }
            z[i] = acc;
        }
    }
}

impl Serialize for CorrelationMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CorrelationMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        CorrelationMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("correlation matrix must be square".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn check_shape(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidArgument("matrix must be square".into()));
    }
    let n = m.nrows();
    for i in 0..n {
        if (m[(i, i)] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("diagonal entry {i} is {}, expected 1", m[(i, i)])));
        }
        for j in 0..n {
            if !m[(i, j)].is_finite() {
                return Err(Error::Numerical("non-finite matrix entry".into()));
            }
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 {
                return Err(Error::InvalidArgument("matrix is not symmetric".into()));
            }
        }
    }
    Ok(())
}

/// Repairs a symmetric unit-diagonal matrix to the nearest positive-definite
/// correlation matrix by alternating eigenvalue clipping (floor
/// [`EIGEN_FLOOR`]) and rescaling to a unit diagonal, until the Cholesky
/// factorization succeeds.
pub fn nearest_pd_repair(matrix: &DMatrix<f64>) -> Result<CorrelationMatrix> {
    check_shape(matrix)?;
    let n = matrix.nrows();
    let mut current = symmetrized(matrix);
    if let Some(chol) = current.clone().cholesky() {
        return Ok(CorrelationMatrix { cholesky: chol.l(), entries: current, repair_iterations: 0 });
    }
    for iteration in 1..=MAX_REPAIR_ITERATIONS {
        let eig = SymmetricEigen::new(current.clone());
        let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
        let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let scale: Vec<f64> = (0..n).map(|i| rebuilt[(i, i)].sqrt()).collect();
        current = DMatrix::from_fn(n, n, |i, j| rebuilt[(i, j)] / (scale[i] * scale[j]));
        current = symmetrized(&current);
        if let Some(chol) = current.clone().cholesky() {
            return Ok(CorrelationMatrix { cholesky: chol.l(), entries: current, repair_iterations: iteration });
        }
    }
    Err(Error::NotPositiveDefinite(MAX_REPAIR_ITERATIONS))
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.5 * (m[(i, j)] + m[(j, i)]) })
}

/// Coordinate values across the units not in `exclude`, one column per
/// coordinate.
pub(crate) fn coordinate_columns(
    coarse: &CoarseTable,
    coordinates: &[Coordinate],
    exclude: &BTreeSet<String>,
) -> Vec<Vec<f64>> {
    let units: Vec<_> = coarse.units.iter().filter(|u| !exclude.contains(&u.unit_id)).collect();
    coordinates.iter().map(|&c| units.iter().map(|u| u.coordinate(c)).collect()).collect()
}

/// Pearson correlation of the coordinates across unflagged units, clipped
/// to ±[`COLLINEAR_CLIP`] and repaired to positive definite. Constant
/// coordinates are uncorrelated with everything.
pub fn estimate_correlation(
    coarse: &CoarseTable,
    coordinates: &[Coordinate],
    exclude: &BTreeSet<String>,
) -> Result<CorrelationMatrix> {
    let columns = coordinate_columns(coarse, coordinates, exclude);
    let dim = coordinates.len();
    let available = columns
        .first()
        .map(Vec::len)
        .unwrap_or_else(|| coarse.units.iter().filter(|u| !exclude.contains(&u.unit_id)).count());
    if available < dim + 2 {
        return Err(Error::TooFewUnits { needed: dim + 2, got: available });
    }
    if columns.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite coordinate value".into()));
    }
    let mut raw = DMatrix::identity(dim, dim);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let r = stats::pearson(&columns[i], &columns[j]).unwrap_or(0.0).clamp(-COLLINEAR_CLIP, COLLINEAR_CLIP);
            raw[(i, j)] = r;
            raw[(j, i)] = r;
        }
    }
    nearest_pd_repair(&raw)
}

/// Unbiased sample standard deviation of each coordinate across unflagged
/// units.
pub fn pooled_sd(coarse: &CoarseTable, coordinates: &[Coordinate], exclude: &BTreeSet<String>) -> Vec<f64> {
    coordinate_columns(coarse, coordinates, exclude).iter().map(|col| stats::sample_sd(col)).collect()
}
