//! Dense linear-algebra helpers shared by the analysis, LMI and synthesis
//! modules. Public data lives in `nalgebra` matrices; the heavier
//! factorizations run through `faer`.

use faer::{Mat, Side};
use nalgebra::{Complex, DMatrix};
use thiserror::Error;

pub type C64 = Complex<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("eigenvalue iteration did not converge")]
    EigenFailure,
    #[error("singular value iteration did not converge")]
    SvdFailure,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

pub fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<C64>, LinalgError> {
    assert!(m.is_square());
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    to_faer(m).eigenvalues().map_err(|_| LinalgError::EigenFailure)
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(eigenvalues(m)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Eigenvalues of a symmetric matrix in nondecreasing order. Only the lower
/// triangle is read.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>, LinalgError> {
    assert!(m.is_square());
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    to_faer(m)
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| LinalgError::EigenFailure)
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(sym_eigenvalues(&symmetrize(m))?.last().copied().unwrap_or(f64::NEG_INFINITY))
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(sym_eigenvalues(&symmetrize(m))?.first().copied().unwrap_or(f64::INFINITY))
}

/// Singular values in nonincreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>, LinalgError> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    to_faer(m).singular_values().map_err(|_| LinalgError::SvdFailure)
}

/// Singular values of a complex matrix in nonincreasing order.
pub fn singular_values_complex(m: &DMatrix<C64>) -> Result<Vec<f64>, LinalgError> {
    if m.is_empty() {
        return Ok(Vec::new());
    }
    Mat::<C64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
        .singular_values()
        .map_err(|_| LinalgError::SvdFailure)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Dense block matrix from a grid of optional blocks; `None` is a zero block.
/// Row heights and column widths must be inferable from at least one block
/// per row and per column.
pub fn block(grid: &[Vec<Option<&DMatrix<f64>>>]) -> DMatrix<f64> {
    let nr = grid.len();
    let nc = grid.first().map_or(0, |r| r.len());
    let mut heights = vec![None; nr];
    let mut widths = vec![None; nc];
    for (i, row) in grid.iter().enumerate() {
        assert_eq!(row.len(), nc, "ragged block grid");
        for (j, b) in row.iter().enumerate() {
            if let Some(b) = b {
                assert!(heights[i].is_none_or(|h| h == b.nrows()), "block row {i} height mismatch");
                assert!(widths[j].is_none_or(|w| w == b.ncols()), "block column {j} width mismatch");
                heights[i] = Some(b.nrows());
                widths[j] = Some(b.ncols());
            }
        }
    }
    let heights: Vec<usize> = heights.into_iter().map(|h| h.expect("undetermined block row")).collect();
    let widths: Vec<usize> = widths.into_iter().map(|w| w.expect("undetermined block column")).collect();
    let mut out = DMatrix::zeros(heights.iter().sum(), widths.iter().sum());
    let mut r0 = 0;
    for (i, row) in grid.iter().enumerate() {
        let mut c0 = 0;
        for (j, b) in row.iter().enumerate() {
            if let Some(b) = b {
                out.view_mut((r0, c0), (heights[i], widths[j])).copy_from(*b);
            }
            c0 += widths[j];
        }
        r0 += heights[i];
    }
    out
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Cholesky-based test for `M ≻ 0`.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}
