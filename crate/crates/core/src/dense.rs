//! Blocked dense kernels (faer) behind nalgebra types.

use faer::linalg::triangular_inverse::invert_lower_triangular;
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::{get_global_parallelism, Accum, Mat, MatMut, MatRef, Side};
use nalgebra::{DMatrix, DVector};

pub(crate) fn view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

pub(crate) fn view_mut(m: &mut DMatrix<f64>) -> MatMut<'_, f64> {
    let (r, c) = m.shape();
    MatMut::from_column_major_slice_mut(m.as_mut_slice(), r, c)
}

pub(crate) fn to_nalgebra(m: MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Lower Cholesky factor, or None if the matrix is not numerically SPD.
pub(crate) fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let llt = view(m).llt(Side::Lower).ok()?;
    let l = to_nalgebra(llt.L());
    if l.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(l)
    } else {
        None
    }
}

/// L⁻¹B in place.
pub(crate) fn lower_solve_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    solve_lower_triangular_in_place(view(l), view_mut(b), get_global_parallelism());
}

/// L⁻ᵀB in place.
pub(crate) fn lower_transpose_solve_in_place(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    solve_upper_triangular_in_place(view(l).transpose(), view_mut(b), get_global_parallelism());
}

pub(crate) fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut out = DMatrix::zeros(n, n);
    invert_lower_triangular(view_mut(&mut out), view(l), get_global_parallelism());
    out
}

/// A·Bᵀ through the blocked kernel.
pub(crate) fn mul_transpose(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let out: Mat<f64> = view(a) * view(b).transpose();
    to_nalgebra(out.as_ref())
}

/// A·B through the blocked kernel.
pub(crate) fn mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let out: Mat<f64> = view(a) * view(b);
    to_nalgebra(out.as_ref())
}

/// Eigen-decomposition of a symmetric matrix (lower triangle read), eigenvalues ascending.
pub(crate) fn symmetric_eigen(m: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let evd = view(m).self_adjoint_eigen(Side::Lower).ok()?;
    let s = evd.S().column_vector();
    let vals = DVector::from_fn(m.nrows(), |i, _| s[i]);
    Some((vals, to_nalgebra(evd.U())))
}

/// L·B with L lower triangular.
pub(crate) fn mul_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(l.nrows(), b.ncols());
    triangular::matmul(
        view_mut(&mut out),
        BlockStructure::Rectangular,
        Accum::Replace,
        view(l),
        BlockStructure::TriangularLower,
        view(b),
        BlockStructure::Rectangular,
        1.0,
        get_global_parallelism(),
    );
    out
}

/// A·Bᵀ for a product known to be symmetric: the lower triangle is computed and mirrored.
pub(crate) fn mul_transpose_symmetric(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    symmetric_product(view(a), view(b).transpose())
}

/// A·B for a product known to be symmetric.
pub(crate) fn mul_symmetric(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    symmetric_product(view(a), view(b))
}

fn symmetric_product(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    triangular::matmul(
        view_mut(&mut out),
        BlockStructure::TriangularLower,
        Accum::Replace,
        a,
        BlockStructure::Rectangular,
        b,
        BlockStructure::Rectangular,
        1.0,
        get_global_parallelism(),
    );
    for j in 0..n {
        for i in j + 1..n {
            out[(j, i)] = out[(i, j)];
        }
    }
    out
}
