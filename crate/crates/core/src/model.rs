//! Posterior solves under a diagonal Gaussian prior N(0, D(θ)), the workhorse of
//! every EM and VBEM step.
//!
//! A [`LinearModel`] knows how to produce the posterior for a given vector of
//! mixing precisions 1/θ. Dense blocks and sufficient statistics use the p×p
//! system when it is the smaller one; anything exposing its rows through
//! [`RowStore`] uses the n×n system with matrix-free access to the rows.

use nalgebra::{DMatrix, DVector};

use crate::gaussian::{factor_spd, symmetrize, DesignBlock, Form, SufficientStats};
use crate::{dense, Error, Result};

/// How much of the posterior covariance the caller needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CovNeed {
    MeanOnly,
    Diagonal,
    Full,
}

#[derive(Debug, Clone)]
pub enum CovRepr {
    Unavailable,
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl CovRepr {
    pub fn diagonal(&self) -> Option<DVector<f64>> {
        match self {
            CovRepr::Unavailable => None,
            CovRepr::Diagonal(d) => Some(d.clone()),
            CovRepr::Full(c) => Some(c.diagonal()),
        }
    }

    pub fn full(&self) -> Option<&DMatrix<f64>> {
        match self {
            CovRepr::Full(c) => Some(c),
            _ => None,
        }
    }
}

/// Posterior N(mean, C) for prior N(0, D(θ)), with the scalars the ELBO and the
/// γ² update need.
#[derive(Debug, Clone)]
pub struct DiagPriorPosterior {
    pub mean: DVector<f64>,
    pub cov: CovRepr,
    /// ln det C (None when only the mean was requested).
    pub ln_det_cov: Option<f64>,
    /// tr(XCXᵀ) (None when only the mean was requested).
    pub trace_xcx: Option<f64>,
    pub jitter: f64,
}

pub trait LinearModel {
    fn n_obs(&self) -> usize;
    fn dim(&self) -> usize;
    /// Posterior under the prior N(0, D(1/inv_theta)) and noise variance γ².
    fn solve(&self, inv_theta: &DVector<f64>, gamma_sq: f64, need: CovNeed) -> Result<DiagPriorPosterior>;
    /// |Y − Xβ|².
    fn misfit_sq(&self, beta: &DVector<f64>) -> f64;
}

/// Matrix-free access to the rows of a design.
pub trait RowStore: Clone + Send + Sync {
    fn n_rows(&self) -> usize;
    fn dim(&self) -> usize;
    /// 𝖷β.
    fn mul_vec(&self, beta: &DVector<f64>) -> DVector<f64>;
    /// 𝖷ᵀα.
    fn tr_mul_vec(&self, alpha: &DVector<f64>) -> DVector<f64>;
    /// 𝖷 D(w) 𝖷ᵀ.
    fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64>;
    /// 𝖷𝖷ᵀ.
    fn gram(&self) -> DMatrix<f64>;
    /// The rows of `coeffs · 𝖷`.
    fn combine(&self, coeffs: &DMatrix<f64>) -> Self;
    /// `combine` for a lower-triangular `coeffs`.
    fn combine_lower(&self, coeffs: &DMatrix<f64>) -> Self {
        self.combine(coeffs)
    }
    /// diag(𝖷ᵀ𝖷).
    fn sq_col_norms(&self) -> DVector<f64>;
    /// Rows of `self` followed by rows of `below`.
    fn stack(&self, below: &Self) -> Result<Self>;
    /// A store of `k` zero rows compatible with `self`.
    fn zero_rows(&self, k: usize) -> Self;
    /// Dense view, when the rows are held densely.
    fn dense(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

/// Rows held as a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRows(pub DMatrix<f64>);

impl RowStore for DenseRows {
    fn n_rows(&self) -> usize {
        self.0.nrows()
    }

    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn mul_vec(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.0 * beta
    }

    fn tr_mul_vec(&self, alpha: &DVector<f64>) -> DVector<f64> {
        self.0.tr_mul(alpha)
    }

    fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.0.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= w[j];
        }
        let mut g = scaled * self.0.transpose();
        symmetrize(&mut g);
        g
    }

    fn gram(&self) -> DMatrix<f64> {
        &self.0 * self.0.transpose()
    }

    fn combine(&self, coeffs: &DMatrix<f64>) -> Self {
        DenseRows(coeffs * &self.0)
    }

    fn sq_col_norms(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.ncols(), self.0.column_iter().map(|c| c.norm_squared()))
    }

    fn stack(&self, below: &Self) -> Result<Self> {
        if below.0.ncols() != self.0.ncols() {
            return Err(Error::Dimension("stacking rows of different widths".into()));
        }
        let (a, b) = (self.0.nrows(), below.0.nrows());
        let mut out = DMatrix::zeros(a + b, self.0.ncols());
        out.rows_mut(0, a).copy_from(&self.0);
        out.rows_mut(a, b).copy_from(&below.0);
        Ok(DenseRows(out))
    }

    fn zero_rows(&self, k: usize) -> Self {
        DenseRows(DMatrix::zeros(k, self.0.ncols()))
    }

    fn dense(&self) -> Option<&DMatrix<f64>> {
        Some(&self.0)
    }
}

/// Rows plus labels, solved in the n×n form.
#[derive(Debug, Clone)]
pub struct RowData<R: RowStore> {
    pub rows: R,
    pub y: DVector<f64>,
}

impl<R: RowStore> RowData<R> {
    pub fn new(rows: R, y: DVector<f64>) -> Result<Self> {
        if rows.n_rows() != y.len() {
            return Err(Error::Dimension(format!("{} rows but {} labels", rows.n_rows(), y.len())));
        }
        Ok(RowData { rows, y })
    }
}

impl<R: RowStore> LinearModel for RowData<R> {
    fn n_obs(&self) -> usize {
        self.rows.n_rows()
    }

    fn dim(&self) -> usize {
        self.rows.dim()
    }

    fn solve(&self, inv_theta: &DVector<f64>, gamma_sq: f64, need: CovNeed) -> Result<DiagPriorPosterior> {
        dual_solve(&self.rows, &self.y, inv_theta, gamma_sq, need)
    }

    fn misfit_sq(&self, beta: &DVector<f64>) -> f64 {
        (&self.y - self.rows.mul_vec(beta)).norm_squared()
    }
}

/// Borrowed rows plus labels.
#[derive(Debug, Clone, Copy)]
pub struct RowRef<'a, R: RowStore> {
    pub rows: &'a R,
    pub y: &'a DVector<f64>,
}

impl<R: RowStore> LinearModel for RowRef<'_, R> {
    fn n_obs(&self) -> usize {
        self.rows.n_rows()
    }

    fn dim(&self) -> usize {
        self.rows.dim()
    }

    fn solve(&self, inv_theta: &DVector<f64>, gamma_sq: f64, need: CovNeed) -> Result<DiagPriorPosterior> {
        dual_solve(self.rows, self.y, inv_theta, gamma_sq, need)
    }

    fn misfit_sq(&self, beta: &DVector<f64>) -> f64 {
        (self.y - self.rows.mul_vec(beta)).norm_squared()
    }
}

/// Prior N(center, D(θ)) instead of N(0, D(θ)). The inner model must carry the
/// shifted labels Y − X·center.
#[derive(Debug, Clone)]
pub struct Centered<M> {
    pub inner: M,
    pub center: DVector<f64>,
}

impl<M: LinearModel> LinearModel for Centered<M> {
    fn n_obs(&self) -> usize {
        self.inner.n_obs()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn solve(&self, inv_theta: &DVector<f64>, gamma_sq: f64, need: CovNeed) -> Result<DiagPriorPosterior> {
        let mut post = self.inner.solve(inv_theta, gamma_sq, need)?;
        post.mean += &self.center;
        Ok(post)
    }

    fn misfit_sq(&self, beta: &DVector<f64>) -> f64 {
        self.inner.misfit_sq(&(beta - &self.center))
    }
}

fn check_inputs(inv_theta: &DVector<f64>, p: usize, gamma_sq: f64) -> Result<()> {
    if inv_theta.len() != p {
        return Err(Error::Dimension(format!("{} precisions for {} coefficients", inv_theta.len(), p)));
    }
    if !(gamma_sq > 0.0 && gamma_sq.is_finite()) {
        return Err(Error::Domain(format!("noise variance must be positive and finite, got {gamma_sq}")));
    }
    if inv_theta.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Domain("mixing precisions must be positive and finite".into()));
    }
    Ok(())
}

/// n×n solve: S = 𝖷D(θ)𝖷ᵀ + γ²I, m = D(θ)𝖷ᵀS⁻¹y,
/// C = D(θ) − D(θ)𝖷ᵀS⁻¹𝖷D(θ).
pub fn dual_solve<R: RowStore>(
    rows: &R,
    y: &DVector<f64>,
    inv_theta: &DVector<f64>,
    gamma_sq: f64,
    need: CovNeed,
) -> Result<DiagPriorPosterior> {
    check_inputs(inv_theta, rows.dim(), gamma_sq)?;
    let n = rows.n_rows();
    let theta = inv_theta.map(|v| 1.0 / v);
    let g = rows.weighted_gram(&theta);
    let mut s = g.clone();
    for i in 0..n {
        s[(i, i)] += gamma_sq;
    }
    let factor = factor_spd(s)?;
    let alpha = factor.solve(y);
    let mean = rows.tr_mul_vec(&alpha).component_mul(&theta);
    if need == CovNeed::MeanOnly {
        return Ok(DiagPriorPosterior { mean, cov: CovRepr::Unavailable, ln_det_cov: None, trace_xcx: None, jitter: factor.jitter });
    }
    let ln_det_cov = theta.iter().map(|t| t.ln()).sum::<f64>() + n as f64 * gamma_sq.ln() - factor.ln_det();
    let linv = factor.lower_inverse();
    let lg = dense::mul(&linv, &g);
    let trace_xcx = g.trace() - lg.norm_squared();
    let cov = match (need, rows.dense()) {
        (CovNeed::Full, Some(x)) => {
            let mut w = factor.solve_lower_mat(x);
            for (j, mut col) in w.column_iter_mut().enumerate() {
                col *= theta[j];
            }
            let mut c = -w.tr_mul(&w);
            for j in 0..theta.len() {
                c[(j, j)] += theta[j];
            }
            symmetrize(&mut c);
            CovRepr::Full(c)
        }
        (CovNeed::Full, None) => {
            return Err(Error::Capacity("full covariance is unavailable for matrix-free rows".into()));
        }
        _ => {
            let w = rows.combine_lower(&linv);
            let sq = w.sq_col_norms();
            CovRepr::Diagonal(DVector::from_fn(theta.len(), |j, _| {
                (theta[j] - theta[j] * theta[j] * sq[j]).max(0.0)
            }))
        }
    };
    Ok(DiagPriorPosterior { mean, cov, ln_det_cov: Some(ln_det_cov), trace_xcx: Some(trace_xcx), jitter: factor.jitter })
}

/// p×p solve: P = A/γ² + D(1/θ), m = P⁻¹v/γ², C = P⁻¹.
pub fn primal_solve(
    a: &DMatrix<f64>,
    v: &DVector<f64>,
    inv_theta: &DVector<f64>,
    gamma_sq: f64,
    need: CovNeed,
) -> Result<DiagPriorPosterior> {
    check_inputs(inv_theta, v.len(), gamma_sq)?;
    let p = v.len();
    let mut prec = a / gamma_sq;
    for j in 0..p {
        prec[(j, j)] += inv_theta[j];
    }
    let factor = factor_spd(prec)?;
    let mean = factor.solve(&(v / gamma_sq));
    if need == CovNeed::MeanOnly {
        return Ok(DiagPriorPosterior { mean, cov: CovRepr::Unavailable, ln_det_cov: None, trace_xcx: None, jitter: factor.jitter });
    }
    let c = factor.inverse();
    let trace_xcx = a.component_mul(&c).sum();
    let cov = if need == CovNeed::Full { CovRepr::Full(c) } else { CovRepr::Diagonal(c.diagonal()) };
    Ok(DiagPriorPosterior { mean, cov, ln_det_cov: Some(-factor.ln_det()), trace_xcx: Some(trace_xcx), jitter: factor.jitter })
}

/// A dense block with an explicit choice of form.
#[derive(Debug, Clone, Copy)]
pub struct WithForm<'a> {
    pub block: &'a DesignBlock,
    pub form: Form,
}

impl LinearModel for WithForm<'_> {
    fn n_obs(&self) -> usize {
        self.block.n()
    }

    fn dim(&self) -> usize {
        self.block.p()
    }

    fn solve(&self, inv_theta: &DVector<f64>, gamma_sq: f64, need: CovNeed) -> Result<DiagPriorPosterior> {
        let b = self.block;
        if self.form.use_primal(b.p(), b.n()) {
            primal_solve(b.gram(), &b.x().tr_mul(b.y()), inv_theta, gamma_sq, need)
        } else {
            dual_solve(&DenseRows(b.x().clone()), b.y(), inv_theta, gamma_sq, need)
        }
    }

    fn misfit_sq(&self, beta: &DVector<f64>) -> f64 {
        (self.block.y() - self.block.x() * beta).norm_squared()
    }
}

impl LinearModel for DesignBlock {
    fn n_obs(&self) -> usize {
        self.n()
    }

    fn dim(&self) -> usize {
        self.p()
    }

    fn solve(&self, inv_theta: &DVector<f64>, gamma_sq: f64, need: CovNeed) -> Result<DiagPriorPosterior> {
        WithForm { block: self, form: Form::Auto }.solve(inv_theta, gamma_sq, need)
    }

    fn misfit_sq(&self, beta: &DVector<f64>) -> f64 {
        (self.y() - self.x() * beta).norm_squared()
    }
}

impl LinearModel for SufficientStats {
    fn n_obs(&self) -> usize {
        self.count
    }

    fn dim(&self) -> usize {
        self.p()
    }

    fn solve(&self, inv_theta: &DVector<f64>, gamma_sq: f64, need: CovNeed) -> Result<DiagPriorPosterior> {
        primal_solve(&self.a, &self.v, inv_theta, gamma_sq, need)
    }

    fn misfit_sq(&self, beta: &DVector<f64>) -> f64 {
        SufficientStats::misfit_sq(self, beta)
    }
}
