//! Conditionally Gaussian linear-model algebra: batch posteriors in primal and
//! dual (Woodbury) form, the Kalman recursion, reduced-rank compression and a
//! conjugate-gradient solver.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::{dense, Error, Result};

/// A block of observations: rows of `x` are inputs, `y` the labels.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    x: DMatrix<f64>,
    y: DVector<f64>,
    gram: OnceLock<DMatrix<f64>>,
}

impl DesignBlock {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!("X has {} rows but Y has {} entries", x.nrows(), y.len())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("design block contains non-finite entries".into()));
        }
        Ok(DesignBlock { x, y, gram: OnceLock::new() })
    }

    pub fn empty(p: usize) -> Self {
        DesignBlock { x: DMatrix::zeros(0, p), y: DVector::zeros(0), gram: OnceLock::new() }
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// XᵀX, computed once.
    pub fn gram(&self) -> &DMatrix<f64> {
        self.gram.get_or_init(|| self.x.tr_mul(&self.x))
    }

    /// Sub-block with the given row indices, in order.
    pub fn select_rows(&self, rows: &[usize]) -> DesignBlock {
        let x = self.x.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        DesignBlock { x, y, gram: OnceLock::new() }
    }

    /// The block with `extra` zero rows (and zero labels) appended.
    pub fn zero_padded(&self, extra: usize) -> DesignBlock {
        let n = self.n();
        let x = self.x.clone().resize_vertically(n + extra, 0.0);
        let y = self.y.clone().resize_vertically(n + extra, 0.0);
        DesignBlock { x, y, gram: OnceLock::new() }
    }
}

/// Gaussian N(mean, cov).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// (XᵀX, XᵀY, YᵀY, n) accumulated over all data seen.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub a: DMatrix<f64>,
    pub v: DVector<f64>,
    pub s: f64,
    pub count: usize,
}

impl SufficientStats {
    pub fn zeros(p: usize) -> Self {
        SufficientStats { a: DMatrix::zeros(p, p), v: DVector::zeros(p), s: 0.0, count: 0 }
    }

    pub fn from_block(block: &DesignBlock) -> Self {
        SufficientStats {
            a: block.gram().clone(),
            v: block.x.tr_mul(&block.y),
            s: block.y.norm_squared(),
            count: block.n(),
        }
    }

    pub fn p(&self) -> usize {
        self.v.len()
    }

    /// Adds a batch in place.
    pub fn push(&mut self, block: &DesignBlock) -> Result<()> {
        if block.p() != self.p() {
            return Err(Error::Dimension(format!("batch has {} columns, stats expect {}", block.p(), self.p())));
        }
        self.a.gemm_tr(1.0, &block.x, &block.x, 1.0);
        self.v.gemv_tr(1.0, &block.x, &block.y, 1.0);
        self.s += block.y.norm_squared();
        self.count += block.n();
        Ok(())
    }

    /// Sum of two partial accumulations.
    pub fn merge(&self, other: &SufficientStats) -> Result<SufficientStats> {
        if other.p() != self.p() {
            return Err(Error::Dimension("merging stats of different widths".into()));
        }
        Ok(SufficientStats {
            a: &self.a + &other.a,
            v: &self.v + &other.v,
            s: self.s + other.s,
            count: self.count + other.count,
        })
    }

    /// |Y − Xβ|² = s − 2vᵀβ + βᵀAβ.
    pub fn misfit_sq(&self, beta: &DVector<f64>) -> f64 {
        (self.s - 2.0 * self.v.dot(beta) + beta.dot(&(&self.a * beta))).max(0.0)
    }
}

/// Prior precision C₀⁻¹ for the primal form.
#[derive(Debug, Clone)]
pub enum PriorPrecision {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

/// Which side of the Woodbury identity to factorize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Form {
    /// p×p system when p ≤ n, n×n otherwise.
    #[default]
    Auto,
    Primal,
    Dual,
}

impl Form {
    pub fn use_primal(self, p: usize, n: usize) -> bool {
        match self {
            Form::Auto => p <= n,
            Form::Primal => true,
            Form::Dual => false,
        }
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factor of a symmetric positive definite matrix, with the diagonal
/// jitter that had to be added (zero when none).
pub struct Factor {
    l: DMatrix<f64>,
    pub jitter: f64,
}

impl Factor {
    /// The lower factor L with LLᵀ = A.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.l.solve_lower_triangular(b).expect("positive diagonal");
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        dense::lower_solve_in_place(&self.l, &mut x);
        dense::lower_transpose_solve_in_place(&self.l, &mut x);
        x
    }

    /// L⁻¹B for the lower factor L.
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        dense::lower_solve_in_place(&self.l, &mut out);
        out
    }

    /// L⁻¹.
    pub fn lower_inverse(&self) -> DMatrix<f64> {
        dense::lower_inverse(&self.l)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let li = self.lower_inverse();
        let mut inv = li.tr_mul(&li);
        symmetrize(&mut inv);
        inv
    }
}

/// Cholesky factorization with a jitter ladder: 1e−12·trace/n, ×10 up to 1e−6·trace/n.
pub fn factor_spd(mat: DMatrix<f64>) -> Result<Factor> {
    let n = mat.nrows();
    if n == 0 {
        return Ok(Factor { l: mat, jitter: 0.0 });
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned { condition: f64::INFINITY, iteration: None });
    }
    if let Some(l) = dense::cholesky_lower(&mat) {
        return Ok(Factor { l, jitter: 0.0 });
    }
    let scale = (mat.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = 1e-12;
    while rel <= 1e-6 * 1.000_001 {
        let jitter = rel * scale;
        let mut m = mat.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(l) = dense::cholesky_lower(&m) {
            log::debug!("cholesky succeeded with jitter {jitter:.3e}");
            return Ok(Factor { l, jitter });
        }
        rel *= 10.0;
    }
    Err(Error::IllConditioned { condition: condition_estimate(&mat), iteration: None })
}

fn condition_estimate(mat: &DMatrix<f64>) -> f64 {
    let Some((eig, _)) = dense::symmetric_eigen(mat) else {
        return f64::INFINITY;
    };
    let max = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Posterior from sufficient statistics: C = (A/γ² + C₀⁻¹)⁻¹, m = C(v/γ² + C₀⁻¹m₀).
pub fn posterior_primal(
    stats: &SufficientStats,
    prior_mean: &DVector<f64>,
    prior_precision: &PriorPrecision,
    gamma_sq: f64,
) -> Result<GaussianPosterior> {
    check_gamma(gamma_sq)?;
    let p = stats.p();
    let mut precision = &stats.a / gamma_sq;
    let prior_term = match prior_precision {
        PriorPrecision::Diagonal(d) => {
            for i in 0..p {
                precision[(i, i)] += d[i];
            }
            d.component_mul(prior_mean)
        }
        PriorPrecision::Full(q) => {
            precision += q;
            q * prior_mean
        }
    };
    let rhs = &stats.v / gamma_sq + prior_term;
    let factor = factor_spd(precision)?;
    let cov = factor.inverse();
    let mean = factor.solve(&rhs);
    Ok(GaussianPosterior { mean, cov })
}

/// Posterior by the n×n (Woodbury) form: K = C₀Xᵀ(XC₀Xᵀ + γ²I)⁻¹.
pub fn posterior_dual(
    block: &DesignBlock,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    gamma_sq: f64,
) -> Result<GaussianPosterior> {
    check_gamma(gamma_sq)?;
    let x = block.x();
    let c0xt = prior_cov * x.transpose();
    let mut s = x * &c0xt;
    for i in 0..s.nrows() {
        s[(i, i)] += gamma_sq;
    }
    let factor = factor_spd(s)?;
    // Kᵀ = S⁻¹ X C₀
    let kt = factor.solve_mat(&c0xt.transpose());
    let resid = block.y() - x * prior_mean;
    let mean = prior_mean + kt.tr_mul(&resid);
    let mut cov = prior_cov - kt.tr_mul(&c0xt.transpose());
    symmetrize(&mut cov);
    Ok(GaussianPosterior { mean, cov })
}

/// Single-row Kalman update at O(p²).
pub fn kalman_step(prev: &GaussianPosterior, x: &DVector<f64>, y: f64, gamma_sq: f64) -> GaussianPosterior {
    let cx = &prev.cov * x;
    let s = gamma_sq + x.dot(&cx);
    let gain = &cx / s;
    let mean = &prev.mean + &gain * (y - x.dot(&prev.mean));
    let mut cov = &prev.cov - &gain * cx.transpose();
    symmetrize(&mut cov);
    GaussianPosterior { mean, cov }
}

/// Batch form of the recursive mean update with pseudo-observations: the rows
/// already assimilated (`carried`) are stacked over the new block and their
/// labels replaced by `carried · prev_mean`, so only the new residual drives the
/// correction m = m_prev + C₀𝖷ᵀ(γ²I + 𝖷C₀𝖷ᵀ)⁻¹(Ŷ − 𝖷m_prev).
pub fn recursive_rewrite_update(
    prev_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    carried: &DMatrix<f64>,
    block: &DesignBlock,
    gamma_sq: f64,
) -> Result<DVector<f64>> {
    check_gamma(gamma_sq)?;
    let p = prev_mean.len();
    if carried.ncols() != p || block.p() != p {
        return Err(Error::Dimension("carried rows and block must match the mean length".into()));
    }
    if gamma_sq.is_infinite() {
        return Ok(prev_mean.clone());
    }
    let k = carried.nrows();
    let n = k + block.n();
    let mut stacked = DMatrix::zeros(n, p);
    stacked.rows_mut(0, k).copy_from(carried);
    stacked.rows_mut(k, block.n()).copy_from(block.x());
    let mut resid = DVector::zeros(n);
    resid.rows_mut(k, block.n()).copy_from(&(block.y() - block.x() * prev_mean));
    let c0xt = prior_cov * stacked.transpose();
    let mut s = &stacked * &c0xt;
    for i in 0..n {
        s[(i, i)] += gamma_sq;
    }
    let alpha = factor_spd(s)?.solve(&resid);
    Ok(prev_mean + c0xt * alpha)
}

/// Rank-M compression of the rows of S.
#[derive(Debug, Clone)]
pub struct ReducedRank {
    /// Leading eigenvectors of SSᵀ (columns), rows × M.
    pub u: DMatrix<f64>,
    /// Square roots of the retained eigenvalues, descending.
    pub sigma: DVector<f64>,
    /// UᵀS.
    pub x_hat: DMatrix<f64>,
    /// Dropped eigenvalues of SSᵀ, descending.
    pub dropped: DVector<f64>,
}

impl ReducedRank {
    /// Sum of dropped eigenvalues (the trace-norm error of X̂ᵀX̂).
    pub fn tail_sum(&self) -> f64 {
        self.dropped.iter().sum()
    }

    /// ‖SᵀS − X̂ᵀX̂‖_F, equal to the Euclidean norm of the dropped eigenvalues.
    pub fn tail_frobenius(&self) -> f64 {
        self.dropped.norm()
    }
}

/// Top-`m` eigenpairs of a symmetric PSD Gram matrix in a deterministic order:
/// eigenvalues descending (ties by original index), each eigenvector signed so
/// its largest-magnitude entry is positive. Returns (U, retained, dropped).
pub fn top_eigenpairs(gram: &DMatrix<f64>, m: usize) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let n = gram.nrows();
    if m > n {
        return Err(Error::Dimension(format!("rank {m} exceeds {n} available rows")));
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen { batch: 0 });
    }
    let mut g = gram.clone();
    symmetrize(&mut g);
    let (values, vectors) = dense::symmetric_eigen(&g).ok_or(Error::Eigen { batch: 0 })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut u = DMatrix::zeros(n, m);
    for (col, &idx) in order.iter().take(m).enumerate() {
        let mut v = vectors.column(idx).into_owned();
        let (imax, _) = v.iter().enumerate().fold((0, 0.0f64), |acc, (i, &x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        u.set_column(col, &v);
    }
    let vals: Vec<f64> = order.iter().map(|&i| values[i].max(0.0)).collect();
    Ok((u, DVector::from_vec(vals[..m].to_vec()), DVector::from_vec(vals[m..].to_vec())))
}

/// Best rank-`m` compression of the rows of `s` (2M × p): X̂ = UᵀS where U holds
/// the leading eigenvectors of SSᵀ.
pub fn reduced_rank_eig(s: &DMatrix<f64>, m: usize) -> Result<ReducedRank> {
    let gram = dense::mul_transpose(s, s);
    let (u, vals, dropped) = top_eigenpairs(&gram, m)?;
    let x_hat = u.tr_mul(s);
    Ok(ReducedRank { u, sigma: vals.map(f64::sqrt), x_hat, dropped })
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
}

/// Conjugate gradients for a symmetric positive definite operator; stops when
/// ‖r‖ ≤ tol·‖b‖ or after `max_iter` iterations.
pub fn cg_solve(apply_a: impl Fn(&DVector<f64>) -> DVector<f64>, b: &DVector<f64>, tol: f64, max_iter: usize) -> CgOutcome {
    let mut x = DVector::zeros(b.len());
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return CgOutcome { x, iterations: 0, residual_norm: 0.0, converged: true };
    }
    let target = tol * b_norm;
    let mut r = b.clone();
    let mut d = r.clone();
    let mut rr = r.norm_squared();
    for it in 1..=max_iter {
        let ad = apply_a(&d);
        let alpha = rr / d.dot(&ad);
        x.axpy(alpha, &d, 1.0);
        r.axpy(-alpha, &ad, 1.0);
        let rr_new = r.norm_squared();
        if rr_new.sqrt() <= target {
            return CgOutcome { x, iterations: it, residual_norm: rr_new.sqrt(), converged: true };
        }
        d = &r + &d * (rr_new / rr);
        rr = rr_new;
    }
    CgOutcome { x, iterations: max_iter, residual_norm: rr.sqrt(), converged: false }
}

fn check_gamma(gamma_sq: f64) -> Result<()> {
    if gamma_sq > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("noise variance must be positive, got {gamma_sq}")))
    }
}
