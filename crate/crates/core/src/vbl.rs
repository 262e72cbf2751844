//! Monolithic variational Bayesian LASSO: the EM path (MAP iterate μ) and the
//! VBEM path (Gaussian q(β) = N(m, C)) iterated in lockstep.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::gaussian::{factor_spd, DesignBlock};
use crate::gig::{cond_inv_theta, ln_gig_normalizer, ln_marginal_prior, GigParams, PriorKind};
use crate::model::{CovNeed, CovRepr, LinearModel};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub gamma_sq: f64,
    pub lambda: f64,
    pub delta: f64,
    pub kind: PriorKind,
}

impl HyperParams {
    pub const DEFAULT_DELTA: f64 = 1e-3;

    pub fn new(gamma_sq: f64, lambda: f64, delta: f64, kind: PriorKind) -> Result<Self> {
        let hp = HyperParams { gamma_sq, lambda, delta, kind };
        hp.validate()?;
        Ok(hp)
    }

    /// Laplace (ν = 1) prior with the default δ.
    pub fn laplace(gamma: f64, lambda: f64) -> Result<Self> {
        Self::new(gamma * gamma, lambda, Self::DEFAULT_DELTA, PriorKind::LaplaceNu1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_sq > 0.0 && self.gamma_sq.is_finite()) {
            return Err(Error::Domain(format!("gamma_sq must be positive, got {}", self.gamma_sq)));
        }
        self.gig().validate()
    }

    pub fn gig(&self) -> GigParams {
        GigParams { kind: self.kind, delta: self.delta, lambda: self.lambda }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_sq.sqrt()
    }
}

/// (μ, m, C): MAP iterate, variational mean and variational covariance.
#[derive(Debug, Clone)]
pub struct PosteriorTriple {
    pub mu: DVector<f64>,
    pub m: DVector<f64>,
    pub cov: CovRepr,
}

impl PosteriorTriple {
    /// μ = m = 0 and C = D(θ⁰) with θ⁰ = 1.
    pub fn initial(p: usize, need: CovNeed) -> Self {
        let cov = match need {
            CovNeed::Full => CovRepr::Full(DMatrix::identity(p, p)),
            _ => CovRepr::Diagonal(DVector::from_element(p, 1.0)),
        };
        PosteriorTriple { mu: DVector::zeros(p), m: DVector::zeros(p), cov }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn cov_diag(&self) -> DVector<f64> {
        self.cov.diagonal().unwrap_or_else(|| DVector::zeros(self.dim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// ‖Xm − Y‖ and ‖Xμ − Y‖ both at most ε.
    Misfit,
    /// max(‖Δm‖, ‖Δμ‖, ‖ΔC‖) at most ε.
    IterateDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub max_iter: usize,
    pub eps: f64,
    pub metric: StopMetric,
}

impl StoppingRule {
    /// Misfit rule with ε = ρ·γ·√n, ρ = 0.9.
    pub fn misfit_default(hp: &HyperParams, n: usize, max_iter: usize) -> Self {
        StoppingRule { max_iter, eps: 0.9 * hp.gamma() * (n as f64).sqrt(), metric: StopMetric::Misfit }
    }

    pub fn iterate_delta(eps: f64, max_iter: usize) -> Self {
        StoppingRule { max_iter, eps, metric: StopMetric::IterateDelta }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.eps > 0.0) {
            return Err(Error::Invalid("stopping rule needs max_iter >= 1 and eps > 0".into()));
        }
        Ok(())
    }

    fn satisfied(&self, info: &StepInfo) -> bool {
        match self.metric {
            // f64::max ignores the NaN misfit of a skipped EM path.
            StopMetric::Misfit => info.misfit_m.max(info.misfit_mu) <= self.eps,
            StopMetric::IterateDelta => info.delta_m.max(info.delta_mu).max(info.delta_c) <= self.eps,
        }
    }
}

/// 1/θ for the EM path: E[1/θ_j | β_j = μ_j].
pub fn em_theta_update(mu: &DVector<f64>, hp: &HyperParams) -> Result<DVector<f64>> {
    let gig = hp.gig();
    let v: Result<Vec<f64>> = mu.iter().map(|x| cond_inv_theta(&gig, x * x)).collect();
    Ok(DVector::from_vec(v?))
}

/// 1/θ for the VBEM path: E[1/θ_j] under q(θ_j) built from m_j² + C_jj.
pub fn vbem_theta_update(m: &DVector<f64>, c_diag: &DVector<f64>, hp: &HyperParams) -> Result<DVector<f64>> {
    if c_diag.len() != m.len() {
        return Err(Error::Dimension("covariance diagonal and mean differ in length".into()));
    }
    if c_diag.iter().any(|c| *c < 0.0) {
        return Err(Error::Domain("negative posterior variance".into()));
    }
    let gig = hp.gig();
    let v: Result<Vec<f64>> = m.iter().zip(c_diag.iter()).map(|(x, c)| cond_inv_theta(&gig, x * x + c)).collect();
    Ok(DVector::from_vec(v?))
}

/// Per-coordinate prior part of the ELBO, E_q[ln p(β_j|θ_j) + ln p(θ_j) − ln q(θ_j)],
/// where q(θ_j) was built from `q_beta_sq[j]` and E[β_j²] = m_j² + C_jj.
fn elbo_prior_terms(m: &DVector<f64>, c_diag: &DVector<f64>, q_beta_sq: &DVector<f64>, hp: &HyperParams) -> Result<f64> {
    let gig = hp.gig();
    let mut total = 0.0;
    match hp.kind {
        PriorKind::FixedScale(v) => {
            for j in 0..m.len() {
                total += -0.5 * LN_2PI - 0.5 * v.ln() - 0.5 * (m[j] * m[j] + c_diag[j]) / v;
            }
        }
        kind => {
            let nu = kind.nu().expect("shape of a mixing prior");
            let lambda = if kind.is_improper() { 0.0 } else { hp.lambda };
            let d2 = hp.delta * hp.delta;
            let ln_z_prior = if kind.is_improper() { 0.0 } else { ln_gig_normalizer(nu, hp.delta, lambda).unwrap_or(0.0) };
            for j in 0..m.len() {
                let a2 = d2 + q_beta_sq[j];
                let e_inv = cond_inv_theta(&gig, q_beta_sq[j])?;
                let e_beta_sq = m[j] * m[j] + c_diag[j];
                total += -0.5 * LN_2PI - 0.5 * (e_beta_sq + d2 - a2) * e_inv - ln_z_prior
                    + ln_gig_normalizer(nu - 0.5, a2.sqrt(), lambda)?;
            }
        }
    }
    Ok(total)
}

/// ELBO up to a constant, from precomputed likelihood pieces.
#[allow(clippy::too_many_arguments)]
pub fn elbo_from_parts(
    n: usize,
    misfit_sq: f64,
    trace_xcx: f64,
    ln_det_cov: f64,
    m: &DVector<f64>,
    c_diag: &DVector<f64>,
    q_beta_sq: &DVector<f64>,
    hp: &HyperParams,
) -> Result<f64> {
    let p = m.len() as f64;
    let g2 = hp.gamma_sq;
    let likelihood = -0.5 * n as f64 * (LN_2PI + g2.ln()) - (misfit_sq + trace_xcx) / (2.0 * g2);
    let entropy = 0.5 * ln_det_cov + 0.5 * p * (LN_2PI + 1.0);
    Ok(likelihood + elbo_prior_terms(m, c_diag, q_beta_sq, hp)? + entropy)
}

/// ELBO of q(β) = N(m, C) and q(θ_j) = GIG(ν−½, √(δ²+q_beta_sq_j), λ) on a dense block.
pub fn elbo(block: &DesignBlock, hp: &HyperParams, m: &DVector<f64>, c: &DMatrix<f64>, q_beta_sq: &DVector<f64>) -> Result<f64> {
    let factor = factor_spd(c.clone())?;
    let misfit = (block.y() - block.x() * m).norm_squared();
    let trace = (block.x() * c).component_mul(block.x()).sum();
    elbo_from_parts(block.n(), misfit, trace, factor.ln_det(), m, &c.diagonal(), q_beta_sq, hp)
}

/// ln N(Y; Xμ, γ²I) + Σ ln p(μ_j), the objective the EM path ascends.
pub fn em_logjoint(n: usize, misfit_sq: f64, mu: &DVector<f64>, hp: &HyperParams) -> Result<f64> {
    let gig = hp.gig();
    let mut total = -0.5 * n as f64 * (LN_2PI + hp.gamma_sq.ln()) - misfit_sq / (2.0 * hp.gamma_sq);
    for x in mu.iter() {
        total += ln_marginal_prior(&gig, *x)?;
    }
    Ok(total)
}

/// Everything measured in one coupled iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub iter: usize,
    /// ‖Xm − Y‖.
    pub misfit_m: f64,
    /// ‖Xμ − Y‖.
    pub misfit_mu: f64,
    pub elbo: f64,
    pub em_logjoint: f64,
    pub delta_m: f64,
    pub delta_mu: f64,
    pub delta_c: f64,
    /// tr(XCXᵀ) of the new VBEM covariance.
    pub trace_xcx: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VblOptions {
    /// Covariance kept for the VBEM path; `Full` unless p is large.
    pub cov: Option<CovNeed>,
    /// Feed the VBEM θ-update with m_j² only (q(β) collapsed to a point mass).
    pub point_mass: bool,
    /// Skip ELBO and log-joint evaluation.
    pub skip_objectives: bool,
    /// Run the VBEM path only; μ is left untouched. The paths do not interact,
    /// so (m, C) are unaffected.
    pub skip_em: bool,
}

/// One coupled EM/VBEM iteration at a time, so outer loops can change
/// hyperparameters between steps.
#[derive(Debug, Clone)]
pub struct VblStepper {
    pub hp: HyperParams,
    pub triple: PosteriorTriple,
    pub iter: usize,
    pub opts: VblOptions,
}

impl VblStepper {
    pub fn new(hp: HyperParams, init: PosteriorTriple, opts: VblOptions) -> Result<Self> {
        hp.validate()?;
        if init.mu.iter().chain(init.m.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("initial iterate is not finite".into()));
        }
        Ok(VblStepper { hp, triple: init, iter: 0, opts })
    }

    fn cov_need(&self) -> CovNeed {
        self.opts.cov.unwrap_or(match self.triple.cov {
            CovRepr::Full(_) => CovNeed::Full,
            _ => CovNeed::Diagonal,
        })
    }

    /// Runs one iteration against separate EM and VBEM models (they differ only in
    /// the online setting, where the pseudo-observations of the two paths differ).
    pub fn step_pair<E: LinearModel, V: LinearModel>(&mut self, em: &E, vbem: &V) -> Result<StepInfo> {
        let t = self.iter;
        let hp = self.hp;
        let c_diag = self.triple.cov_diag();
        let q_beta_sq = if self.opts.point_mass {
            self.triple.m.map(|x| x * x)
        } else {
            self.triple.m.zip_map(&c_diag, |x, c| x * x + c)
        };
        let inv_v = DVector::from_vec(
            q_beta_sq.iter().map(|b| cond_inv_theta(&hp.gig(), *b)).collect::<Result<Vec<f64>>>()?,
        );
        let need = self.cov_need();
        let post_v = vbem.solve(&inv_v, hp.gamma_sq, need).map_err(|e| e.at_iteration(t))?;
        let (mu_new, misfit_sq_mu, em_jitter) = if self.opts.skip_em {
            (self.triple.mu.clone(), f64::NAN, 0.0)
        } else {
            let inv_e = em_theta_update(&self.triple.mu, &hp)?;
            let post_e = em.solve(&inv_e, hp.gamma_sq, CovNeed::MeanOnly).map_err(|e| e.at_iteration(t))?;
            let misfit = em.misfit_sq(&post_e.mean);
            (post_e.mean, misfit, post_e.jitter)
        };

        let misfit_sq_m = vbem.misfit_sq(&post_v.mean);
        let trace_xcx = post_v.trace_xcx.unwrap_or(0.0);
        let new_diag = post_v.cov.diagonal().unwrap_or_else(|| DVector::zeros(c_diag.len()));
        let (elbo_val, logjoint) = if self.opts.skip_objectives {
            (f64::NAN, f64::NAN)
        } else {
            (
                elbo_from_parts(
                    vbem.n_obs(),
                    misfit_sq_m,
                    trace_xcx,
                    post_v.ln_det_cov.unwrap_or(f64::NAN),
                    &post_v.mean,
                    &new_diag,
                    &q_beta_sq,
                    &hp,
                )?,
                if self.opts.skip_em { f64::NAN } else { em_logjoint(em.n_obs(), misfit_sq_mu, &mu_new, &hp)? },
            )
        };
        let delta_c = match (&self.triple.cov, &post_v.cov) {
            (CovRepr::Full(a), CovRepr::Full(b)) => (a - b).norm(),
            _ => (&c_diag - &new_diag).norm(),
        };
        let info = StepInfo {
            iter: t + 1,
            misfit_m: misfit_sq_m.sqrt(),
            misfit_mu: misfit_sq_mu.sqrt(),
            elbo: elbo_val,
            em_logjoint: logjoint,
            delta_m: (&post_v.mean - &self.triple.m).norm(),
            delta_mu: (&mu_new - &self.triple.mu).norm(),
            delta_c,
            trace_xcx,
            jitter: post_v.jitter.max(em_jitter),
        };
        self.triple = PosteriorTriple { mu: mu_new, m: post_v.mean, cov: post_v.cov };
        self.iter += 1;
        Ok(info)
    }

    pub fn step<M: LinearModel>(&mut self, model: &M) -> Result<StepInfo> {
        self.step_pair(model, model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub misfit: f64,
    pub elbo: f64,
    pub em_logjoint: f64,
    pub delta_m: f64,
    pub delta_mu: f64,
}

impl From<&StepInfo> for TraceRow {
    fn from(s: &StepInfo) -> Self {
        TraceRow {
            iter: s.iter,
            misfit: s.misfit_m,
            elbo: s.elbo,
            em_logjoint: s.em_logjoint,
            delta_m: s.delta_m,
            delta_mu: s.delta_mu,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VblTrace {
    pub steps: Vec<StepInfo>,
    pub converged: bool,
    /// The iterate with the smallest ‖Xm − Y‖ and its iteration number.
    pub best: Option<(usize, PosteriorTriple)>,
}

impl VblTrace {
    pub fn rows(&self) -> Vec<TraceRow> {
        self.steps.iter().map(TraceRow::from).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Runs the coupled loop until both paths meet the stopping rule or `max_iter`
/// iterations are spent. `observer` sees every iterate.
pub fn vbl_run<E, V>(
    em: &E,
    vbem: &V,
    hp: &HyperParams,
    init: PosteriorTriple,
    stop: &StoppingRule,
    opts: VblOptions,
    mut observer: impl FnMut(&StepInfo, &PosteriorTriple),
) -> Result<(PosteriorTriple, VblTrace)>
where
    E: LinearModel,
    V: LinearModel,
{
    stop.validate()?;
    if em.dim() != init.dim() || vbem.dim() != init.dim() {
        return Err(Error::Dimension("initial iterate does not match the design width".into()));
    }
    let mut stepper = VblStepper::new(*hp, init, opts)?;
    let mut trace = VblTrace { steps: Vec::new(), converged: false, best: None };
    let mut best_misfit = f64::INFINITY;
    while stepper.iter < stop.max_iter {
        let info = stepper.step_pair(em, vbem)?;
        observer(&info, &stepper.triple);
        if info.misfit_m < best_misfit {
            best_misfit = info.misfit_m;
            trace.best = Some((info.iter, stepper.triple.clone()));
        }
        trace.steps.push(info);
        if stop.satisfied(&info) {
            trace.converged = true;
            break;
        }
    }
    Ok((stepper.triple, trace))
}

pub fn vbl_iterate<M: LinearModel>(
    model: &M,
    hp: &HyperParams,
    init: PosteriorTriple,
    stop: &StoppingRule,
) -> Result<(PosteriorTriple, VblTrace)> {
    vbl_run(model, model, hp, init, stop, VblOptions::default(), |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CredibleFlag {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub zero_inside: bool,
    /// μ_j lies outside the 2σ interval.
    pub flagged: bool,
}

pub fn credible_flags(triple: &PosteriorTriple) -> Vec<CredibleFlag> {
    let diag = triple.cov_diag();
    (0..triple.dim())
        .map(|j| {
            let half = 2.0 * diag[j].max(0.0).sqrt();
            let (lower, upper) = (triple.m[j] - half, triple.m[j] + half);
            CredibleFlag {
                index: j,
                lower,
                upper,
                zero_inside: lower < 0.0 && 0.0 < upper,
                flagged: !(lower < triple.mu[j] && triple.mu[j] < upper),
            }
        })
        .collect()
}

/// v_j · 1{|v_j| > eps}.
pub fn threshold(v: &DVector<f64>, eps: f64) -> DVector<f64> {
    v.map(|x| if x.abs() > eps { x } else { 0.0 })
}
