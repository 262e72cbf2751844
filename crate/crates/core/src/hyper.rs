//! Learning the noise variance γ² and the sparsity scale λ (δ and ν stay fixed).
//!
//! Three tuners: nested (outer EM step after each full VBL run), interleaved (one
//! outer step per VBL iteration) and the Dirac-constrained variant that adds an
//! M-step for (γ², λ) inside EM or VBEM.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;

use crate::gig::{cond_inv_theta, PriorKind};
use crate::model::{CovNeed, LinearModel};
use crate::special::{lambert_w, ln_bessel_k, WBranch};
use crate::vbl::{vbl_run, HyperParams, PosteriorTriple, StepInfo, StoppingRule, VblOptions, VblStepper};
use crate::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const GAMMA_SQ_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaUpdate {
    pub gamma_sq: f64,
    /// The raw value was below the floor and was clamped.
    pub clamped: bool,
}

fn clamp_gamma_sq(raw: f64) -> GammaUpdate {
    if raw >= GAMMA_SQ_FLOOR {
        GammaUpdate { gamma_sq: raw, clamped: false }
    } else {
        log::warn!("gamma^2 update {raw:.3e} clamped to {GAMMA_SQ_FLOOR:e}");
        GammaUpdate { gamma_sq: GAMMA_SQ_FLOOR, clamped: true }
    }
}

/// γ² = E|Y − Xβ|²/n = (|Y − Xm|² + tr(XCXᵀ))/n.
pub fn gamma_sq_update(n: usize, misfit_sq: f64, trace_xcx: f64) -> Result<GammaUpdate> {
    if n == 0 {
        return Err(Error::Invalid("gamma^2 update needs at least one observation".into()));
    }
    Ok(clamp_gamma_sq((misfit_sq + trace_xcx) / n as f64))
}

/// γ² = (s − 2vᵀm + tr[A(C + mmᵀ)])/n from sufficient statistics and a full covariance.
pub fn gamma_sq_update_stats(
    stats: &crate::gaussian::SufficientStats,
    m: &DVector<f64>,
    cov: &nalgebra::DMatrix<f64>,
) -> Result<GammaUpdate> {
    if stats.count == 0 {
        return Err(Error::Invalid("gamma^2 update needs at least one observation".into()));
    }
    let second = cov + m * m.transpose();
    let raw = (stats.s - 2.0 * stats.v.dot(m) + stats.a.component_mul(&second).sum()) / stats.count as f64;
    Ok(clamp_gamma_sq(raw))
}

/// Value of Σ_j (E[β_j²]/θ_j(λ) − ln(1/θ_j(λ))), the λ-part of the outer objective
/// (to be minimized), with 1/θ_j(λ) = E[1/θ_j] at β_j² = E[β_j²].
pub fn lambda_objective(lambda: f64, e_beta_sq: &DVector<f64>, hp: &HyperParams) -> Result<f64> {
    let params = crate::gig::GigParams { lambda, ..hp.gig() };
    let mut total = 0.0;
    for e in e_beta_sq.iter() {
        let inv = cond_inv_theta(&params, *e)?;
        total += e * inv - inv.ln();
    }
    Ok(total)
}

/// Minimizer of a unimodal `f` on [lo, hi] by golden-section search.
pub fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while (hi - lo).abs() > tol * (1.0 + c.abs()) {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Outcome of a λ update. For power-improper priors the shape is updated through
/// the renaming λ = 1 − 2ν, and `kind` carries the new shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaUpdate {
    pub lambda: f64,
    pub kind: PriorKind,
}

/// Closed-form maximizer of the outer objective in λ, with E[β_j²] = C_jj + m_j².
pub fn lambda_update(m: &DVector<f64>, c_diag: &DVector<f64>, hp: &HyperParams) -> Result<LambdaUpdate> {
    if m.len() != c_diag.len() || m.is_empty() {
        return Err(Error::Dimension("mean and covariance diagonal must be non-empty and equal length".into()));
    }
    if c_diag.iter().any(|c| *c < 0.0) {
        return Err(Error::Domain("negative posterior variance".into()));
    }
    let p = m.len() as f64;
    let d2 = hp.delta * hp.delta;
    let e = m.zip_map(c_diag, |x, c| c + x * x);
    let same = |lambda: f64| Ok(LambdaUpdate { lambda, kind: hp.kind });
    match hp.kind {
        PriorKind::LaplaceNu1 => {
            let s: f64 = e.iter().map(|e| e / (d2 + e).sqrt()).sum();
            positive_inverse(s / p).and_then(same)
        }
        PriorKind::InvGaussNu0 => {
            let s: f64 = e.iter().map(|e| e / (d2 + e).sqrt()).sum();
            let denom = p - e.iter().map(|e| e / (d2 + e)).sum::<f64>();
            if denom <= 0.0 {
                return Err(Error::DegenerateUpdate(format!("nu = 0 lambda update denominator {denom:.3e} is not positive")));
            }
            positive_inverse(s / denom).and_then(same)
        }
        PriorKind::JeffreysImproper | PriorKind::PowerImproper(_) => {
            let s: f64 = e.iter().map(|e| if d2 + e > 0.0 { e / (d2 + e) } else { 1.0 }).sum();
            let lambda = positive_inverse(s / p)?;
            let nu = 0.5 * (1.0 - lambda);
            let kind = if nu == 0.0 { PriorKind::JeffreysImproper } else { PriorKind::PowerImproper(nu) };
            Ok(LambdaUpdate { lambda, kind })
        }
        PriorKind::GeneralNu(_) => {
            let obj = |ln_l: f64| lambda_objective(ln_l.exp(), &e, hp).unwrap_or(f64::INFINITY);
            let ln_l = golden_section_min(obj, -40.0, 40.0, 1e-12);
            same(ln_l.exp())
        }
        PriorKind::FixedScale(_) => same(hp.lambda),
    }
}

fn positive_inverse(inv: f64) -> Result<f64> {
    if inv > 0.0 && inv.is_finite() {
        Ok(1.0 / inv)
    } else {
        Err(Error::DegenerateUpdate(format!("lambda^-1 = {inv:.3e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HyperTraceRow {
    pub tau: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default)]
pub struct HyperTrace {
    pub rows: Vec<HyperTraceRow>,
}

impl HyperTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TunerConfig {
    /// Inner VBL stopping rule (nested) or iteration cap (interleaved, Dirac).
    pub inner: StoppingRule,
    pub outer_max: usize,
    /// Stop when γ and λ both change by less than this relative amount.
    pub tol: f64,
    /// Iterations after a cold start during which hyperparameters are frozen.
    pub warmup: usize,
    pub cov: CovNeed,
}

impl TunerConfig {
    pub fn new(max_iter: usize, tol: f64) -> Self {
        TunerConfig {
            inner: StoppingRule::iterate_delta(1e-10, max_iter),
            outer_max: max_iter,
            tol,
            warmup: 2,
            cov: CovNeed::Full,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub hp: HyperParams,
    pub triple: PosteriorTriple,
    pub trace: HyperTrace,
    pub converged: bool,
    /// Some γ² update hit the floor.
    pub clamped: bool,
}

fn rel_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(f64::MIN_POSITIVE)
}

/// Outer objective (negated, so smaller is better) at the new hyperparameters:
/// n ln γ + E|Y − Xβ|²/(2γ²) + ½ Σ (E[β_j²]/θ_j(λ) − ln(1/θ_j(λ))).
fn outer_objective(n: usize, expected_sq: f64, e_beta_sq: &DVector<f64>, hp: &HyperParams) -> f64 {
    let lam = lambda_objective(hp.lambda, e_beta_sq, hp).unwrap_or(f64::NAN);
    0.5 * n as f64 * hp.gamma_sq.ln() + expected_sq / (2.0 * hp.gamma_sq) + 0.5 * lam
}

/// One outer EM step on (γ², λ) from the current VBEM iterate.
fn outer_step<M: LinearModel>(model: &M, info: &StepInfo, triple: &PosteriorTriple, hp: &HyperParams) -> Result<(HyperParams, bool, f64)> {
    let n = model.n_obs();
    let expected_sq = info.misfit_m * info.misfit_m + info.trace_xcx;
    let g = gamma_sq_update(n, info.misfit_m * info.misfit_m, info.trace_xcx)?;
    let c_diag = triple.cov_diag();
    let l = lambda_update(&triple.m, &c_diag, hp)?;
    let new = HyperParams { gamma_sq: g.gamma_sq, lambda: l.lambda, kind: l.kind, ..*hp };
    let e_beta_sq = triple.m.zip_map(&c_diag, |x, c| x * x + c);
    Ok((new, g.clamped, outer_objective(n, expected_sq, &e_beta_sq, &new)))
}

fn row(tau: usize, hp: &HyperParams, objective: f64) -> HyperTraceRow {
    HyperTraceRow { tau, gamma: hp.gamma(), lambda: hp.lambda, objective }
}

/// Nested tuner: VBL to convergence, then one closed-form outer step, repeated.
pub fn tune_nested<M: LinearModel>(model: &M, hp0: &HyperParams, cfg: &TunerConfig) -> Result<TuneResult> {
    let mut hp = *hp0;
    let mut triple = PosteriorTriple::initial(model.dim(), cfg.cov);
    let mut trace = HyperTrace::default();
    let mut clamped = false;
    let opts = VblOptions { cov: Some(cfg.cov), ..Default::default() };
    for tau in 1..=cfg.outer_max {
        let (t, vtrace) = vbl_run(model, model, &hp, triple, &cfg.inner, opts, |_, _| {})
            .map_err(|e| e.context(format!("nested tuner, outer step {tau}")))?;
        triple = t;
        let info = *vtrace.steps.last().expect("at least one inner iteration");
        let (new, c, obj) = outer_step(model, &info, &triple, &hp)?;
        clamped |= c;
        trace.rows.push(row(tau, &new, obj));
        let done = rel_change(hp.gamma(), new.gamma()) < cfg.tol && rel_change(hp.lambda, new.lambda) < cfg.tol;
        hp = new;
        if done {
            return Ok(TuneResult { hp, triple, trace, converged: true, clamped });
        }
    }
    Ok(TuneResult { hp, triple, trace, converged: false, clamped })
}

/// Interleaved tuner: one outer step after every VBL iteration (after the warm-up).
pub fn tune_interleaved<M: LinearModel>(model: &M, hp0: &HyperParams, cfg: &TunerConfig) -> Result<TuneResult> {
    let opts = VblOptions { cov: Some(cfg.cov), skip_objectives: true, ..Default::default() };
    let mut stepper = VblStepper::new(*hp0, PosteriorTriple::initial(model.dim(), cfg.cov), opts)?;
    let mut trace = HyperTrace::default();
    let mut clamped = false;
    for t in 0..cfg.outer_max {
        let info = stepper.step(model).map_err(|e| e.context("interleaved tuner"))?;
        if t < cfg.warmup {
            continue;
        }
        let (new, c, obj) = outer_step(model, &info, &stepper.triple, &stepper.hp)?;
        clamped |= c;
        trace.rows.push(row(t + 1, &new, obj));
        let old = stepper.hp;
        stepper.hp = new;
        if rel_change(old.gamma(), new.gamma()) < cfg.tol && rel_change(old.lambda, new.lambda) < cfg.tol {
            return Ok(TuneResult { hp: new, triple: stepper.triple, trace, converged: true, clamped });
        }
    }
    Ok(TuneResult { hp: stepper.hp, triple: stepper.triple, trace, converged: false, clamped })
}

/// Which θ-path the Dirac-constrained tuner updates from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TunedPath {
    Em,
    Vbem,
}

/// How the ν = 1 Dirac λ step treats the ln K₁(λδ) term of its objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiracVariant {
    /// Drop the term: λ ← √(p/E).
    #[default]
    Literal,
    /// Keep it and minimize p ln K₁(λδ) − p ln λ + Eλ²/2 numerically.
    WithBesselTerm,
}

/// ν = 1 Dirac step: E = Σ (λ a_j + 1)/λ² with a_j = √(δ² + E[β_j²]).
pub fn dirac_lambda_nu1(lambda: f64, a: &DVector<f64>, delta: f64, variant: DiracVariant) -> Result<f64> {
    let p = a.len() as f64;
    let e: f64 = a.iter().map(|a| (lambda * a + 1.0) / (lambda * lambda)).sum();
    match variant {
        DiracVariant::Literal => Ok((p / e).sqrt()),
        DiracVariant::WithBesselTerm => {
            if delta <= 0.0 {
                return Err(Error::Domain("the Bessel term needs delta > 0".into()));
            }
            let obj = |ln_l: f64| {
                let l = ln_l.exp();
                p * ln_bessel_k(1.0, l * delta) - p * ln_l + 0.5 * e * l * l
            };
            Ok(golden_section_min(obj, -40.0, 40.0, 1e-13).exp())
        }
    }
}

/// ν = 0 Dirac step: λ = (2/δ) exp(−Γ + ½ W₋₁(−δ² e^{2Γ}/(2F))) with F = Σ a_j/λ.
pub fn dirac_lambda_nu0(lambda: f64, a: &DVector<f64>, delta: f64) -> Result<f64> {
    if delta <= 0.0 {
        return Err(Error::Domain("the nu = 0 Dirac update needs delta > 0".into()));
    }
    let f: f64 = a.iter().map(|a| a / lambda).sum();
    let z = -(delta * delta) * (2.0 * EULER_GAMMA).exp() / (2.0 * f);
    let w = lambert_w(z, WBranch::Lower)
        .ok_or_else(|| Error::DegenerateUpdate(format!("product-log argument {z:.3e} is outside [-1/e, 0)")))?;
    Ok(2.0 / delta * (-EULER_GAMMA + 0.5 * w).exp())
}

/// Dirac-constrained tuner: an M-step for (γ², λ) after each EM or VBEM iteration.
pub fn tune_dirac_em<M: LinearModel>(
    model: &M,
    hp0: &HyperParams,
    path: TunedPath,
    variant: DiracVariant,
    cfg: &TunerConfig,
) -> Result<TuneResult> {
    if !matches!(hp0.kind, PriorKind::LaplaceNu1 | PriorKind::InvGaussNu0) {
        return Err(Error::Invalid("the Dirac tuner supports nu = 1 and nu = 0 only".into()));
    }
    let opts = VblOptions { cov: Some(cfg.cov), skip_objectives: true, ..Default::default() };
    let mut stepper = VblStepper::new(*hp0, PosteriorTriple::initial(model.dim(), cfg.cov), opts)?;
    let mut trace = HyperTrace::default();
    let mut clamped = false;
    let n = model.n_obs();
    for t in 0..cfg.outer_max {
        let info = stepper.step(model).map_err(|e| e.context("Dirac tuner"))?;
        if t < cfg.warmup {
            continue;
        }
        let hp = stepper.hp;
        let (expected_sq, e_beta_sq) = match path {
            TunedPath::Em => (info.misfit_mu * info.misfit_mu, stepper.triple.mu.map(|x| x * x)),
            TunedPath::Vbem => {
                let d = stepper.triple.cov_diag();
                (info.misfit_m * info.misfit_m + info.trace_xcx, stepper.triple.m.zip_map(&d, |x, c| x * x + c))
            }
        };
        let g = gamma_sq_update(n, expected_sq, 0.0)?;
        clamped |= g.clamped;
        let a = e_beta_sq.map(|e| (hp.delta * hp.delta + e).sqrt());
        let lambda = match hp.kind {
            PriorKind::LaplaceNu1 => dirac_lambda_nu1(hp.lambda, &a, hp.delta, variant)?,
            _ => dirac_lambda_nu0(hp.lambda, &a, hp.delta)?,
        };
        let new = HyperParams { gamma_sq: g.gamma_sq, lambda, ..hp };
        trace.rows.push(row(t + 1, &new, outer_objective(n, expected_sq, &e_beta_sq, &new)));
        stepper.hp = new;
        if rel_change(hp.gamma(), new.gamma()) < cfg.tol && rel_change(hp.lambda, new.lambda) < cfg.tol {
            return Ok(TuneResult { hp: new, triple: stepper.triple, trace, converged: true, clamped });
        }
    }
    Ok(TuneResult { hp: stepper.hp, triple: stepper.triple, trace, converged: false, clamped })
}

/// Warning text when EM- and VBEM-tuned hyperparameters differ by more than 2×.
pub fn divergence_warning(em: &HyperParams, vbem: &HyperParams) -> Option<String> {
    let ratio = |a: f64, b: f64| (a / b).max(b / a);
    let (rg, rl) = (ratio(em.gamma(), vbem.gamma()), ratio(em.lambda, vbem.lambda));
    (rg > 2.0 || rl > 2.0).then(|| {
        let msg = format!(
            "EM and VBEM tuned hyperparameters disagree (gamma {:.4} vs {:.4}, lambda {:.4e} vs {:.4e}); the MAP and moment estimates describe different posteriors",
            em.gamma(),
            vbem.gamma(),
            em.lambda,
            vbem.lambda
        );
        log::warn!("{msg}");
        msg
    })
}
