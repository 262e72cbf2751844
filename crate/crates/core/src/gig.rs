//! Moments of the generalized inverse Gaussian (GIG) mixing law.
//!
//! A coefficient β has prior N(0, θ) with θ ~ GIG(ν, δ, λ), density proportional to
//! θ^{ν−1} exp(−½(δ²/θ + λ²θ)). Given β, θ is again GIG with shape ν − ½ and
//! first parameter √(δ² + β²); the moments below feed every θ-update.

use serde::{Deserialize, Serialize};

use crate::special::{bessel_k_ratio, ln_bessel_k, ln_gamma};
use crate::{Error, Result};

/// Which mixing law is in force. Improper laws must be selected explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PriorKind {
    /// ν = 1: Laplace marginal when δ = 0.
    LaplaceNu1,
    /// ν = 0: inverse Gaussian mixing (inverse gamma when λ = 0).
    InvGaussNu0,
    /// Arbitrary real shape, moments through Bessel ratios.
    GeneralNu(f64),
    /// Improper θ⁻¹ law (ν = 0, λ = 0).
    JeffreysImproper,
    /// Improper power law θ^{ν−1} with ν < ½ (λ = 0).
    PowerImproper(f64),
    /// θ held at a fixed value: a Gaussian prior with that variance.
    FixedScale(f64),
}

impl PriorKind {
    /// Shape parameter ν; `None` for a fixed scale.
    pub fn nu(&self) -> Option<f64> {
        match *self {
            PriorKind::LaplaceNu1 => Some(1.0),
            PriorKind::InvGaussNu0 | PriorKind::JeffreysImproper => Some(0.0),
            PriorKind::GeneralNu(nu) | PriorKind::PowerImproper(nu) => Some(nu),
            PriorKind::FixedScale(_) => None,
        }
    }

    pub fn is_improper(&self) -> bool {
        matches!(self, PriorKind::JeffreysImproper | PriorKind::PowerImproper(_))
    }
}

/// Prior parameters (ν via the kind, δ, λ). For improper kinds λ is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GigParams {
    pub kind: PriorKind,
    pub delta: f64,
    pub lambda: f64,
}

/// E[θ | β] and E[1/θ | β].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalMoments {
    pub e_theta: f64,
    pub e_inv_theta: f64,
}

impl GigParams {
    pub fn new(kind: PriorKind, delta: f64, lambda: f64) -> Result<Self> {
        let params = GigParams { kind, delta, lambda };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let (delta, lambda) = (self.delta, self.lambda);
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::Domain(format!("delta must be finite and nonnegative, got {delta}")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        match self.kind {
            PriorKind::JeffreysImproper => Ok(()),
            PriorKind::PowerImproper(nu) => {
                if nu.is_finite() && nu < 0.5 {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("power-improper prior needs nu < 1/2, got {nu}")))
                }
            }
            PriorKind::FixedScale(v) => {
                if v.is_finite() && v > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Domain(format!("fixed scale must be positive, got {v}")))
                }
            }
            PriorKind::LaplaceNu1 | PriorKind::InvGaussNu0 | PriorKind::GeneralNu(_) => {
                let nu = self.nu();
                if !nu.is_finite() {
                    return Err(Error::Domain(format!("nu must be finite, got {nu}")));
                }
                if delta == 0.0 && lambda == 0.0 {
                    return Err(Error::Domain(
                        "delta and lambda both zero requires an explicitly improper prior kind".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Shape ν (0 for the Jeffreys law, NaN for a fixed scale).
    pub fn nu(&self) -> f64 {
        self.kind.nu().unwrap_or(f64::NAN)
    }
}

/// K_{ν+½}(z)/K_{ν−½}(z) for ν = 1 (`order_index` 1) and ν = 0 (`order_index` 0).
pub fn bessel_ratio_half(order_index: u8, z: f64) -> Result<f64> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Domain(format!("Bessel ratio argument must be positive, got {z}")));
    }
    match order_index {
        1 => Ok((z + 1.0) / z),
        0 => Ok(1.0),
        other => Err(Error::Domain(format!("order index must be 0 or 1, got {other}"))),
    }
}

/// Moments of GIG(p, a, λ), density proportional to θ^{p−1} exp(−½(a²/θ + λ²θ)).
pub fn gig_moments(p: f64, a: f64, lambda: f64) -> Result<ConditionalMoments> {
    if a > 0.0 && lambda > 0.0 {
        let z = a * lambda;
        // E[θ] = (a/λ) K_{p+1}/K_p and E[1/θ] = (λ/a) K_{p−1}/K_p, both from scaled ratios.
        let e_theta = a / lambda * bessel_k_ratio(p, z);
        let e_inv_theta = lambda / a / bessel_k_ratio(p - 1.0, z);
        Ok(ConditionalMoments { e_theta, e_inv_theta })
    } else if a > 0.0 {
        // Inverse gamma with shape −p and scale a²/2.
        if p >= 0.0 {
            return Err(Error::Domain(format!("lambda = 0 needs shape p < 0, got {p}")));
        }
        let e_inv_theta = -2.0 * p / (a * a);
        let e_theta = if p < -1.0 { a * a / (2.0 * (-p - 1.0)) } else { f64::INFINITY };
        Ok(ConditionalMoments { e_theta, e_inv_theta })
    } else if lambda > 0.0 {
        // Gamma with shape p and rate λ²/2.
        if p <= 0.0 {
            return Err(Error::Domain(format!("a = 0 needs shape p > 0, got {p}")));
        }
        let e_theta = 2.0 * p / (lambda * lambda);
        let e_inv_theta = if p > 1.0 { lambda * lambda / (2.0 * (p - 1.0)) } else { f64::INFINITY };
        Ok(ConditionalMoments { e_theta, e_inv_theta })
    } else {
        Err(Error::Domain("GIG law with a = 0 and lambda = 0 is improper".into()))
    }
}

/// ln ∫₀^∞ θ^{p−1} exp(−½(a²/θ + λ²θ)) dθ.
pub fn ln_gig_normalizer(p: f64, a: f64, lambda: f64) -> Result<f64> {
    if a > 0.0 && lambda > 0.0 {
        Ok(std::f64::consts::LN_2 + p * (a / lambda).ln() + ln_bessel_k(p, a * lambda))
    } else if a > 0.0 && p < 0.0 {
        Ok(ln_gamma(-p) + p * (0.5 * a * a).ln())
    } else if lambda > 0.0 && p > 0.0 {
        Ok(ln_gamma(p) + p * (2.0 / (lambda * lambda)).ln())
    } else {
        Err(Error::Domain(format!("GIG normalizer diverges for p={p}, a={a}, lambda={lambda}")))
    }
}

fn augmented(params: &GigParams, beta_sq: f64) -> Result<f64> {
    if !(beta_sq >= 0.0 && beta_sq.is_finite()) {
        return Err(Error::Domain(format!("beta_sq must be finite and nonnegative, got {beta_sq}")));
    }
    Ok(params.delta * params.delta + beta_sq)
}

fn laplace_lambda(params: &GigParams) -> Result<f64> {
    if params.lambda > 0.0 {
        Ok(params.lambda)
    } else {
        Err(Error::Domain("lambda must be positive for this prior kind".into()))
    }
}

/// E[1/θ | β], with β² supplied already squared (and augmented by C_jj on the VBEM path).
pub fn cond_inv_theta(params: &GigParams, beta_sq: f64) -> Result<f64> {
    let a2 = augmented(params, beta_sq)?;
    match params.kind {
        PriorKind::LaplaceNu1 => {
            let lambda = laplace_lambda(params)?;
            if a2 == 0.0 {
                return Err(Error::SingularMoment("nu = 1 with delta = 0 and beta = 0".into()));
            }
            Ok(lambda / a2.sqrt())
        }
        PriorKind::InvGaussNu0 => {
            if a2 == 0.0 {
                return Err(Error::SingularMoment("nu = 0 with delta = 0 and beta = 0".into()));
            }
            Ok(params.lambda / a2.sqrt() + 1.0 / a2)
        }
        PriorKind::GeneralNu(nu) => {
            let m = gig_moments(nu - 0.5, a2.sqrt(), params.lambda)?;
            finite_positive(m.e_inv_theta, "E[1/theta]")
        }
        PriorKind::JeffreysImproper | PriorKind::PowerImproper(_) => {
            if a2 == 0.0 {
                return Err(Error::SingularMoment("improper prior evaluated at beta = 0".into()));
            }
            Ok((1.0 - 2.0 * params.nu()) / a2)
        }
        PriorKind::FixedScale(v) => Ok(1.0 / v),
    }
}

/// E[θ | β].
pub fn cond_theta(params: &GigParams, beta_sq: f64) -> Result<f64> {
    let a2 = augmented(params, beta_sq)?;
    match params.kind {
        PriorKind::LaplaceNu1 => {
            let lambda = laplace_lambda(params)?;
            Ok((lambda * a2.sqrt() + 1.0) / (lambda * lambda))
        }
        PriorKind::InvGaussNu0 => {
            let lambda = laplace_lambda(params)?;
            finite_positive(a2.sqrt() / lambda, "E[theta]")
        }
        PriorKind::GeneralNu(nu) => {
            let m = gig_moments(nu - 0.5, a2.sqrt(), params.lambda)?;
            finite_positive(m.e_theta, "E[theta]")
        }
        PriorKind::JeffreysImproper | PriorKind::PowerImproper(_) => {
            let nu = params.nu();
            if nu >= -0.5 {
                return Err(Error::Domain(format!("E[theta] under the improper prior needs nu < -1/2, got {nu}")));
            }
            finite_positive(-a2 / (2.0 * nu + 1.0), "E[theta]")
        }
        PriorKind::FixedScale(v) => Ok(v),
    }
}

pub fn cond_moments(params: &GigParams, beta_sq: f64) -> Result<ConditionalMoments> {
    Ok(ConditionalMoments {
        e_theta: cond_theta(params, beta_sq)?,
        e_inv_theta: cond_inv_theta(params, beta_sq)?,
    })
}

fn finite_positive(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::SingularMoment(format!("{what} is {v}")))
    }
}

/// ln p(β) for the scale-mixture marginal, dropping the (infinite) normalizer of improper kinds.
pub fn ln_marginal_prior(params: &GigParams, beta: f64) -> Result<f64> {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let a = (params.delta * params.delta + beta * beta).sqrt();
    match params.kind {
        PriorKind::FixedScale(v) => Ok(-half_ln_2pi - 0.5 * v.ln() - 0.5 * beta * beta / v),
        PriorKind::JeffreysImproper | PriorKind::PowerImproper(_) => {
            Ok(-half_ln_2pi + ln_gig_normalizer(params.nu() - 0.5, a, 0.0)?)
        }
        _ => {
            let nu = params.nu();
            // A divergent prior normalizer (δ = 0 with ν ≤ 0) is a constant and is dropped.
            let ln_z_prior = ln_gig_normalizer(nu, params.delta, params.lambda).unwrap_or(0.0);
            Ok(-half_ln_2pi + ln_gig_normalizer(nu - 0.5, a, params.lambda)? - ln_z_prior)
        }
    }
}
