//! Special functions: modified Bessel function of the second kind for real order
//! (log scale and consecutive-order ratios), log-gamma, and the Lambert W function.

use std::f64::consts::PI;

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 100_000;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

// Chebyshev coefficients for Γ₁(μ) and Γ₂(μ) in Temme's series.
const GAM1_COEF: [f64; 7] = [
    -1.142022680371168e0,
    6.5165112670737e-3,
    3.087090173086e-4,
    -3.4706269649e-6,
    6.9437664e-9,
    3.67795e-11,
    -1.356e-13,
];
const GAM2_COEF: [f64; 8] = [
    1.843740587300905e0,
    -7.68528408447867e-2,
    1.2719271366546e-3,
    -4.9717367042e-6,
    -3.31261198e-8,
    2.423096e-10,
    -1.702e-13,
    -1.49e-15,
];

fn chebyshev(coef: &[f64], x: f64) -> f64 {
    let y2 = 2.0 * x;
    let (mut d, mut dd) = (0.0, 0.0);
    for &c in coef[1..].iter().rev() {
        let sv = d;
        d = y2 * d - dd + c;
        dd = sv;
    }
    x * d - dd + 0.5 * coef[0]
}

/// Natural log of the gamma function.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Temme's series for |μ| ≤ 1/2 and x < 2. Returns (K_μ(x), K_{μ+1}(x)).
fn temme(mu: f64, x: f64) -> (f64, f64) {
    let x2 = 0.5 * x;
    let pimu = PI * mu;
    let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
    let d = -x2.ln();
    let e = mu * d;
    let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
    let xx = 8.0 * mu * mu - 1.0;
    let gam1 = chebyshev(&GAM1_COEF, xx);
    let gam2 = chebyshev(&GAM2_COEF, xx);
    let gampl = gam2 - mu * gam1;
    let gammi = gam2 + mu * gam1;
    let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
    let mut sum = ff;
    let e = e.exp();
    let mut p = 0.5 * e / gampl;
    let mut q = 0.5 / (e * gammi);
    let mut c = 1.0;
    let d = x2 * x2;
    let mut sum1 = p;
    for i in 1..MAX_ITER {
        let fi = i as f64;
        ff = (fi * ff + p + q) / (fi * fi - mu * mu);
        c *= d / fi;
        p /= fi - mu;
        q /= fi + mu;
        let del = c * ff;
        sum += del;
        sum1 += c * (p - fi * ff);
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    (sum, sum1 * 2.0 / x)
}

/// Steed's continued fraction for |μ| ≤ 1/2 and x ≥ 2.
/// Returns (ln K_μ(x), K_{μ+1}(x)/K_μ(x)) without forming K itself.
fn steed(mu: f64, x: f64) -> (f64, f64) {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25 - mu * mu;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 1..MAX_ITER {
        let fi = i as f64;
        a -= 2.0 * fi;
        c = -a * c / (fi + 1.0);
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < EPS {
            break;
        }
    }
    h *= a1;
    let ln_k = 0.5 * (PI / (2.0 * x)).ln() - x - s.ln();
    (ln_k, (mu + x + 0.5 - h) / x)
}

/// Leading small-argument behaviour, used only where Temme's sums would overflow.
fn ln_k_tiny(nu: f64, x: f64) -> f64 {
    let nu = nu.abs();
    let l = (0.5 * x).ln();
    if nu == 0.0 {
        (-l - EULER_GAMMA).ln()
    } else if nu < 1.0 {
        // ½[Γ(ν)(x/2)^{-ν} + Γ(−ν)(x/2)^{ν}], both terms kept for ν near zero.
        let t1 = ln_gamma(nu) - nu * l;
        let g2 = libm::tgamma(-nu);
        let v = 1.0 + g2 * (2.0 * nu * l - ln_gamma(nu)).exp();
        t1 + v.ln() - std::f64::consts::LN_2
    } else {
        ln_gamma(nu) - nu * l - std::f64::consts::LN_2
    }
}

/// (ln K_ν(x), K_{ν+1}(x)/K_ν(x)) for ν ≥ 0, x > 0.
fn ln_k_and_ratio(nu: f64, x: f64) -> (f64, f64) {
    debug_assert!(nu >= 0.0 && x > 0.0);
    if x < 1e-150 {
        let a = ln_k_tiny(nu, x);
        let b = ln_k_tiny(nu + 1.0, x);
        return (a, (b - a).exp());
    }
    let nl = (nu + 0.5).floor();
    let mu = nu - nl;
    let (mut ln_k, mut r) = if x < 2.0 {
        let (k, k1) = temme(mu, x);
        (k.ln(), k1 / k)
    } else {
        steed(mu, x)
    };
    let nl = nl as usize;
    for i in 1..=nl {
        ln_k += r.ln();
        r = 1.0 / r + 2.0 * (mu + i as f64) / x;
    }
    (ln_k, r)
}

/// Natural log of the modified Bessel function of the second kind K_ν(x), x > 0.
pub fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "ln_bessel_k requires x > 0, got {x}");
    ln_k_and_ratio(nu.abs(), x).0
}

/// K_{ν+1}(x) / K_ν(x) for real ν and x > 0, evaluated without forming either factor.
pub fn bessel_k_ratio(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k_ratio requires x > 0, got {x}");
    if nu >= 0.0 {
        ln_k_and_ratio(nu, x).1
    } else if nu <= -1.0 {
        // K_{ν+1}/K_ν = K_{|ν|-1}/K_{|ν|} = 1 / (K_{|ν|}/K_{|ν|-1}).
        1.0 / ln_k_and_ratio(-nu - 1.0, x).1
    } else {
        (ln_k_and_ratio(nu + 1.0, x).0 - ln_k_and_ratio(-nu, x).0).exp()
    }
}

/// Branch of the Lambert W function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WBranch {
    /// W₀, defined for z ≥ −1/e, W ≥ −1.
    Principal,
    /// W₋₁, defined for −1/e ≤ z < 0, W ≤ −1.
    Lower,
}

/// Solution w of w·eʷ = z on the requested branch, by Newton iteration.
/// Returns `None` when z lies outside the branch domain.
pub fn lambert_w(z: f64, branch: WBranch) -> Option<f64> {
    let branch_point = -(-1.0f64).exp();
    if !z.is_finite() || z < branch_point - 1e-15 {
        return None;
    }
    if branch == WBranch::Lower && z >= 0.0 {
        return None;
    }
    let z = z.max(branch_point);
    if z == 0.0 {
        return Some(0.0);
    }
    let pb = (2.0 * (std::f64::consts::E * z + 1.0)).max(0.0).sqrt();
    let mut w = match branch {
        WBranch::Principal => {
            if z < -0.25 {
                -1.0 + pb - pb * pb / 3.0 + 11.0 / 72.0 * pb.powi(3)
            } else if z < 3.0 {
                let l = (1.0 + z).ln();
                l * (1.0 - (1.0 + l).ln() / (2.0 + l))
            } else {
                let l = z.ln();
                l - l.ln()
            }
        }
        WBranch::Lower => {
            if z < -0.25 {
                -1.0 - pb - pb * pb / 3.0 - 11.0 / 72.0 * pb.powi(3)
            } else {
                let l = (-z).ln();
                l - (-l).ln()
            }
        }
    };
    if pb == 0.0 {
        return Some(-1.0);
    }
    for _ in 0..200 {
        let ew = w.exp();
        let f = w * ew - z;
        let fp = ew * (w + 1.0);
        if fp == 0.0 {
            break;
        }
        let step = f / fp;
        let mut next = w - step;
        // Stay on the requested side of the branch point.
        match branch {
            WBranch::Principal if next < -1.0 => next = 0.5 * (w - 1.0),
            WBranch::Lower if next > -1.0 => next = 0.5 * (w - 1.0),
            _ => {}
        }
        let done = (next - w).abs() <= 1e-15 * w.abs().max(1.0);
        w = next;
        if done {
            break;
        }
    }
    Some(w)
}
