//! Adaptive Gauss–Kronrod quadrature used as an independent oracle.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// ∫_a^b f by globally adaptive bisection until the summed error estimate is
/// below `rel_tol` times the magnitude of the integral.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    let f: &dyn Fn(f64) -> f64 = &f;
    let (k, e) = gk15(f, a, b);
    let mut parts = vec![(a, b, k, e)];
    for _ in 0..5000 {
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let err: f64 = parts.iter().map(|p| p.3).sum();
        if err <= rel_tol * total.abs() {
            break;
        }
        let (worst, _) = parts
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap())
            .unwrap();
        let (lo, hi, _, _) = parts.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (k1, e1) = gk15(f, lo, mid);
        let (k2, e2) = gk15(f, mid, hi);
        parts.push((lo, mid, k1, e1));
        parts.push((mid, hi, k2, e2));
    }
    parts.iter().map(|p| p.2).sum()
}

/// ln ∫₀^∞ θ^{s−1} exp(−½(a²/θ + λ²θ)) dθ, computed on u = ln θ.
pub fn ln_gig_integral(s: f64, a: f64, lambda: f64) -> f64 {
    let a2 = a * a;
    let l2 = lambda * lambda;
    let h = |u: f64| s * u - 0.5 * (a2 * (-u).exp() + l2 * u.exp());
    let dh = |u: f64| s + 0.5 * a2 * (-u).exp() - 0.5 * l2 * u.exp();
    // h is concave in u: bisect for the mode.
    let (mut lo, mut hi) = (-700.0f64, 700.0f64);
    assert!(dh(lo) > 0.0 && dh(hi) < 0.0, "integrand has no interior mode");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dh(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mode = 0.5 * (lo + hi);
    let hmax = h(mode);
    let drop = 60.0;
    let mut step = 1.0;
    let mut right = mode + step;
    while h(right) > hmax - drop {
        step *= 2.0;
        right = mode + step;
    }
    step = 1.0;
    let mut left = mode - step;
    while h(left) > hmax - drop {
        step *= 2.0;
        left = mode - step;
    }
    // Split at the mode so the peak is resolved on both sides.
    let g = |u: f64| (h(u) - hmax).exp();
    let total = integrate(g, left, mode, 1e-13) + integrate(g, mode, right, 1e-13);
    hmax + total.ln()
}

/// E[θ^r] under GIG(p, a, λ) by quadrature.
pub fn gig_moment(p: f64, a: f64, lambda: f64, r: f64) -> f64 {
    (ln_gig_integral(p + r, a, lambda) - ln_gig_integral(p, a, lambda)).exp()
}
