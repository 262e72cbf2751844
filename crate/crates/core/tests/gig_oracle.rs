mod common;

use common::quad::gig_moment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use sparsevb::gig::{cond_inv_theta, cond_theta, GigParams, PriorKind};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn check(kind: PriorKind, delta: f64, lambda: f64, beta_sq: f64, want_theta: bool) {
    let params = GigParams::new(kind, delta, lambda).unwrap();
    let nu = params.nu();
    let a = (delta * delta + beta_sq).sqrt();
    let lam = if kind.is_improper() { 0.0 } else { lambda };
    let inv = cond_inv_theta(&params, beta_sq).unwrap();
    let inv_q = gig_moment(nu - 0.5, a, lam, -1.0);
    assert!(rel(inv, inv_q) < 1e-6, "{kind:?} d={delta} l={lambda} b2={beta_sq}: {inv} vs {inv_q}");
    if want_theta {
        let th = cond_theta(&params, beta_sq).unwrap();
        let th_q = gig_moment(nu - 0.5, a, lam, 1.0);
        assert!(rel(th, th_q) < 1e-6, "{kind:?} d={delta} l={lambda} b2={beta_sq}: {th} vs {th_q}");
        assert!(th * inv >= 1.0 - 1e-12);
    }
}

#[test]
fn spec_general_nu_points() {
    check(PriorKind::GeneralNu(0.3), 0.5, 1.2, 0.7, true);
    check(PriorKind::LaplaceNu1, 0.1, 3.0, 2.0, true);
}

#[test]
fn laplace_and_inverse_gaussian_grid() {
    for &delta in &[0.0, 1e-3, 0.5, 2.0] {
        for &lambda in &[0.01, 1.0, 5.0] {
            for &b2 in &[0.0, 0.3, 4.0] {
                if delta == 0.0 && b2 == 0.0 {
                    continue;
                }
                check(PriorKind::LaplaceNu1, delta, lambda, b2, true);
                check(PriorKind::InvGaussNu0, delta, lambda, b2, true);
            }
        }
    }
    // ν = 0 with λ = 0 is an inverse gamma conditional.
    check(PriorKind::InvGaussNu0, 1.0, 0.0, 0.0, false);
}

#[test]
fn general_nu_grid() {
    for &nu in &[-2.3, -0.7, 0.3, 1.7, 3.5] {
        for &delta in &[0.2, 1.5] {
            for &lambda in &[0.05, 2.0] {
                for &b2 in &[0.0, 1.0, 9.0] {
                    check(PriorKind::GeneralNu(nu), delta, lambda, b2, true);
                }
            }
        }
    }
}

#[test]
fn improper_grid() {
    for &nu in &[-2.0, -0.8, 0.2] {
        for &b2 in &[0.1, 2.0] {
            check(PriorKind::PowerImproper(nu), 0.0, 0.0, b2, nu < -0.5);
        }
    }
    check(PriorKind::JeffreysImproper, 0.0, 0.0, 0.5, false);
}

#[test]
fn inv_theta_monotone_in_beta_sq() {
    for kind in [PriorKind::LaplaceNu1, PriorKind::InvGaussNu0] {
        for &(delta, lambda) in &[(0.0, 1.0), (1e-3, 0.2), (1.0, 4.0)] {
            let params = GigParams::new(kind, delta, lambda).unwrap();
            let mut prev = f64::INFINITY;
            for i in 1..200 {
                let v = cond_inv_theta(&params, 0.01 * i as f64).unwrap();
                assert!(v <= prev);
                prev = v;
            }
        }
    }
}

#[test]
fn laplace_scale_mixture_ks() {
    let lambda = 1.3f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mix = Exp::new(0.5 * lambda * lambda).unwrap();
    let n = 100_000;
    let mut xs: Vec<f64> = (0..n)
        .map(|_| {
            let theta: f64 = mix.sample(&mut rng);
            Normal::new(0.0, theta.sqrt()).unwrap().sample(&mut rng)
        })
        .collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cdf = |x: f64| if x < 0.0 { 0.5 * (lambda * x).exp() } else { 1.0 - 0.5 * (-lambda * x).exp() };
    let mut ks = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        ks = ks.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
    }
    assert!(ks < 0.02, "KS statistic {ks}");
    let _: f64 = rng.random();
}
