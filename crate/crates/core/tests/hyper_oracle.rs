use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sparsevb::gaussian::DesignBlock;
use sparsevb::gig::PriorKind;
use sparsevb::hyper::*;
use sparsevb::special::{lambert_w, WBranch};
use sparsevb::vbl::{HyperParams, StoppingRule};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// Plain golden-section minimizer kept separate from the library one.
fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

#[test]
fn nu1_lambda_is_the_golden_section_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..50 {
        let p = rng.random_range(1..=30);
        let m = DVector::from_fn(p, |_, _| 2.0 * normal(&mut rng));
        let c = DVector::from_fn(p, |_, _| rng.random_range(0.0..0.5));
        let delta = rng.random_range(0.0..0.3);
        let hp = HyperParams::new(1.0, 1.0, delta, PriorKind::LaplaceNu1).unwrap();
        let got = lambda_update(&m, &c, &hp).unwrap().lambda;
        // E[1/θ_j] = λ/√(δ² + E[β_j²]) for ν = 1.
        let e: Vec<f64> = (0..p).map(|j| m[j] * m[j] + c[j]).collect();
        let obj = |ln_l: f64| {
            let l = ln_l.exp();
            e.iter().map(|e| {
                let inv = l / (delta * delta + e).sqrt();
                e * inv - inv.ln()
            }).sum::<f64>()
        };
        let want = golden(obj, -20.0, 20.0).exp();
        assert!((got - want).abs() < 1e-6 * want, "case {case}: {got} vs {want}");
        // The library objective agrees with the explicit one.
        let lib = lambda_objective(got, &DVector::from_vec(e.clone()), &hp).unwrap();
        assert!((lib - obj(got.ln())).abs() < 1e-9 * (1.0 + lib.abs()));
    }
}

#[test]
fn gamma_sq_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (n, p) = (12, 4);
    let x = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
    let y = DVector::from_fn(n, |_, _| normal(&mut rng));
    let m = DVector::from_fn(p, |_, _| normal(&mut rng));
    let a = DMatrix::from_fn(p, p, |_, _| 0.3 * normal(&mut rng));
    let cov = &a * a.transpose() + DMatrix::identity(p, p) * 0.05;
    let block = DesignBlock::new(x.clone(), y.clone()).unwrap();
    let stats = sparsevb::gaussian::SufficientStats::from_block(&block);
    let got = gamma_sq_update_stats(&stats, &m, &cov).unwrap();

    let l = cov.clone().cholesky().unwrap().l();
    let draws = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let z = DVector::from_fn(p, |_, _| normal(&mut rng));
        let beta = &m + &l * z;
        let v = (&y - &x * beta).norm_squared() / n as f64;
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / draws as f64;
    let se = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
    assert!((got.gamma_sq - mean).abs() < 3.0 * se, "{} vs {mean} ± {se}", got.gamma_sq);

    // Same value through the trace identity.
    let misfit = (&y - &x * &m).norm_squared();
    let tr = (&x * &cov * x.transpose()).trace();
    let alt = gamma_sq_update(n, misfit, tr).unwrap();
    assert!((alt.gamma_sq - got.gamma_sq).abs() < 1e-12 * got.gamma_sq);

    // Stationary point of -n ln γ + S/(2γ²) in γ².
    let s = n as f64 * got.gamma_sq;
    let g2 = got.gamma_sq;
    let deriv = -(n as f64) / (2.0 * g2) + s / (2.0 * g2 * g2);
    assert!(deriv.abs() < 1e-8, "{deriv}");
}

#[test]
fn gamma_sq_least_squares_and_clamp() {
    let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
    let y = DVector::from_vec(vec![1.0, 2.0, 2.5, 0.5]);
    let ls = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
    let block = DesignBlock::new(x.clone(), y.clone()).unwrap();
    let stats = sparsevb::gaussian::SufficientStats::from_block(&block);
    let g = gamma_sq_update_stats(&stats, &ls, &DMatrix::zeros(2, 2)).unwrap();
    let rss = (&y - &x * &ls).norm_squared();
    assert!((g.gamma_sq - rss / 4.0).abs() < 1e-12);

    let exact = &x * DVector::from_vec(vec![0.5, -1.0]);
    let block = DesignBlock::new(x, exact).unwrap();
    let stats = sparsevb::gaussian::SufficientStats::from_block(&block);
    let g = gamma_sq_update_stats(&stats, &DVector::from_vec(vec![0.5, -1.0]), &DMatrix::zeros(2, 2)).unwrap();
    assert!(g.clamped);
    assert_eq!(g.gamma_sq, 1e-12);
}

#[test]
fn product_log_residual() {
    let mut zs = vec![-1e-300, -1e-12, -1e-6, -0.01, -0.2, -0.3, -0.36];
    zs.extend((1..50).map(|k| -(-1.0f64).exp() * k as f64 / 50.0));
    for z in zs {
        for branch in [WBranch::Principal, WBranch::Lower] {
            let w = lambert_w(z, branch).unwrap();
            assert!((w * w.exp() - z).abs() < 1e-12 * (1.0 + z.abs()), "{z} {branch:?}");
            match branch {
                WBranch::Principal => assert!(w >= -1.0),
                WBranch::Lower => assert!(w <= -1.0),
            }
        }
    }
    for z in [0.5, 1.0, 10.0, 1e6] {
        let w = lambert_w(z, WBranch::Principal).unwrap();
        assert!((w * w.exp() - z).abs() < 1e-12 * z);
    }
    assert!(lambert_w(-0.5, WBranch::Principal).is_none());
    assert!(lambert_w(0.1, WBranch::Lower).is_none());
}

#[test]
fn dirac_nu0_out_of_domain_is_degenerate() {
    // A tiny F pushes the product-log argument below -1/e.
    let a = DVector::from_element(3, 1e-12);
    assert!(dirac_lambda_nu0(1.0, &a, 1.0).is_err());
}

#[test]
fn nested_objective_is_non_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for seed in 0..5 {
        let (n, p) = (40, 8);
        let x = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
        let mut beta = DVector::zeros(p);
        beta[0] = 3.0;
        beta[3] = -2.0;
        let y = &x * &beta + DVector::from_fn(n, |_, _| 0.5 * normal(&mut rng));
        let block = DesignBlock::new(x, y).unwrap();
        let hp0 = HyperParams::new(1.0, 1.0, 1e-3, PriorKind::LaplaceNu1).unwrap();
        let mut cfg = TunerConfig::new(200, 1e-8);
        cfg.inner = StoppingRule::iterate_delta(1e-12, 2000);
        cfg.outer_max = 40;
        let out = tune_nested(&block, &hp0, &cfg).unwrap();
        let obj: Vec<f64> = out.trace.rows.iter().map(|r| r.objective).collect();
        for w in obj.windows(2) {
            assert!(w[1] <= w[0] + 1e-8 * (1.0 + w[0].abs()), "seed {seed}: {obj:?}");
        }
        assert!(out.trace.rows.iter().all(|r| r.gamma > 0.0 && r.lambda >= 0.0));
    }
}
