mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sparsevb::gaussian::{DesignBlock, Form};
use sparsevb::gig::PriorKind;
use sparsevb::model::{primal_solve, CovNeed, LinearModel, WithForm};
use sparsevb::vbl::*;

fn random_problem(seed: u64, p: usize, n: usize) -> DesignBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut beta = DVector::zeros(p);
    for j in 0..p.min(3) {
        beta[j] = 2.0 * (j as f64 + 1.0) * if j % 2 == 0 { 1.0 } else { -1.0 };
    }
    let noise = DVector::from_fn(n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let y = &x * &beta + noise;
    DesignBlock::new(x, y).unwrap()
}

/// Largest drop between successive values, scaled by 1 + |value|.
fn worst_decrease(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| (w[0] - w[1]) / (1.0 + w[0].abs()))
        .fold(f64::NEG_INFINITY, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objectives_are_monotone(
        seed in 0u64..10_000,
        p in 1usize..=30,
        n in 1usize..=30,
        lambda in 0.05f64..5.0,
        gamma in 0.1f64..2.0,
        kind_ix in 0usize..3,
    ) {
        let kind = [PriorKind::LaplaceNu1, PriorKind::InvGaussNu0, PriorKind::GeneralNu(1.7)][kind_ix];
        let block = random_problem(seed, p, n);
        let hp = HyperParams::new(gamma * gamma, lambda, 1e-3, kind).unwrap();
        let stop = StoppingRule::iterate_delta(1e-300, 40);
        let (_, trace) = vbl_iterate(&block, &hp, PosteriorTriple::initial(p, CovNeed::Full), &stop).unwrap();
        let elbo: Vec<f64> = trace.steps.iter().map(|s| s.elbo).collect();
        let lj: Vec<f64> = trace.steps.iter().map(|s| s.em_logjoint).collect();
        prop_assert!(worst_decrease(&elbo) <= 1e-10, "elbo {:?}", elbo);
        prop_assert!(worst_decrease(&lj) <= 1e-10, "log-joint {:?}", lj);
    }
}

#[test]
fn gain_form_equals_primal_form() {
    for seed in 0..20 {
        let block = random_problem(seed, 7, 12);
        let hp = HyperParams::new(0.5, 1.3, 1e-3, PriorKind::LaplaceNu1).unwrap();
        let stop = StoppingRule::iterate_delta(1e-300, 5);
        let run = |form| {
            let model = WithForm { block: &block, form };
            vbl_run(&model, &model, &hp, PosteriorTriple::initial(7, CovNeed::Full), &stop, VblOptions::default(), |_, _| {})
                .unwrap()
                .0
        };
        let a = run(Form::Dual);
        let b = run(Form::Primal);
        let rel = |x: &DVector<f64>, y: &DVector<f64>| (x - y).norm() / y.norm();
        assert!(rel(&a.m, &b.m) < 1e-9);
        assert!(rel(&a.mu, &b.mu) < 1e-9);
        let (ca, cb) = (a.cov.full().unwrap(), b.cov.full().unwrap());
        assert!((ca - cb).norm() / cb.norm() < 1e-9);
    }
}

#[test]
fn point_mass_vbem_is_em() {
    let block = random_problem(3, 8, 15);
    let hp = HyperParams::new(0.2, 0.7, 1e-3, PriorKind::LaplaceNu1).unwrap();
    let stop = StoppingRule::iterate_delta(1e-300, 30);
    let opts = VblOptions { point_mass: true, ..Default::default() };
    let (t, _) = vbl_run(&block, &block, &hp, PosteriorTriple::initial(8, CovNeed::Full), &stop, opts, |_, _| {}).unwrap();
    assert_eq!(t.m, t.mu);
}

#[test]
fn em_fixed_point_is_stationary_for_smoothed_l1() {
    // Stationarity of |Y − Xμ|²/(2γ²) + λ Σ √(μ_j² + δ²).
    let block = random_problem(11, 6, 25);
    let hp = HyperParams::new(0.09, 2.0, 1e-3, PriorKind::LaplaceNu1).unwrap();
    let stop = StoppingRule::iterate_delta(1e-14, 20_000);
    let (t, trace) = vbl_iterate(&block, &hp, PosteriorTriple::initial(6, CovNeed::Full), &stop).unwrap();
    assert!(trace.converged);
    let mu = &t.mu;
    let grad = -block.x().tr_mul(&(block.y() - block.x() * mu)) / hp.gamma_sq
        + mu.map(|v| hp.lambda * v / (v * v + hp.delta * hp.delta).sqrt());
    assert!(grad.norm() < 1e-6, "gradient {}", grad.norm());
}

#[test]
fn small_lambda_gives_ridge() {
    // With λ tiny the EM precisions at μ are λ/√(μ_j²+δ²); the fixed point is the
    // ridge solution with exactly those precisions.
    let block = random_problem(5, 4, 10);
    let hp = HyperParams::new(0.1, 1e-6, 0.5, PriorKind::LaplaceNu1).unwrap();
    let stop = StoppingRule::iterate_delta(1e-13, 1000);
    let (t, _) = vbl_iterate(&block, &hp, PosteriorTriple::initial(4, CovNeed::Full), &stop).unwrap();
    let prec = t.mu.map(|v| hp.lambda / (v * v + hp.delta * hp.delta).sqrt());
    let ridge = primal_solve(block.gram(), &block.x().tr_mul(block.y()), &prec, hp.gamma_sq, CovNeed::MeanOnly).unwrap();
    assert!((&ridge.mean - &t.mu).norm() < 1e-9 * ridge.mean.norm());
    let ols = block.gram().clone().cholesky().unwrap().solve(&block.x().tr_mul(block.y()));
    assert!((&t.mu - ols).norm() < 1e-5);
}

#[test]
fn fixed_point_probe_on_elbo() {
    let block = random_problem(2, 5, 9);
    let hp = HyperParams::new(0.3, 1.0, 1e-3, PriorKind::LaplaceNu1).unwrap();
    let stop = StoppingRule::iterate_delta(1e-14, 20_000);
    let (t, _) = vbl_iterate(&block, &hp, PosteriorTriple::initial(5, CovNeed::Full), &stop).unwrap();
    let c = t.cov.full().unwrap();
    let q = t.m.zip_map(&c.diagonal(), |m, c| m * m + c);
    let base = elbo(&block, &hp, &t.m, c, &q).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let eps = DVector::from_fn(5, |_, _| 1e-3 * rng.sample::<f64, _>(StandardNormal));
        let q_new = (&t.m + &eps).zip_map(&c.diagonal(), |m, c| m * m + c);
        let e = elbo(&block, &hp, &(&t.m + &eps), c, &q_new).unwrap();
        assert!(e <= base + 1e-8, "{e} > {base}");
    }
}

#[test]
fn trace_csv_columns() {
    let block = random_problem(1, 3, 6);
    let hp = HyperParams::laplace(0.5, 1.0).unwrap();
    let (_, trace) = vbl_iterate(&block, &hp, PosteriorTriple::initial(3, CovNeed::Full), &StoppingRule::iterate_delta(1e-9, 4)).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("iter,misfit,elbo,em_logjoint,delta_m,delta_mu\n"));
    assert_eq!(text.lines().count(), 1 + trace.steps.len());
    let _ = block.n_obs();
}
