use gacsim::gradvec::GradientVector;
use gacsim::theory::{
    check_bias_reduction, check_convergence_bound, run_bias_study, run_quadratic_testbed, BiasModel, BiasStudy,
    ConvergenceLedger, QuadraticTestbed,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn testbed(staleness: usize, noise_sigma: f64, seed: u64) -> QuadraticTestbed {
    QuadraticTestbed {
        dim: 20,
        staleness,
        noise_sigma,
        eta: 0.2,
        steps: 150,
        seed,
    }
}

fn averaged(staleness: usize, noise_sigma: f64) -> ConvergenceLedger {
    let ledgers: Vec<_> = (0..20)
        .map(|seed| run_quadratic_testbed(&testbed(staleness, noise_sigma, seed)).unwrap())
        .collect();
    ConvergenceLedger::seed_average(&ledgers).unwrap()
}

#[test]
fn bias_is_the_sum_of_skipped_steps() {
    for s in [1, 4, 8] {
        let ledger = run_quadratic_testbed(&testbed(s, 0.1, 3)).unwrap();
        for (t, bias) in ledger.biases.iter().enumerate() {
            let lag = ledger.steps[t].lag;
            let mut want = GradientVector::zeros(20);
            for k in 1..=lag {
                want = want.add_scaled(ledger.eta, &ledger.estimates[t - k]).unwrap();
            }
            let err = bias.sub(&want).unwrap().norm();
            assert!(err <= 1e-12 * want.norm().max(1.0), "s={s} t={t}: {err}");
            assert_eq!(bias.norm_sq(), ledger.steps[t].bias_norm_sq);
        }
    }
}

#[test]
fn persistence_is_exactly_one() {
    let ledger = run_quadratic_testbed(&testbed(8, 0.1, 0)).unwrap();
    for s in ledger.steps.iter().filter(|s| s.lag >= 1) {
        assert_eq!(s.prev_quadratic_form, s.prev_grad_norm_sq);
    }
}

#[test]
fn bound_holds_and_bias_grows_with_staleness() {
    for sigma in [0.0, 0.1] {
        let mut last_bias = -1.0;
        for s in [0, 4, 8, 16] {
            let check = check_convergence_bound(&averaged(s, sigma)).unwrap();
            assert!(check.holds, "s={s} sigma={sigma}: {check:?}");
            assert!(check.holds_persistence, "s={s} sigma={sigma}: {check:?}");
            assert!(check.mean_bias_norm_sq >= last_bias);
            last_bias = check.mean_bias_norm_sq;
            if s == 0 {
                assert_eq!(check.err_term, 0.0);
                assert_eq!(check.alignment_term, 0.0);
            }
        }
    }
}

#[test]
fn staleness_creates_alignment() {
    let sync = averaged(0, 0.1).mean_cosine_after(50);
    assert!((sync + 0.1).abs() < 0.03, "sync mean cosine {sync}");
    for s in [4, 8, 16] {
        let stale = averaged(s, 0.1).mean_cosine_after(50);
        assert!(stale > sync, "s={s}: {stale} <= {sync}");
    }
}

#[test]
fn single_seed_checks_are_reported_not_required() {
    let ledger = run_quadratic_testbed(&testbed(8, 0.1, 1)).unwrap();
    let check = check_convergence_bound(&ledger).unwrap();
    assert!(check.lhs.is_finite() && check.rhs.is_finite());
}

#[test]
fn incomplete_ledger_rejected() {
    let mut ledger = run_quadratic_testbed(&testbed(2, 0.0, 0)).unwrap();
    ledger.steps.remove(5);
    assert!(check_convergence_bound(&ledger).is_err());
    ledger.steps.clear();
    assert!(check_convergence_bound(&ledger).is_err());
}

#[test]
fn study_identity_chain() {
    let trials = run_bias_study(&BiasStudy {
        trials: 2_000,
        seed: 7,
        ..BiasStudy::default()
    })
    .unwrap();
    for t in &trials {
        assert!(t.check.holds);
        assert!(t.check.pythagoras_residual <= 1e-10);
        assert!(t.check.removed >= t.check.removed_lower_bound - 1e-10);
    }
}

proptest! {
    #[test]
    fn bias_reduction_holds_for_random_draws(
        seed in any::<u64>(),
        dim in 2usize..30,
        lambda in 0.05f64..2.0,
        eta in 0.01f64..1.0,
        frac in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = BiasModel::random_psd(dim, lambda, 1.5, eta, 0.2, &mut rng);
        let g = GradientVector::new((0..dim).map(|i| ((i as f64) * 0.7 + seed as f64 % 5.0).sin()).collect()).unwrap();
        let r = GradientVector::new((0..dim).map(|i| ((i * 3) as f64).cos()).collect()).unwrap();
        let r = r.scaled(frac * 0.2 / r.norm()).unwrap();
        let check = check_bias_reduction(&model, &g, &r).unwrap();
        prop_assert!(check.holds, "{:?}", check);
        prop_assert!(check.pythagoras_residual <= 1e-10);
    }
}
