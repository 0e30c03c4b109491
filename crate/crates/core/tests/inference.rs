mod common;

use common::random_dataset;
use frailfit::inference::{bootstrap_from_fit, profile_gamma_derivative, replicate_weights, score_statistic};
use frailfit::{
    bootstrap, fit, fit_cox, generate, kaplan_meier, marginal_survival, predict_survival, simultaneous_band,
    wald_table, CovariatePath, Dataset, FitOptions, FrailtyFamily, SolverOptions, TruthSpec, WeightKind, Weights,
};
use proptest::prelude::*;

fn quick() -> FitOptions {
    FitOptions {
        mh_steps: 200,
        ..FitOptions::default()
    }
}

fn sample() -> Dataset {
    generate(&TruthSpec::gamma_reference(1.0, vec![1.0, -0.5]), 200, 21).unwrap()
}

#[test]
fn unit_weights_reproduce_the_base_fit() {
    let data = sample();
    let run = bootstrap(&data, &FrailtyFamily::gamma(), &quick(), 5, WeightKind::Unit, 1).unwrap();
    for f in run.successful() {
        assert!((f.loglik - run.base_fit.loglik).abs() < 1e-9);
        for (a, b) in f.theta_hat.to_vec().iter().zip(run.base_fit.theta_hat.to_vec()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

#[test]
fn bootstrap_is_deterministic_and_order_free() {
    let data = sample();
    let fam = FrailtyFamily::gamma();
    let a = bootstrap(&data, &fam, &quick(), 100, WeightKind::Dirichlet, 7).unwrap();
    let b = bootstrap(&data, &fam, &quick(), 100, WeightKind::Dirichlet, 7).unwrap();
    assert_eq!(a, b);
    let mut c = a.clone();
    c.replicates.reverse();
    c.hazard_on_grid.reverse();
    let ta = wald_table(&a).unwrap();
    let tc = wald_table(&c).unwrap();
    for (x, y) in ta.iter().zip(&tc) {
        assert!((x.se - y.se).abs() < 1e-12);
    }
    let z = CovariatePath::fixed(vec![0.5, 0.5]);
    let grid: Vec<f64> = (0..20).map(|k| k as f64 * 0.3).collect();
    let ba = simultaneous_band(&a, &fam, &z, &grid, 0.95).unwrap();
    let bc = simultaneous_band(&c, &fam, &z, &grid, 0.95).unwrap();
    // equal up to summation order
    assert_eq!(ba.grid, bc.grid);
    assert_eq!(ba.replicates_used, bc.replicates_used);
    assert!((ba.critical_value - bc.critical_value).abs() < 1e-9);
    for (u, v) in [(&ba.lower, &bc.lower), (&ba.center, &bc.center), (&ba.upper, &bc.upper)] {
        for (x, y) in u.iter().zip(v.iter()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
    for k in 0..grid.len() {
        assert!(ba.lower[k] <= ba.center[k] && ba.center[k] <= ba.upper[k]);
        assert!(ba.lower[k] >= 0.0 && ba.upper[k] <= 1.0);
    }
    assert_eq!(ba.center[0], 1.0);
    let back = frailfit::BootstrapRun::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn wald_rows_and_model_labels() {
    let data = sample();
    let cox = fit_cox(&data, &quick(), &Weights::uniform(data.n())).unwrap();
    let run = bootstrap_from_fit(&data, &FrailtyFamily::gamma(), &quick(), cox, 40, WeightKind::Multinomial, 3, None).unwrap();
    let rows = wald_table(&run).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.model == "PH" && r.parameter == "beta"));
    for r in &rows {
        assert_eq!(r.z, r.estimate / r.se);
    }
    let few = bootstrap(&data, &FrailtyFamily::gamma(), &quick(), 10, WeightKind::Dirichlet, 3).unwrap();
    assert!(wald_table(&few).is_err());
}

#[test]
fn weights_are_standardised() {
    for kind in [WeightKind::Dirichlet, WeightKind::Multinomial] {
        for seed in 0..20 {
            let w = replicate_weights(250, kind, seed).unwrap();
            let mean = w.as_slice().iter().sum::<f64>() / 250.0;
            assert!((mean - 1.0).abs() < 1e-12);
            assert!(w.as_slice().iter().all(|x| *x >= 0.0));
        }
    }
}

#[test]
fn score_matches_profile_difference() {
    for seed in 0..8 {
        let data = generate(&TruthSpec::gamma_reference(0.5, vec![1.0, -0.5]), 300, 500 + seed).unwrap();
        let w = Weights::uniform(data.n());
        let cox = fit_cox(&data, &quick(), &w).unwrap();
        let s = score_statistic(&data, &cox, &w).unwrap();
        let fd = profile_gamma_derivative(&data, &FrailtyFamily::gamma(), &cox.theta_hat.beta, &w, &SolverOptions::default())
            .unwrap();
        assert!((s - fd).abs() <= 1e-3 * fd.abs(), "{s} vs {fd}");
    }
}

#[test]
fn marginal_equals_km_at_the_null_fit() {
    // γ = 0 and β = 0 make H̄ the Nelson–Aalen estimator and the product limit KM
    let data = random_dataset(31, 150, 1);
    let opts = FitOptions {
        gamma_bounds: (0.0, 0.0),
        beta_box: Some(vec![(0.0, 0.0)]),
        ..quick()
    };
    let f = fit(&data, &FrailtyFamily::gamma(), &opts, &Weights::uniform(150)).unwrap();
    assert_eq!(f.theta_hat.beta, vec![0.0]);
    let all = |_: &frailfit::Subject| true;
    let m = marginal_survival(&f, &FrailtyFamily::gamma(), &data, &all).unwrap();
    let km = kaplan_meier(&data, &all).unwrap();
    assert_eq!(m.times, km.times);
    for (a, b) in m.survival.iter().zip(&km.survival) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn marginal_survival_by_group() {
    let data = sample();
    let f = fit(&data, &FrailtyFamily::gamma(), &quick(), &Weights::uniform(200)).unwrap();
    let pos = |s: &frailfit::Subject| s.z.at(0.0)[0] > 0.0;
    let neg = |s: &frailfit::Subject| s.z.at(0.0)[0] <= 0.0;
    let a = marginal_survival(&f, &FrailtyFamily::gamma(), &data, &pos).unwrap();
    let b = marginal_survival(&f, &FrailtyFamily::gamma(), &data, &neg).unwrap();
    // larger Z1 means higher hazard at β1 > 0
    let t = 1.0;
    assert!(a.at(t) < b.at(t));
    for c in [&a, &b] {
        assert!(c.survival.windows(2).all(|p| p[1] <= p[0]));
    }
    let none = |_: &frailfit::Subject| false;
    assert!(marginal_survival(&f, &FrailtyFamily::gamma(), &data, &none).is_err());
}

#[test]
fn kaplan_meier_without_censoring_is_empirical() {
    let times = [0.5, 1.0, 1.0, 2.0, 3.5];
    let data = Dataset::from_columns(&times, &[true; 5], &vec![vec![0.0]; 5], None).unwrap();
    let km = kaplan_meier(&data, &|_| true).unwrap();
    for t in [0.25, 0.5, 0.9, 1.0, 1.5, 2.0, 3.0, 3.5] {
        let emp = times.iter().filter(|&&x| x > t).count() as f64 / 5.0;
        assert!((km.at(t) - emp).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn predictions_are_survival_curves(seed in 0u64..1000, z0 in -2.0..2.0f64) {
        let data = random_dataset(seed, 60, 1);
        for fam in [FrailtyFamily::gamma(), FrailtyFamily::inverse_gaussian()] {
            let f = fit(&data, &fam, &FitOptions { mh_steps: 50, ..FitOptions::default() }, &Weights::uniform(60)).unwrap();
            let grid: Vec<f64> = (0..40).map(|k| k as f64 * 0.2).collect();
            let s = predict_survival(&f, &fam, &CovariatePath::fixed(vec![z0]), &grid).unwrap();
            prop_assert_eq!(s[0], 1.0);
            prop_assert!(s.windows(2).all(|p| p[1] <= p[0]));
            prop_assert!(s.iter().all(|x| *x > 0.0 && *x <= 1.0));
        }
    }
}
