mod common;

use common::median;
use frailfit::sim::{attenuation_study, run_scenario, Scenario, ScenarioResult, WorkingModel};
use frailfit::{fit, generate, Baseline, FitOptions, FrailtyFamily, TruthSpec, Weights};
use rayon::prelude::*;

#[test]
fn censoring_fraction_matches_analytic_value() {
    let truth = TruthSpec::gamma_reference(1.0, vec![1.0, -0.5]);
    let p = truth.censoring_fraction().unwrap();
    let n = 20_000;
    let data = generate(&truth, n, 3).unwrap();
    let obs = data.subjects().iter().filter(|s| !s.event).count() as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((obs - p).abs() < 3.0 * se, "observed {obs}, analytic {p}");
}

#[test]
fn censoring_fraction_other_families() {
    for family in [FrailtyFamily::inverse_gaussian(), FrailtyFamily::lognormal()] {
        let truth = TruthSpec {
            family,
            baseline: Baseline::Weibull { shape: 1.5, scale: 2.0 },
            ..TruthSpec::gamma_reference(0.8, vec![0.5, 0.5])
        };
        let p = truth.censoring_fraction().unwrap();
        let n = 20_000;
        let data = generate(&truth, n, 4).unwrap();
        let obs = data.subjects().iter().filter(|s| !s.event).count() as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((obs - p).abs() < 3.0 * se, "{}: observed {obs}, analytic {p}", family.label());
    }
}

#[test]
fn no_frailty_recovers_small_gamma() {
    let truth = TruthSpec::gamma_reference(0.0, vec![1.0, -0.5]);
    let opts = FitOptions {
        mh_steps: 300,
        ..FitOptions::default()
    };
    let mut g: Vec<f64> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let data = generate(&truth, 2000, 70 + seed).unwrap();
            fit(&data, &FrailtyFamily::gamma(), &opts, &Weights::uniform(2000))
                .unwrap()
                .theta_hat
                .gamma
        })
        .collect();
    let m = median(&mut g);
    assert!(m < 0.1, "median gamma {m}");
}

#[test]
fn studies_reproduce_from_seed() {
    let truth = TruthSpec::gamma_reference(1.0, vec![1.0, -0.5]);
    let opts = FitOptions {
        mh_steps: 50,
        ..FitOptions::default()
    };
    let run = || attenuation_study(&truth, 150, 4, 9, &[WorkingModel::Cox], &opts).unwrap();
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(a.seed, 9);
    assert_eq!(a.replicates.len(), 4);
    let back = ScenarioResult::from_json(&a.to_json().unwrap()).unwrap();
    assert_eq!(back, a);
    let mut csv = Vec::new();
    a.write_summary_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("statistic,value\n"));
}

#[test]
fn scenario_file_round_trip() {
    let json = r#"{
        "study": "score_size_power",
        "truth": {
            "family": {"kind": "gamma"},
            "gamma0": 0.0,
            "beta0": [1.0],
            "baseline": {"kind": "linear", "rate": 1.0},
            "covariate_law": {"kind": "normal", "mean": [0.0], "cov": [[1.0]]},
            "censoring": {"c_max": 13.0},
            "tau": 6.5
        },
        "gammas": [0.0, 1.0],
        "n": 100,
        "reps": 2,
        "b": 20,
        "seed": 3,
        "fit": {"mh_steps": 30}
    }"#;
    let sc = Scenario::from_json(json).unwrap();
    let res = run_scenario(&sc).unwrap();
    assert_eq!(res.study, "score_size_power");
    assert_eq!(res.replicates.len(), 4);
    assert!(res.summary.contains_key("rejection[gamma0=0]"));
    assert!(res.summary.contains_key("rejection[gamma0=1]"));
}

#[test]
fn invalid_truth_is_rejected() {
    let mut t = TruthSpec::gamma_reference(1.0, vec![1.0]);
    t.gamma0 = -1.0;
    assert!(generate(&t, 10, 1).is_err());
    let t = TruthSpec {
        family: FrailtyFamily::igg(0.3).unwrap(),
        ..TruthSpec::gamma_reference(1.0, vec![1.0])
    };
    assert!(generate(&t, 10, 1).is_err());
}
