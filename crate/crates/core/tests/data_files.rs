use std::fmt::Write as _;
use std::fs;

use frailfit::{load_long_csv, load_wide_csv, profile_loglik, FrailtyFamily, SolverOptions, Theta, Weights};

const WIDE: &str = "time,status,x,g
1.5,1,0.2,0
0.7,1,-1.1,1
2.2,0,0.4,1
3.0,1,1.3,0
0.9,0,-0.3,0
2.2,1,0.8,1
";

/// The same subjects in counting-process form, each follow-up cut at `cut` when it
/// extends past it. Covariates do not change across the cut.
fn as_long(cut: f64) -> String {
    let mut out = String::from("id,start,stop,status,x,g\n");
    for (i, line) in WIDE.lines().skip(1).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let t: f64 = f[0].parse().unwrap();
        if t > cut {
            writeln!(out, "{i},0,{cut},0,{},{}", f[2], f[3]).unwrap();
            writeln!(out, "{i},{cut},{t},{},{},{}", f[1], f[2], f[3]).unwrap();
        } else {
            writeln!(out, "{i},0,{t},{},{},{}", f[1], f[2], f[3]).unwrap();
        }
    }
    out
}

#[test]
fn split_intervals_leave_the_likelihood_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let wide_path = dir.path().join("wide.csv");
    let long_path = dir.path().join("long.csv");
    fs::write(&wide_path, WIDE).unwrap();
    fs::write(&long_path, as_long(1.0)).unwrap();
    let a = load_wide_csv(&wide_path, None).unwrap();
    let b = load_long_csv(&long_path, None).unwrap();
    assert_eq!(a.n(), b.n());
    assert_eq!(a.covariate_names(), b.covariate_names());
    assert_eq!(a.tau(), b.tau());
    let w = Weights::uniform(a.n());
    for fam in [FrailtyFamily::gamma(), FrailtyFamily::inverse_gaussian(), FrailtyFamily::lognormal()] {
        for theta in [Theta::new(0.0, vec![0.4, -0.2]), Theta::new(0.9, vec![-0.3, 0.5])] {
            let x = profile_loglik(&theta, &fam, &a, &w, &SolverOptions::default());
            let y = profile_loglik(&theta, &fam, &b, &w, &SolverOptions::default());
            assert!((x - y).abs() < 1e-12, "{}: {x} vs {y}", fam.label());
        }
    }
}

#[test]
fn tau_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.csv");
    fs::write(&path, WIDE).unwrap();
    assert_eq!(load_wide_csv(&path, Some(4.0)).unwrap().tau(), 4.0);
    assert!(load_wide_csv(dir.path().join("absent.csv"), None).is_err());
    assert!(load_long_csv(&path, None).is_err());
}
