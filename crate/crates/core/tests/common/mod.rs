//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use frailfit::{Dataset, FrailtyFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random right-censored data with fixed covariates. About a third of the times are
/// rounded to one decimal so that ties occur.
pub fn random_dataset(seed: u64, n: usize, d: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let z: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut t = -rng.random::<f64>().ln() * 2.0 + 0.05;
        if rng.random::<f64>() < 0.35 {
            t = (t * 10.0).round().max(1.0) / 10.0;
        }
        times.push(t);
        // the first subject always fails so every dataset has an event
        events.push(i == 0 || rng.random::<f64>() < 0.7);
        zs.push(z);
    }
    Dataset::from_columns(&times, &events, &zs, None).unwrap()
}

pub fn linear_predictor(beta: &[f64], z: &[f64]) -> f64 {
    beta.iter().zip(z).map(|(b, x)| b * x).sum()
}

/// Distinct event times with Breslow increments `d_k / Σ_{V_i ≥ t_k} e^{β'Z_i}`.
pub fn breslow(data: &Dataset, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut times: Vec<f64> = data
        .subjects()
        .iter()
        .filter(|s| s.event)
        .map(|s| s.time)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let inc = times
        .iter()
        .map(|&t| {
            let deaths = data
                .subjects()
                .iter()
                .filter(|s| s.event && s.time == t)
                .count() as f64;
            let risk: f64 = data
                .subjects()
                .iter()
                .filter(|s| s.time >= t)
                .map(|s| linear_predictor(beta, s.z.at(0.0)).exp())
                .sum();
            deaths / risk
        })
        .collect();
    (times, inc)
}

/// Gradient of the Breslow log partial likelihood, divided by n.
pub fn partial_likelihood_gradient(data: &Dataset, beta: &[f64]) -> Vec<f64> {
    let d = beta.len();
    let mut grad = vec![0.0; d];
    for s in data.subjects().iter().filter(|s| s.event) {
        let (mut s0, mut s1) = (0.0, vec![0.0; d]);
        for r in data.subjects().iter().filter(|r| r.time >= s.time) {
            let z = r.z.at(0.0);
            let e = linear_predictor(beta, z).exp();
            s0 += e;
            for j in 0..d {
                s1[j] += e * z[j];
            }
        }
        let z = s.z.at(0.0);
        for j in 0..d {
            grad[j] += z[j] - s1[j] / s0;
        }
    }
    let n = data.n() as f64;
    grad.iter().map(|g| g / n).collect()
}

/// Five-point first derivative: central when all points are defined, forward otherwise.
pub fn d1(f: impl Fn(f64) -> Option<f64>, x: f64, h: f64) -> f64 {
    let c = [f(x - 2.0 * h), f(x - h), f(x + h), f(x + 2.0 * h)];
    if let [Some(a), Some(b), Some(c), Some(d)] = c {
        return (a - 8.0 * b + 8.0 * c - d) / (12.0 * h);
    }
    let v: Vec<f64> = (0..5).map(|k| f(x + k as f64 * h).unwrap()).collect();
    (-25.0 * v[0] + 48.0 * v[1] - 36.0 * v[2] + 16.0 * v[3] - 3.0 * v[4]) / (12.0 * h)
}

/// Five-point second derivative, central or forward as in [`d1`].
pub fn d2(f: impl Fn(f64) -> Option<f64>, x: f64, h: f64) -> f64 {
    let c = [f(x - 2.0 * h), f(x - h), f(x), f(x + h), f(x + 2.0 * h)];
    if let [Some(a), Some(b), Some(m), Some(c), Some(d)] = c {
        return (-a + 16.0 * b - 30.0 * m + 16.0 * c - d) / (12.0 * h * h);
    }
    let v: Vec<f64> = (0..5).map(|k| f(x + k as f64 * h).unwrap()).collect();
    (35.0 * v[0] - 104.0 * v[1] + 114.0 * v[2] - 56.0 * v[3] + 11.0 * v[4]) / (12.0 * h * h)
}

/// The families exercised by the transform checks.
pub fn all_families() -> Vec<FrailtyFamily> {
    vec![
        FrailtyFamily::gamma(),
        FrailtyFamily::inverse_gaussian(),
        FrailtyFamily::igg(0.25).unwrap(),
        FrailtyFamily::igg(0.75).unwrap(),
        FrailtyFamily::lognormal(),
    ]
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len();
    if m % 2 == 1 {
        xs[m / 2]
    } else {
        0.5 * (xs[m / 2 - 1] + xs[m / 2])
    }
}
