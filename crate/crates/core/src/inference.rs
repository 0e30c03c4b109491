//! Weighted bootstrap inference, survival prediction and Kaplan–Meier.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::baseline::{dot, Problem, SolverOptions, Theta, Weights};
use crate::data::{CovariatePath, Dataset, Subject};
use crate::error::{Error, Result};
use crate::fitter::{fit, fit_cox, FitOptions, FitResult};
use crate::frailty::{laplace, transform_bundle, FamilyKind, FrailtyFamily};

/// Replicates allowed to fail before a bootstrap is declared unstable.
const MAX_FAILED_FRACTION: f64 = 0.2;
const MIN_WALD_REPLICATES: usize = 30;
const MIN_BAND_REPLICATES: usize = 100;
const SIGMA_FLOOR: f64 = 1e-4;
const SCORE_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    /// Unit exponentials divided by their mean.
    #[serde(rename = "dirichlet_exponential", alias = "dirichlet")]
    Dirichlet,
    /// Multinomial(n, uniform) counts: the ordinary bootstrap.
    #[serde(rename = "multinomial")]
    Multinomial,
    /// All weights one. Every replicate reproduces the base fit.
    #[serde(rename = "unit")]
    Unit,
}

pub fn make_weights<R: Rng + ?Sized>(n: usize, kind: WeightKind, rng: &mut R) -> Result<Weights> {
    if n == 0 {
        return Err(Error::invalid("weights for zero subjects"));
    }
    loop {
        let raw: Vec<f64> = match kind {
            WeightKind::Dirichlet => (0..n).map(|_| Exp1.sample(rng)).collect(),
            WeightKind::Multinomial => {
                let mut c = vec![0.0; n];
                for _ in 0..n {
                    c[rng.random_range(0..n)] += 1.0;
                }
                c
            }
            WeightKind::Unit => vec![1.0; n],
        };
        if raw.iter().any(|w| *w > 0.0) {
            return Weights::new(raw);
        }
    }
}

/// Weights for one replicate, reproducible from its seed.
pub fn replicate_weights(n: usize, kind: WeightKind, seed: u64) -> Result<Weights> {
    make_weights(n, kind, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    pub fit: Option<FitResult>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub weight_kind: WeightKind,
    pub seed: u64,
    pub base_fit: FitResult,
    pub covariate_names: Vec<String>,
    pub time_grid: Vec<f64>,
    /// `Â*` of each replicate on `time_grid` (empty for failed replicates).
    pub hazard_on_grid: Vec<Vec<f64>>,
    pub replicates: Vec<Replicate>,
}

impl BootstrapRun {
    pub fn successful(&self) -> impl Iterator<Item = &FitResult> {
        self.replicates.iter().filter_map(|r| r.fit.as_ref())
    }

    pub fn n_failed(&self) -> usize {
        self.replicates.iter().filter(|r| r.fit.is_none()).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub(crate) fn derive_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.next_u64()).collect()
}

fn replicate_options(base: &FitResult, options: &FitOptions, seed: u64) -> FitOptions {
    FitOptions {
        mh_steps: (options.mh_steps / 2).max(1),
        polish: true,
        seed,
        initial_theta: Some(base.theta_hat.clone()),
        ..options.clone()
    }
}

/// Refits a replicate with the options that produced `base`.
fn refit(data: &Dataset, family: &FrailtyFamily, base: &FitResult, opts: &FitOptions, w: &Weights) -> Result<FitResult> {
    if base.gamma_fixed && base.theta_hat.gamma == 0.0 {
        fit_cox(data, opts, w)
    } else if base.gamma_fixed {
        let o = FitOptions {
            gamma_bounds: (base.theta_hat.gamma, base.theta_hat.gamma),
            ..opts.clone()
        };
        fit(data, family, &o, w)
    } else {
        fit(data, family, opts, w)
    }
}

/// `B` weighted refits around `base`. Replicates run on the current rayon pool.
pub fn bootstrap_from_fit(
    data: &Dataset,
    family: &FrailtyFamily,
    options: &FitOptions,
    base: FitResult,
    b: usize,
    kind: WeightKind,
    seed: u64,
    time_grid: Option<Vec<f64>>,
) -> Result<BootstrapRun> {
    if b == 0 {
        return Err(Error::invalid("B must be positive"));
    }
    let time_grid = time_grid.unwrap_or_else(|| base.hazard.times.clone());
    let seeds = derive_seeds(seed, b);
    let n = data.n();
    let replicates: Vec<Replicate> = seeds
        .par_iter()
        .enumerate()
        .map(|(index, &s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let outcome = make_weights(n, kind, &mut rng).and_then(|w| {
                let opts = replicate_options(&base, options, rng.next_u64());
                refit(data, family, &base, &opts, &w)
            });
            match outcome {
                Ok(mut f) => {
                    f.best_trace.clear();
                    Replicate {
                        index,
                        seed: s,
                        fit: Some(f),
                        failure: None,
                    }
                }
                Err(e) => Replicate {
                    index,
                    seed: s,
                    fit: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    let failed = replicates.iter().filter(|r| r.fit.is_none()).count();
    if failed as f64 > MAX_FAILED_FRACTION * b as f64 {
        return Err(Error::BootstrapUnstable { failed, total: b });
    }
    let hazard_on_grid = replicates
        .iter()
        .map(|r| match &r.fit {
            Some(f) => time_grid.iter().map(|&t| f.hazard.value(t)).collect(),
            None => Vec::new(),
        })
        .collect();
    Ok(BootstrapRun {
        weight_kind: kind,
        seed,
        base_fit: base,
        covariate_names: data.covariate_names().to_vec(),
        time_grid,
        hazard_on_grid,
        replicates,
    })
}

/// Base fit followed by `B` weighted refits.
pub fn bootstrap(
    data: &Dataset,
    family: &FrailtyFamily,
    options: &FitOptions,
    b: usize,
    kind: WeightKind,
    seed: u64,
) -> Result<BootstrapRun> {
    let base = fit(data, family, options, &Weights::uniform(data.n()))?;
    bootstrap_from_fit(data, family, options, base, b, kind, seed, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub covariate: String,
    pub parameter: String,
    pub model: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
}

impl WaldRow {
    pub fn new(
        covariate: impl Into<String>,
        parameter: impl Into<String>,
        model: impl Into<String>,
        estimate: f64,
        se: f64,
    ) -> Self {
        WaldRow {
            covariate: covariate.into(),
            parameter: parameter.into(),
            model: model.into(),
            estimate,
            se,
            z: estimate / se,
        }
    }

    /// Two-sided normal p-value of `z`.
    pub fn p_value(&self) -> f64 {
        2.0 * normal_upper_tail(self.z.abs())
    }
}

/// GF, IGF, IGG(α) or LNF.
pub fn family_code(family: &FrailtyFamily) -> String {
    match family.kind {
        FamilyKind::Gamma => "GF".to_string(),
        FamilyKind::InverseGaussian => "IGF".to_string(),
        FamilyKind::Igg => format!("IGG({})", family.alpha),
        FamilyKind::LogNormal => "LNF".to_string(),
    }
}

/// Short label for the fitted model: PH for Cox, GF for gamma frailty, and so on.
pub fn model_label(fit: &FitResult) -> String {
    if fit.gamma_fixed && fit.theta_hat.gamma == 0.0 {
        return "PH".into();
    }
    let base = family_code(&fit.family);
    if fit.gamma_fixed {
        format!("{base}[gamma={}]", fit.theta_hat.gamma)
    } else {
        base
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
}

/// Estimates with bootstrap standard errors. γ appears only when it was estimated.
pub fn wald_table(run: &BootstrapRun) -> Result<Vec<WaldRow>> {
    let fits: Vec<&FitResult> = run.successful().collect();
    if fits.len() < MIN_WALD_REPLICATES {
        return Err(Error::TooFewReplicates {
            have: fits.len(),
            need: MIN_WALD_REPLICATES,
        });
    }
    let base = &run.base_fit;
    let model = model_label(base);
    let mut rows = Vec::new();
    let mut push = |cov: &str, par: &str, est: f64, draws: Vec<f64>| -> Result<()> {
        let se = sample_sd(&draws);
        if !(se > 0.0) {
            return Err(Error::Degenerate(format!(
                "replicates of {par} for {cov} have zero variance"
            )));
        }
        rows.push(WaldRow::new(cov, par, model.clone(), est, se));
        Ok(())
    };
    if !base.gamma_fixed {
        push(
            "frailty",
            "gamma",
            base.theta_hat.gamma,
            fits.iter().map(|f| f.theta_hat.gamma).collect(),
        )?;
    }
    for (j, name) in run.covariate_names.iter().enumerate() {
        push(
            name,
            "beta",
            base.theta_hat.beta[j],
            fits.iter().map(|f| f.theta_hat.beta[j]).collect(),
        )?;
    }
    Ok(rows)
}

pub fn write_wald_csv<W: Write>(rows: &[WaldRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub b_used: usize,
    /// Central difference of the profile likelihood in γ at 0, for comparison
    /// with `statistic`.
    pub finite_difference: f64,
    pub cox_fit: FitResult,
    pub replicate_statistics: Vec<f64>,
}

/// `(1/n) Σ w_i (H_i²/2 - δ_i H_i)` at a fitted Cox model.
pub fn score_statistic(data: &Dataset, fit: &FitResult, w: &Weights) -> Result<f64> {
    let p = Problem::new(data, &FrailtyFamily::gamma(), w, Some(&fit.hazard.times))?;
    Ok(p.gamma_score_at_zero(&Theta::cox(fit.theta_hat.beta.clone()), &fit.hazard.increments))
}

/// Derivative of `γ ↦ pL(γ, β)` at 0 by central difference, falling back to a
/// one-sided second-order stencil if `γ < 0` is outside the model.
pub fn profile_gamma_derivative(
    data: &Dataset,
    family: &FrailtyFamily,
    beta: &[f64],
    w: &Weights,
    solver: &SolverOptions,
) -> Result<f64> {
    let p = Problem::new(data, family, w, None)?;
    let h = SCORE_FD_STEP;
    let at = |g: f64| p.profile(&Theta::new(g, beta.to_vec()), solver, None).0;
    let (fm, f0, fp) = (at(-h), at(0.0), at(h));
    if fm.is_finite() && fp.is_finite() {
        return Ok((fp - fm) / (2.0 * h));
    }
    let f2 = at(2.0 * h);
    if f0.is_finite() && fp.is_finite() && f2.is_finite() {
        return Ok((-3.0 * f0 + 4.0 * fp - f2) / (2.0 * h));
    }
    Err(Error::Numeric("profile likelihood undefined near gamma = 0".into()))
}

/// Score test of `γ = 0` against `γ > 0` with a bootstrap null reference centred
/// at the observed statistic.
pub fn score_test_gamma(
    data: &Dataset,
    family: &FrailtyFamily,
    options: &FitOptions,
    b: usize,
    kind: WeightKind,
    seed: u64,
) -> Result<ScoreTestResult> {
    if b == 0 {
        return Err(Error::invalid("B must be positive"));
    }
    let uniform = Weights::uniform(data.n());
    let cox = fit_cox(data, options, &uniform)?;
    let statistic = score_statistic(data, &cox, &uniform)?;
    let finite_difference =
        profile_gamma_derivative(data, family, &cox.theta_hat.beta, &uniform, &options.solver)?;

    let seeds = derive_seeds(seed, b);
    let n = data.n();
    let draws: Vec<Option<f64>> = seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let w = make_weights(n, kind, &mut rng).ok()?;
            let opts = replicate_options(&cox, options, rng.next_u64());
            let f = fit_cox(data, &opts, &w).ok()?;
            score_statistic(data, &f, &w).ok()
        })
        .collect();
    let replicate_statistics: Vec<f64> = draws.into_iter().flatten().collect();
    let failed = b - replicate_statistics.len();
    if failed as f64 > MAX_FAILED_FRACTION * b as f64 {
        return Err(Error::BootstrapUnstable { failed, total: b });
    }
    let b_used = replicate_statistics.len();
    let exceed = replicate_statistics
        .iter()
        .filter(|&&s| s - statistic >= statistic)
        .count();
    Ok(ScoreTestResult {
        statistic,
        p_value: exceed as f64 / b_used as f64,
        b_used,
        finite_difference,
        cox_fit: cox,
        replicate_statistics,
    })
}

/// `H(t; z) = Σ_{t_k ≤ t} e^{β'z(t_k)} ΔA_k` at each grid point (grid in any order).
fn h_on_grid(fit: &FitResult, z: &CovariatePath, grid: &[f64]) -> Vec<f64> {
    let a = &fit.hazard;
    let mut cum = Vec::with_capacity(a.times.len() + 1);
    cum.push(0.0);
    for (t, dx) in a.times.iter().zip(&a.increments) {
        let step = dot(&fit.theta_hat.beta, z.at(*t)).exp() * dx;
        cum.push(cum.last().unwrap() + step);
    }
    grid.iter()
        .map(|&t| cum[a.times.partition_point(|&x| x <= t)])
        .collect()
}

/// `Ŝ(t|z) = Λ_γ̂(H(t; z))` on `grid`.
pub fn predict_survival(
    fit: &FitResult,
    family: &FrailtyFamily,
    z: &CovariatePath,
    grid: &[f64],
) -> Result<Vec<f64>> {
    if z.dim() != fit.theta_hat.beta.len() {
        return Err(Error::invalid(format!(
            "covariate has dimension {}, model has {}",
            z.dim(),
            fit.theta_hat.beta.len()
        )));
    }
    if grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::invalid("grid times must be finite and nonnegative"));
    }
    let gamma = fit.theta_hat.gamma;
    h_on_grid(fit, z, grid)
        .into_iter()
        .map(|h| {
            if gamma == 0.0 {
                Ok((-h).exp())
            } else {
                laplace(family, gamma, h)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub grid: Vec<f64>,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    pub critical_value: f64,
    pub replicates_used: usize,
}

/// Studentised sup band for `S(·|z)` from the bootstrap replicates.
pub fn simultaneous_band(
    run: &BootstrapRun,
    family: &FrailtyFamily,
    z: &CovariatePath,
    grid: &[f64],
    level: f64,
) -> Result<BandResult> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::invalid(format!("level must lie in [0, 1), got {level}")));
    }
    let center = predict_survival(&run.base_fit, family, z, grid)?;
    let curves: Vec<Vec<f64>> = run
        .successful()
        .filter_map(|f| predict_survival(f, family, z, grid).ok())
        .collect();
    if curves.len() < MIN_BAND_REPLICATES {
        return Err(Error::TooFewReplicates {
            have: curves.len(),
            need: MIN_BAND_REPLICATES,
        });
    }
    let m = curves.len() as f64;
    let sigma: Vec<f64> = (0..grid.len())
        .map(|k| {
            let mean = curves.iter().map(|c| c[k]).sum::<f64>() / m;
            let var = curves.iter().map(|c| (c[k] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            var.sqrt().max(SIGMA_FLOOR)
        })
        .collect();
    let mut sups: Vec<f64> = curves
        .iter()
        .map(|c| {
            c.iter()
                .zip(&center)
                .zip(&sigma)
                .map(|((s, c0), sd)| (s - c0).abs() / sd)
                .fold(0.0, f64::max)
        })
        .collect();
    sups.sort_by(f64::total_cmp);
    let critical_value = if level == 0.0 {
        0.0
    } else {
        let k = (level * sups.len() as f64).ceil() as usize;
        sups[k.clamp(1, sups.len()) - 1]
    };
    let lower = center
        .iter()
        .zip(&sigma)
        .map(|(c, s)| (c - critical_value * s).clamp(0.0, 1.0))
        .collect();
    let upper = center
        .iter()
        .zip(&sigma)
        .map(|(c, s)| (c + critical_value * s).clamp(0.0, 1.0))
        .collect();
    Ok(BandResult {
        grid: grid.to_vec(),
        center,
        lower,
        upper,
        level,
        critical_value,
        replicates_used: curves.len(),
    })
}

/// CSV `time,center,lower,upper`.
pub fn write_band_csv<W: Write>(band: &BandResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "center", "lower", "upper"])?;
    for k in 0..band.grid.len() {
        w.write_record([
            band.grid[k].to_string(),
            band.center[k].to_string(),
            band.lower[k].to_string(),
            band.upper[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Greenwood variance, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<Vec<f64>>,
}

impl SurvivalCurve {
    /// Right-continuous step value at `t` (1 before the first time).
    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    pub fn on_grid(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&t| self.at(t)).collect()
    }

    /// CSV `time,survival[,variance]`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match &self.variance {
            Some(v) => {
                w.write_record(["time", "survival", "variance"])?;
                for k in 0..self.times.len() {
                    w.write_record([
                        self.times[k].to_string(),
                        self.survival[k].to_string(),
                        v[k].to_string(),
                    ])?;
                }
            }
            None => {
                w.write_record(["time", "survival"])?;
                for k in 0..self.times.len() {
                    w.write_record([self.times[k].to_string(), self.survival[k].to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Product limit `∏_{s ≤ t} (1 - ΔH̄(s))` with
/// `ΔH̄(s) = Σ_i Y_i(s) e^{β'Z_i(s)} Ġ(H_i(s)) ΔÂ(s) / Σ_i Y_i(s)`, sums over the subset.
/// Jumps are at `Â`'s support.
pub fn marginal_survival(
    fit: &FitResult,
    family: &FrailtyFamily,
    data: &Dataset,
    subset: &dyn Fn(&Subject) -> bool,
) -> Result<SurvivalCurve> {
    let members: Vec<&Subject> = data.subjects().iter().filter(|s| subset(s)).collect();
    if members.is_empty() {
        return Err(Error::EmptySubset);
    }
    let theta = &fit.theta_hat;
    let a = &fit.hazard;
    let mut h = vec![0.0; members.len()];
    let mut s = 1.0;
    let mut survival = Vec::with_capacity(a.times.len());
    for (t, dx) in a.times.iter().zip(&a.increments) {
        let mut num = 0.0;
        let mut at_risk = 0usize;
        for (i, subj) in members.iter().enumerate() {
            let r = dot(&theta.beta, subj.z.at(*t)).exp();
            // H includes the jump at t
            h[i] += r * dx;
            if subj.at_risk(*t) {
                at_risk += 1;
                let gdot = if theta.gamma == 0.0 {
                    1.0
                } else {
                    transform_bundle(family, theta.gamma, h[i])?.gdot
                };
                num += r * gdot;
            }
        }
        if at_risk > 0 {
            s *= 1.0 - num * dx / at_risk as f64;
        }
        survival.push(s.max(0.0));
        s = s.max(0.0);
    }
    Ok(SurvivalCurve {
        times: a.times.clone(),
        survival,
        variance: None,
    })
}

/// Kaplan–Meier at the subset's distinct event times, with Greenwood variance.
pub fn kaplan_meier(data: &Dataset, subset: &dyn Fn(&Subject) -> bool) -> Result<SurvivalCurve> {
    let mut obs: Vec<(f64, bool)> = data
        .subjects()
        .iter()
        .filter(|s| subset(s))
        .map(|s| (s.time, s.event))
        .collect();
    if obs.is_empty() {
        return Err(Error::EmptySubset);
    }
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut times = Vec::new();
    let mut survival = Vec::new();
    let mut variance = Vec::new();
    let mut s = 1.0;
    let mut gw = 0.0;
    let mut at_risk = obs.len();
    let mut i = 0;
    while i < obs.len() {
        let t = obs[i].0;
        let mut j = i;
        let mut deaths = 0usize;
        while j < obs.len() && obs[j].0 == t {
            deaths += obs[j].1 as usize;
            j += 1;
        }
        if deaths > 0 {
            let (d, r) = (deaths as f64, at_risk as f64);
            s *= 1.0 - d / r;
            if r > d {
                gw += d / (r * (r - d));
            }
            times.push(t);
            survival.push(s);
            variance.push(s * s * gw);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(SurvivalCurve {
        times,
        survival,
        variance: Some(variance),
    })
}

/// `P[N(0,1) > x]`
pub fn normal_upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}
