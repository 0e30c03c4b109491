//! Data generation from a known frailty model, and the misspecification studies.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, InverseGaussian, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baseline::{Theta, Weights};
use crate::data::{CovariatePath, Dataset, Subject};
use crate::fitter::{fit, fit_cox, FitOptions, FitResult};
use crate::error::{Error, Result};
use crate::frailty::{laplace, FamilyKind, FrailtyFamily};
use crate::inference::{
    bootstrap_from_fit, derive_seeds, family_code, score_test_gamma, simultaneous_band, wald_table,
    WeightKind,
};
use crate::quadrature::NormalRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    /// `A₀(t) = rate · t`
    Linear { rate: f64 },
    /// `A₀(t) = (t / scale)^shape`
    Weibull { shape: f64, scale: f64 },
}

impl Baseline {
    pub fn cumulative(&self, t: f64) -> f64 {
        match *self {
            Baseline::Linear { rate } => rate * t,
            Baseline::Weibull { shape, scale } => (t / scale).powf(shape),
        }
    }

    pub fn inverse(&self, x: f64) -> f64 {
        match *self {
            Baseline::Linear { rate } => x / rate,
            Baseline::Weibull { shape, scale } => scale * x.powf(1.0 / shape),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Baseline::Linear { rate } => rate > 0.0 && rate.is_finite(),
            Baseline::Weibull { shape, scale } => {
                shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("baseline parameters must be positive and finite"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateLaw {
    Normal { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    /// `Z₁ ~ Bernoulli(p)` independent of a normal block `(Z₂, …)`.
    BernoulliMix {
        p: f64,
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
}

impl CovariateLaw {
    /// Independent standard normals.
    pub fn standard_normal(d: usize) -> Self {
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        CovariateLaw::Normal {
            mean: vec![0.0; d],
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariateLaw::Normal { mean, .. } => mean.len(),
            CovariateLaw::BernoulliMix { mean, .. } => mean.len() + 1,
        }
    }

    fn normal_block(&self) -> (&[f64], &[Vec<f64>]) {
        match self {
            CovariateLaw::Normal { mean, cov } | CovariateLaw::BernoulliMix { mean, cov, .. } => {
                (mean, cov)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Censoring {
    /// Upper end of the uniform part.
    pub c_max: f64,
    /// Probability that `C = τ` outright.
    #[serde(default = "default_atom")]
    pub atom_at_tau: f64,
}

fn default_atom() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub family: FrailtyFamily,
    pub gamma0: f64,
    pub beta0: Vec<f64>,
    pub baseline: Baseline,
    pub covariate_law: CovariateLaw,
    pub censoring: Censoring,
    pub tau: f64,
}

impl TruthSpec {
    /// Gamma frailty, `A₀(t) = t`, independent standard normal covariates, and a
    /// censoring law giving roughly a quarter censored at `γ₀ = 1, β₀ = (1, -0.5)`.
    pub fn gamma_reference(gamma0: f64, beta0: Vec<f64>) -> Self {
        let d = beta0.len();
        TruthSpec {
            family: FrailtyFamily::gamma(),
            gamma0,
            beta0,
            baseline: Baseline::Linear { rate: 1.0 },
            covariate_law: CovariateLaw::standard_normal(d),
            censoring: Censoring {
                c_max: REFERENCE_C_MAX,
                atom_at_tau: default_atom(),
            },
            tau: REFERENCE_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if !(self.gamma0 >= 0.0) || !self.gamma0.is_finite() {
            return Err(Error::invalid("gamma0 must be nonnegative"));
        }
        match self.family.kind {
            FamilyKind::Gamma | FamilyKind::InverseGaussian | FamilyKind::LogNormal => {}
            FamilyKind::Igg => {
                if self.family.alpha != 0.0 && self.family.alpha != 0.5 {
                    return Err(Error::invalid(
                        "no frailty sampler for IGG with alpha other than 0 or 1/2",
                    ));
                }
            }
        }
        self.baseline.validate()?;
        if self.covariate_law.dim() != self.beta0.len() {
            return Err(Error::invalid(format!(
                "covariate law has dimension {}, beta0 has {}",
                self.covariate_law.dim(),
                self.beta0.len()
            )));
        }
        if self.beta0.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("beta0 must be finite"));
        }
        if let CovariateLaw::BernoulliMix { p, .. } = self.covariate_law {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("bernoulli p outside [0, 1]"));
            }
        }
        let (mean, cov) = self.covariate_law.normal_block();
        if cov.len() != mean.len() || cov.iter().any(|r| r.len() != mean.len()) {
            return Err(Error::invalid("covariance shape does not match the mean"));
        }
        if cholesky(cov).is_none() {
            return Err(Error::invalid("covariance is not positive definite"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau must be positive"));
        }
        let c = &self.censoring;
        if !(c.c_max > 0.0) || !(0.0..=1.0).contains(&c.atom_at_tau) {
            return Err(Error::invalid("censoring needs c_max > 0 and atom weight in [0, 1]"));
        }
        Ok(())
    }

    /// `P[δ = 0]` by quadrature over the linear predictor and the censoring law.
    pub fn censoring_fraction(&self) -> Result<f64> {
        self.validate()?;
        let tau = self.tau;
        let (c, atom) = (self.censoring.c_max, self.censoring.atom_at_tau);
        // the linear predictor is a (mixture of) normal(s)
        let (mean, cov) = self.covariate_law.normal_block();
        let (b_first, b_rest): (f64, &[f64]) = match self.covariate_law {
            CovariateLaw::Normal { .. } => (0.0, &self.beta0),
            CovariateLaw::BernoulliMix { .. } => (self.beta0[0], &self.beta0[1..]),
        };
        let m: f64 = b_rest.iter().zip(mean).map(|(b, m)| b * m).sum();
        let mut var = 0.0;
        for (i, bi) in b_rest.iter().enumerate() {
            for (j, bj) in b_rest.iter().enumerate() {
                var += bi * cov[i][j] * bj;
            }
        }
        let sd = var.max(0.0).sqrt();
        let components: Vec<(f64, f64)> = match self.covariate_law {
            CovariateLaw::Normal { .. } => vec![(1.0, 0.0)],
            CovariateLaw::BernoulliMix { p, .. } => vec![(1.0 - p, 0.0), (p, b_first)],
        };
        let rule = NormalRule::cached(60);
        let surv = |t: f64| -> Result<f64> {
            let mut s = 0.0;
            for &(pw, shift) in &components {
                for (v, w) in rule.nodes.iter().zip(&rule.weights) {
                    let eta = m + shift + sd * v;
                    let x = eta.exp() * self.baseline.cumulative(t);
                    s += pw * w * self.conditional_survival(x)?;
                }
            }
            Ok(s)
        };
        // uniform part on (0, min(c, τ)), everything else sits at τ
        let upper = c.min(tau);
        let steps = 2000;
        let h = upper / steps as f64;
        let mut integral = 0.0;
        for k in 0..=steps {
            let wk = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            integral += wk * surv(k as f64 * h)?;
        }
        integral *= h / 3.0 / c;
        let mass_at_tau = atom + (1.0 - atom) * (1.0 - upper / c);
        Ok((1.0 - atom) * integral + mass_at_tau * surv(tau)?)
    }

    /// True marginal survival at `t` for covariate value `z`.
    pub fn survival(&self, z: &[f64], t: f64) -> Result<f64> {
        let eta: f64 = self.beta0.iter().zip(z).map(|(b, x)| b * x).sum();
        self.conditional_survival(eta.exp() * self.baseline.cumulative(t))
    }

    fn conditional_survival(&self, x: f64) -> Result<f64> {
        if self.gamma0 == 0.0 {
            Ok((-x).exp())
        } else {
            laplace(&self.family, self.gamma0, x)
        }
    }
}

const REFERENCE_TAU: f64 = 6.5;
const REFERENCE_C_MAX: f64 = 13.0;

fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] - s;
                if !(v > 0.0) {
                    return None;
                }
                l[i][j] = v.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// Draws one frailty value with mean 1 and the family's variance at `gamma0`.
fn draw_frailty<R: Rng>(family: &FrailtyFamily, gamma0: f64, rng: &mut R) -> f64 {
    if gamma0 == 0.0 {
        return 1.0;
    }
    match (family.kind, family.alpha) {
        (FamilyKind::Gamma, _) | (FamilyKind::Igg, 0.0) => Gamma::new(1.0 / gamma0, gamma0)
            .expect("positive gamma parameters")
            .sample(rng),
        (FamilyKind::InverseGaussian, _) | (FamilyKind::Igg, _) => {
            InverseGaussian::new(1.0, 1.0 / gamma0)
                .expect("positive inverse gaussian parameters")
                .sample(rng)
        }
        (FamilyKind::LogNormal, _) => {
            let v: f64 = StandardNormal.sample(rng);
            (gamma0.sqrt() * v - gamma0 / 2.0).exp()
        }
    }
}

fn draw_covariates<R: Rng>(law: &CovariateLaw, chol: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    let (mean, _) = law.normal_block();
    let e: Vec<f64> = (0..mean.len()).map(|_| StandardNormal.sample(rng)).collect();
    let normal = mean
        .iter()
        .enumerate()
        .map(|(i, m)| m + (0..=i).map(|k| chol[i][k] * e[k]).sum::<f64>());
    match law {
        CovariateLaw::Normal { .. } => normal.collect(),
        CovariateLaw::BernoulliMix { p, .. } => {
            let z1 = if rng.random::<f64>() < *p { 1.0 } else { 0.0 };
            std::iter::once(z1).chain(normal).collect()
        }
    }
}

/// `n` independent subjects from `truth`, deterministic in `seed`.
pub fn generate(truth: &TruthSpec, n: usize, seed: u64) -> Result<Dataset> {
    truth.validate()?;
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    let (_, cov) = truth.covariate_law.normal_block();
    let chol = cholesky(cov).expect("validated covariance");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let z = draw_covariates(&truth.covariate_law, &chol, &mut rng);
        let w = draw_frailty(&truth.family, truth.gamma0, &mut rng);
        let e: f64 = Exp1.sample(&mut rng);
        let eta: f64 = truth.beta0.iter().zip(&z).map(|(b, x)| b * x).sum();
        let t = truth.baseline.inverse(e / (w * eta.exp()));
        let c = if rng.random::<f64>() < truth.censoring.atom_at_tau {
            truth.tau
        } else {
            (rng.random::<f64>() * truth.censoring.c_max).min(truth.tau)
        };
        let (time, event) = if t <= c { (t, true) } else { (c, false) };
        // a zero time can only come from underflow; nudge it onto the positive axis
        let time = time.max(f64::MIN_POSITIVE);
        subjects.push(Subject::new(format!("{}", i + 1), time, event, CovariatePath::fixed(z)));
    }
    Dataset::new(subjects, Some(truth.tau), None)
}

/// A model fitted to each simulated replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum WorkingModel {
    Cox,
    Frailty { family: FrailtyFamily },
}

impl WorkingModel {
    pub fn label(&self) -> String {
        match self {
            WorkingModel::Cox => "PH".into(),
            WorkingModel::Frailty { family } => family_code(family),
        }
    }

    pub fn fit(&self, data: &Dataset, options: &FitOptions, w: &Weights) -> Result<FitResult> {
        match self {
            WorkingModel::Cox => fit_cox(data, options, w),
            WorkingModel::Frailty { family } => fit(data, family, options, w),
        }
    }

    fn family(&self) -> FrailtyFamily {
        match self {
            WorkingModel::Cox => FrailtyFamily::gamma(),
            WorkingModel::Frailty { family } => *family,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEstimate {
    pub model: String,
    pub theta: Theta,
    pub loglik: f64,
    pub converged: bool,
}

impl ModelEstimate {
    fn from_fit(model: String, f: &FitResult) -> Self {
        ModelEstimate {
            model,
            theta: f.theta_hat.clone(),
            loglik: f.loglik,
            converged: f.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub gamma0: f64,
    pub estimates: Vec<ModelEstimate>,
    /// Study-specific per-replicate quantities (standard errors, p-values, coverage flags).
    pub metrics: BTreeMap<String, f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub study: String,
    pub seed: u64,
    pub n: usize,
    pub reps: usize,
    pub truth: TruthSpec,
    pub failed: usize,
    pub replicates: Vec<ReplicateRecord>,
    pub summary: BTreeMap<String, f64>,
}

impl ScenarioResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// CSV `statistic,value`.
    pub fn write_summary_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["statistic", "value"])?;
        w.write_record(["replicates".to_string(), self.reps.to_string()])?;
        w.write_record(["failed".to_string(), self.failed.to_string()])?;
        for (k, v) in &self.summary {
            w.write_record([k.clone(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn ok_replicates(&self) -> impl Iterator<Item = &ReplicateRecord> {
        self.replicates.iter().filter(|r| r.failure.is_none())
    }

    /// Values of one metric over the successful replicates.
    pub fn metric(&self, key: &str) -> Vec<f64> {
        self.ok_replicates().filter_map(|r| r.metrics.get(key).copied()).collect()
    }
}

/// Independent seeds for data, fitting and resampling within one replicate.
struct RepSeeds {
    data: u64,
    fit: u64,
    boot: u64,
}

fn rep_seeds(seed: u64) -> RepSeeds {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RepSeeds {
        data: rng.next_u64(),
        fit: rng.next_u64(),
        boot: rng.next_u64(),
    }
}

fn run_replicates<F>(
    study: &str,
    truth: &TruthSpec,
    n: usize,
    reps: usize,
    seed: u64,
    gamma_of: impl Fn(usize) -> f64 + Sync,
    body: F,
) -> Result<ScenarioResult>
where
    F: Fn(&TruthSpec, &RepSeeds, &mut ReplicateRecord) -> Result<()> + Sync,
{
    truth.validate()?;
    if reps == 0 || n == 0 {
        return Err(Error::invalid("n and reps must be positive"));
    }
    let seeds = derive_seeds(seed, reps);
    let replicates: Vec<ReplicateRecord> = seeds
        .par_iter()
        .enumerate()
        .map(|(index, &s)| {
            let gamma0 = gamma_of(index);
            let t = TruthSpec {
                gamma0,
                ..truth.clone()
            };
            let mut rec = ReplicateRecord {
                index,
                seed: s,
                gamma0,
                estimates: Vec::new(),
                metrics: BTreeMap::new(),
                failure: None,
            };
            if let Err(e) = body(&t, &rep_seeds(s), &mut rec) {
                rec.failure = Some(e.to_string());
            }
            rec
        })
        .collect();
    let failed = replicates.iter().filter(|r| r.failure.is_some()).count();
    Ok(ScenarioResult {
        study: study.into(),
        seed,
        n,
        reps,
        truth: truth.clone(),
        failed,
        replicates,
        summary: BTreeMap::new(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

fn fit_options_with_seed(options: &FitOptions, seed: u64) -> FitOptions {
    FitOptions {
        seed,
        ..options.clone()
    }
}

/// Fits each working model and reports componentwise ratios `β̂_j / β₀_j`.
pub fn attenuation_study(
    truth: &TruthSpec,
    n: usize,
    reps: usize,
    seed: u64,
    working: &[WorkingModel],
    options: &FitOptions,
) -> Result<ScenarioResult> {
    if working.is_empty() {
        return Err(Error::invalid("no working models"));
    }
    let gamma0 = truth.gamma0;
    let mut res = run_replicates("attenuation", truth, n, reps, seed, |_| gamma0, |t, s, rec| {
        let data = generate(t, n, s.data)?;
        let w = Weights::uniform(n);
        for m in working {
            let f = m.fit(&data, &fit_options_with_seed(options, s.fit), &w)?;
            for (j, (b, b0)) in f.theta_hat.beta.iter().zip(&t.beta0).enumerate() {
                if *b0 != 0.0 {
                    rec.metrics.insert(format!("{}.ratio[{}]", m.label(), j + 1), b / b0);
                }
            }
            rec.estimates.push(ModelEstimate::from_fit(m.label(), &f));
        }
        Ok(())
    })?;
    for m in working {
        let mut means = Vec::new();
        for j in 0..truth.beta0.len() {
            let key = format!("{}.ratio[{}]", m.label(), j + 1);
            let xs = res.metric(&key);
            if xs.is_empty() {
                continue;
            }
            means.push(mean(&xs));
            res.summary.insert(format!("{key}.mean"), mean(&xs));
            res.summary.insert(format!("{key}.sd"), sd(&xs));
        }
        if !means.is_empty() {
            let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
            res.summary.insert(format!("{}.ratio_spread", m.label()), hi - lo);
            res.summary.insert(format!("{}.ratio_mean", m.label()), mean(&means));
        }
    }
    Ok(res)
}

/// Fits a working model on a subset of the covariates (the first kept column is the
/// one of interest) and records the sign of its coefficient. With `b > 0` also a
/// bootstrap Wald test of that coefficient being zero.
#[allow(clippy::too_many_arguments)]
pub fn sign_consistency_study(
    truth: &TruthSpec,
    n: usize,
    reps: usize,
    seed: u64,
    columns: &[usize],
    working: &WorkingModel,
    b: usize,
    kind: WeightKind,
    options: &FitOptions,
) -> Result<ScenarioResult> {
    if columns.is_empty() || columns.iter().any(|&c| c >= truth.beta0.len()) {
        return Err(Error::invalid("working columns must index the true covariates"));
    }
    let gamma0 = truth.gamma0;
    let mut res = run_replicates("sign_consistency", truth, n, reps, seed, |_| gamma0, |t, s, rec| {
        let data = generate(t, n, s.data)?.select_covariates(columns)?;
        let opts = fit_options_with_seed(options, s.fit);
        let f = working.fit(&data, &opts, &Weights::uniform(n))?;
        let b1 = f.theta_hat.beta[0];
        rec.metrics.insert("beta1".into(), b1);
        rec.estimates.push(ModelEstimate::from_fit(working.label(), &f));
        if b > 0 {
            let run = bootstrap_from_fit(&data, &working.family(), &opts, f, b, kind, s.boot, Some(vec![]))?;
            let rows = wald_table(&run)?;
            let row = rows
                .iter()
                .find(|r| r.parameter == "beta")
                .ok_or_else(|| Error::Numeric("no beta row".into()))?;
            rec.metrics.insert("se1".into(), row.se);
            rec.metrics.insert("z1".into(), row.z);
            rec.metrics.insert("reject".into(), (row.z.abs() > WALD_CRITICAL) as u8 as f64);
        }
        Ok(())
    })?;
    let beta1 = res.metric("beta1");
    if !beta1.is_empty() {
        res.summary.insert("beta1.mean".into(), mean(&beta1));
        let b01 = truth.beta0[columns[0]];
        if b01 != 0.0 {
            let agree = beta1.iter().filter(|b| b.signum() == b01.signum() && **b != 0.0).count();
            res.summary.insert("sign_agreement".into(), agree as f64 / beta1.len() as f64);
        }
    }
    let rej = res.metric("reject");
    if !rej.is_empty() {
        res.summary.insert("wald_rejection".into(), mean(&rej));
    }
    Ok(res)
}

/// Score test of `γ = 0` on data drawn at each `γ₀` in turn (`reps` per value).
#[allow(clippy::too_many_arguments)]
pub fn score_size_power_study(
    truth: &TruthSpec,
    gammas: &[f64],
    n: usize,
    reps: usize,
    b: usize,
    kind: WeightKind,
    seed: u64,
    options: &FitOptions,
    alpha: f64,
) -> Result<ScenarioResult> {
    if gammas.is_empty() || gammas.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::invalid("gammas must be a nonempty list of nonnegative values"));
    }
    let family = truth.family;
    let total = reps * gammas.len();
    let mut res = run_replicates("score_size_power", truth, n, total, seed, |i| gammas[i / reps], |t, s, rec| {
        let data = generate(t, n, s.data)?;
        let opts = fit_options_with_seed(options, s.fit);
        let st = score_test_gamma(&data, &family, &opts, b, kind, s.boot)?;
        rec.metrics.insert("statistic".into(), st.statistic);
        rec.metrics.insert("finite_difference".into(), st.finite_difference);
        rec.metrics.insert("p_value".into(), st.p_value);
        rec.metrics.insert("reject".into(), (st.p_value <= alpha) as u8 as f64);
        rec.estimates.push(ModelEstimate::from_fit("PH".into(), &st.cox_fit));
        Ok(())
    })?;
    res.reps = reps;
    for g in gammas {
        let rej: Vec<f64> = res
            .ok_replicates()
            .filter(|r| r.gamma0 == *g)
            .filter_map(|r| r.metrics.get("reject").copied())
            .collect();
        if !rej.is_empty() {
            res.summary.insert(format!("rejection[gamma0={g}]"), mean(&rej));
        }
    }
    Ok(res)
}

/// Bootstrap standard errors, Wald coverage and simultaneous band coverage of the
/// true `S(·|z)` for a correctly or incorrectly specified frailty family.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_calibration_study(
    truth: &TruthSpec,
    working: &WorkingModel,
    n: usize,
    reps: usize,
    b: usize,
    kind: WeightKind,
    seed: u64,
    options: &FitOptions,
    z: &[f64],
    grid: &[f64],
    level: f64,
) -> Result<ScenarioResult> {
    if z.len() != truth.beta0.len() {
        return Err(Error::invalid("z must match the covariate dimension"));
    }
    let truth_curve: Vec<f64> = grid.iter().map(|&t| truth.survival(z, t)).collect::<Result<_>>()?;
    let family = working.family();
    let gamma0 = truth.gamma0;
    let mut res = run_replicates("bootstrap_calibration", truth, n, reps, seed, |_| gamma0, |t, s, rec| {
        let data = generate(t, n, s.data)?;
        let opts = fit_options_with_seed(options, s.fit);
        let f = working.fit(&data, &opts, &Weights::uniform(n))?;
        rec.estimates.push(ModelEstimate::from_fit(working.label(), &f));
        let run = bootstrap_from_fit(&data, &family, &opts, f, b, kind, s.boot, Some(vec![]))?;
        let rows = wald_table(&run)?;
        for (j, row) in rows.iter().filter(|r| r.parameter == "beta").enumerate() {
            let b0 = t.beta0[j];
            rec.metrics.insert(format!("beta[{}]", j + 1), row.estimate);
            rec.metrics.insert(format!("se[{}]", j + 1), row.se);
            let covered = (row.estimate - b0).abs() <= WALD_CRITICAL * row.se;
            rec.metrics.insert(format!("covered[{}]", j + 1), covered as u8 as f64);
        }
        if !grid.is_empty() {
            let band = simultaneous_band(&run, &family, &CovariatePath::fixed(z.to_vec()), grid, level)?;
            let inside = truth_curve
                .iter()
                .zip(band.lower.iter().zip(&band.upper))
                .all(|(s0, (lo, hi))| lo <= s0 && s0 <= hi);
            rec.metrics.insert("band_covered".into(), inside as u8 as f64);
            rec.metrics.insert("band_critical".into(), band.critical_value);
        }
        Ok(())
    })?;
    for j in 1..=truth.beta0.len() {
        let est = res.metric(&format!("beta[{j}]"));
        let se = res.metric(&format!("se[{j}]"));
        let cov = res.metric(&format!("covered[{j}]"));
        if est.len() >= 2 {
            let mc = sd(&est);
            res.summary.insert(format!("beta[{j}].mc_sd"), mc);
            res.summary.insert(format!("beta[{j}].mean_se"), mean(&se));
            res.summary.insert(format!("beta[{j}].se_ratio"), mean(&se) / mc);
            res.summary.insert(format!("beta[{j}].wald_coverage"), mean(&cov));
        }
    }
    let band = res.metric("band_covered");
    if !band.is_empty() {
        res.summary.insert("band_coverage".into(), mean(&band));
    }
    Ok(res)
}

/// Two-sided 5% normal critical value.
const WALD_CRITICAL: f64 = 1.959963984540054;

fn default_weights() -> WeightKind {
    WeightKind::Dirichlet
}

fn default_alpha() -> f64 {
    0.05
}

fn default_level() -> f64 {
    0.95
}

/// A study read from a JSON scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "study", rename_all = "snake_case")]
pub enum Scenario {
    Attenuation {
        truth: TruthSpec,
        n: usize,
        reps: usize,
        seed: u64,
        working: Vec<WorkingModel>,
        #[serde(default)]
        fit: FitOptions,
    },
    SignConsistency {
        truth: TruthSpec,
        n: usize,
        reps: usize,
        seed: u64,
        columns: Vec<usize>,
        #[serde(default = "cox_model")]
        working: WorkingModel,
        #[serde(default)]
        b: usize,
        #[serde(default = "default_weights")]
        weights: WeightKind,
        #[serde(default)]
        fit: FitOptions,
    },
    ScoreSizePower {
        truth: TruthSpec,
        gammas: Vec<f64>,
        n: usize,
        reps: usize,
        b: usize,
        #[serde(default = "default_weights")]
        weights: WeightKind,
        seed: u64,
        #[serde(default)]
        fit: FitOptions,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    BootstrapCalibration {
        truth: TruthSpec,
        working: WorkingModel,
        n: usize,
        reps: usize,
        b: usize,
        #[serde(default = "default_weights")]
        weights: WeightKind,
        seed: u64,
        #[serde(default)]
        fit: FitOptions,
        z: Vec<f64>,
        #[serde(default)]
        grid: Vec<f64>,
        #[serde(default = "default_level")]
        level: f64,
    },
}

fn cox_model() -> WorkingModel {
    WorkingModel::Cox
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn run_scenario(sc: &Scenario) -> Result<ScenarioResult> {
    match sc {
        Scenario::Attenuation {
            truth,
            n,
            reps,
            seed,
            working,
            fit,
        } => attenuation_study(truth, *n, *reps, *seed, working, fit),
        Scenario::SignConsistency {
            truth,
            n,
            reps,
            seed,
            columns,
            working,
            b,
            weights,
            fit,
        } => sign_consistency_study(truth, *n, *reps, *seed, columns, working, *b, *weights, fit),
        Scenario::ScoreSizePower {
            truth,
            gammas,
            n,
            reps,
            b,
            weights,
            seed,
            fit,
            alpha,
        } => score_size_power_study(truth, gammas, *n, *reps, *b, *weights, *seed, fit, *alpha),
        Scenario::BootstrapCalibration {
            truth,
            working,
            n,
            reps,
            b,
            weights,
            seed,
            fit,
            z,
            grid,
            level,
        } => bootstrap_calibration_study(
            truth, working, *n, *reps, *b, *weights, *seed, fit, z, grid, *level,
        ),
    }
}
