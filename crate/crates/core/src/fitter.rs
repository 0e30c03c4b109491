//! Maximisation of the profile likelihood `pL(θ) = L(θ, Â_θ)`.
//!
//! A Metropolis–Hastings random walk on `θ = (γ, β)` with an annealed temperature
//! explores the box; the best point it sees is then polished with Nelder–Mead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baseline::{Problem, SolverOptions, StepHazard, Theta, Weights};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::frailty::FrailtyFamily;
use crate::optim::{nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintMode {
    #[serde(rename = "free")]
    Free,
    /// Restrict to γ ≥ 0 and fall back to the Cox fit when γ̂ lands on 0.
    #[serde(rename = "nonneg-cox-fallback")]
    NonnegGammaWithCoxFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub gamma_bounds: (f64, f64),
    pub allow_negative_gamma: bool,
    /// Per-coordinate box for β; `None` means `[-20, 20]` for every coordinate.
    pub beta_box: Option<Vec<(f64, f64)>>,
    pub mh_steps: usize,
    /// Proposal scales for `(γ, β₁, …)`; `None` means 0.2 for γ and 0.1 for each β.
    pub mh_initial_scale: Option<Vec<f64>>,
    pub polish: bool,
    pub seed: u64,
    pub solver: SolverOptions,
    pub constraint_mode: ConstraintMode,
    /// Starting point for the search; defaults to `(0.5, β̂_cox)`.
    pub initial_theta: Option<Theta>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            gamma_bounds: (0.0, 10.0),
            allow_negative_gamma: false,
            beta_box: None,
            mh_steps: 2000,
            mh_initial_scale: None,
            polish: true,
            seed: 0,
            solver: SolverOptions::default(),
            constraint_mode: ConstraintMode::Free,
            initial_theta: None,
        }
    }
}

const DEFAULT_BETA_BOUND: f64 = 20.0;
const GAMMA_START: f64 = 0.5;
const SIMPLEX_DIAMETER_TOL: f64 = 1e-6;
const ADAPT_EVERY: usize = 25;
const TARGET_ACCEPT: f64 = 0.3;
/// γ̂ below this counts as pinned to zero.
const GAMMA_PINNED: f64 = 1e-5;

impl FitOptions {
    pub fn validate(&self, d: usize) -> Result<()> {
        let (lo, hi) = self.gamma_bounds;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::invalid(format!("bad gamma bounds [{lo}, {hi}]")));
        }
        if lo < 0.0 && !self.allow_negative_gamma {
            return Err(Error::invalid(
                "negative gamma lower bound requires allow_negative_gamma",
            ));
        }
        if self.mh_steps < 1 {
            return Err(Error::invalid("mh_steps must be at least 1"));
        }
        if let Some(b) = &self.beta_box {
            if b.len() != d {
                return Err(Error::invalid(format!("beta box has {} entries, need {d}", b.len())));
            }
            if b.iter().any(|(l, h)| !l.is_finite() || !h.is_finite() || l > h) {
                return Err(Error::invalid("beta box bounds must be finite and ordered"));
            }
        }
        if let Some(s) = &self.mh_initial_scale {
            if s.len() != d + 1 || s.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::invalid(format!(
                    "mh_initial_scale needs {} positive entries",
                    d + 1
                )));
            }
        }
        if let Some(t) = &self.initial_theta {
            if t.beta.len() != d || !t.is_finite() {
                return Err(Error::invalid("initial theta has the wrong dimension"));
            }
        }
        Ok(())
    }

    fn beta_box(&self, d: usize) -> Vec<(f64, f64)> {
        self.beta_box
            .clone()
            .unwrap_or_else(|| vec![(-DEFAULT_BETA_BOUND, DEFAULT_BETA_BOUND); d])
    }

    fn effective_gamma_bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.gamma_bounds;
        match self.constraint_mode {
            ConstraintMode::Free => (lo, hi),
            ConstraintMode::NonnegGammaWithCoxFallback => (lo.max(0.0), hi.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub theta: Theta,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: FrailtyFamily,
    pub theta_hat: Theta,
    pub hazard: StepHazard,
    pub loglik: f64,
    pub n_evaluations: usize,
    pub best_trace: Vec<TracePoint>,
    pub converged: bool,
    pub fixed_point_residual: f64,
    /// Fixed-point sweeps used by the final baseline solve.
    pub solver_iterations: usize,
    /// True when γ was not estimated (Cox fit or fixed γ).
    pub gamma_fixed: bool,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `pL(θ)`, or `-∞` when the solver fails or θ is outside the model.
pub fn profile_loglik(
    theta: &Theta,
    family: &FrailtyFamily,
    data: &Dataset,
    w: &Weights,
    solver: &SolverOptions,
) -> f64 {
    match Problem::new(data, family, w, None) {
        Ok(p) => p.profile(theta, solver, None).0,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Cox model: γ frozen at 0, so `Â` is Breslow's estimator at β̂.
pub fn fit_cox(data: &Dataset, options: &FitOptions, w: &Weights) -> Result<FitResult> {
    let opts = FitOptions {
        gamma_bounds: (0.0, 0.0),
        constraint_mode: ConstraintMode::Free,
        ..options.clone()
    };
    fit(data, &FrailtyFamily::gamma(), &opts, w)
}

pub fn fit(data: &Dataset, family: &FrailtyFamily, options: &FitOptions, w: &Weights) -> Result<FitResult> {
    family.validate()?;
    options.validate(data.d())?;
    let problem = Problem::new(data, family, w, None)?;
    let (glo, ghi) = options.effective_gamma_bounds();
    let gamma_fixed = glo == ghi;

    let cox = if gamma_fixed || options.initial_theta.is_some() || !(glo <= 0.0 && 0.0 <= ghi) {
        None
    } else {
        Some(fit_cox(data, options, w)?)
    };

    let mut result = search(&problem, family, options, (glo, ghi), cox.as_ref())?;
    if options.constraint_mode == ConstraintMode::NonnegGammaWithCoxFallback
        && !gamma_fixed
        && result.theta_hat.gamma < GAMMA_PINNED
    {
        let mut c = match cox {
            Some(c) => c,
            None => fit_cox(data, options, w)?,
        };
        c.n_evaluations += result.n_evaluations;
        c.family = *family;
        c.warnings.push("gamma pinned at 0; returning the Cox fit".into());
        result = c;
    }
    Ok(result)
}

struct Evaluator<'a> {
    problem: &'a Problem,
    solver: SolverOptions,
    lower: Vec<f64>,
    upper: Vec<f64>,
    gamma_fixed: Option<f64>,
    evals: usize,
}

impl Evaluator<'_> {
    fn theta(&self, x: &[f64]) -> Theta {
        match self.gamma_fixed {
            Some(g) => Theta::new(g, x.to_vec()),
            None => Theta::from_slice(x),
        }
    }

    fn inside(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| v.clamp(*l, *u))
            .collect()
    }

    fn eval(&mut self, x: &[f64], warm: Option<&[f64]>) -> (f64, Option<Vec<f64>>) {
        self.evals += 1;
        let theta = self.theta(x);
        let (ll, sol) = self.problem.profile(&theta, &self.solver, warm);
        (ll, sol.map(|s| s.increments))
    }
}

fn search(
    problem: &Problem,
    family: &FrailtyFamily,
    options: &FitOptions,
    (glo, ghi): (f64, f64),
    cox: Option<&FitResult>,
) -> Result<FitResult> {
    let d = problem.dim();
    let gamma_fixed = (glo == ghi).then_some(glo);
    let bbox = options.beta_box(d);
    let mut lower: Vec<f64> = bbox.iter().map(|b| b.0).collect();
    let mut upper: Vec<f64> = bbox.iter().map(|b| b.1).collect();
    if gamma_fixed.is_none() {
        lower.insert(0, glo);
        upper.insert(0, ghi);
    }
    let mut ev = Evaluator {
        problem,
        solver: options.solver,
        lower,
        upper,
        gamma_fixed,
        evals: 0,
    };

    // starting point in the free coordinates
    let start_theta = match (&options.initial_theta, cox) {
        (Some(t), _) => t.clone(),
        (None, Some(c)) => Theta::new(GAMMA_START, c.theta_hat.beta.clone()),
        (None, None) => Theta::new(GAMMA_START, vec![0.0; d]),
    };
    let start_full = start_theta.to_vec();
    let mut x = match gamma_fixed {
        Some(_) => start_full[1..].to_vec(),
        None => start_full,
    };
    x = ev.clamp(&x);
    let dim = x.len();

    let scale_full = options.mh_initial_scale.clone().unwrap_or_else(|| {
        let mut s = vec![0.1; d + 1];
        s[0] = 0.2;
        s
    });
    let mut scale: Vec<f64> = match gamma_fixed {
        Some(_) => scale_full[1..].to_vec(),
        None => scale_full,
    };

    let mut trace = Vec::new();
    let (mut cur_ll, mut cur_sol) = ev.eval(&x, None);
    let mut best_x = x.clone();
    let mut best_ll = cur_ll;
    let mut best_sol = cur_sol.clone();
    if cur_ll > f64::NEG_INFINITY {
        trace.push(TracePoint {
            theta: ev.theta(&x),
            loglik: cur_ll,
        });
    }
    // the Cox optimum is a point of the box; seed the incumbent with it
    if let (Some(c), None) = (cox, gamma_fixed) {
        let xc = ev.clamp(&c.theta_hat.to_vec());
        let (ll, sol) = ev.eval(&xc, None);
        if ll > best_ll {
            best_ll = ll;
            best_x = xc;
            best_sol = sol;
            trace.push(TracePoint {
                theta: ev.theta(&best_x),
                loglik: best_ll,
            });
        }
    }

    let n = problem.n();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let steps = if dim == 0 { 0 } else { options.mh_steps };
    let mut accepted_in_batch = 0usize;
    for step in 0..steps {
        let temp = if steps > 1 {
            0.1f64.powf(step as f64 / (steps - 1) as f64)
        } else {
            1.0
        };
        let prop: Vec<f64> = x
            .iter()
            .zip(&scale)
            .map(|(xi, s)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                xi + s * z
            })
            .collect();
        let u: f64 = rand::Rng::random(&mut rng);
        if ev.inside(&prop) {
            let (ll, sol) = ev.eval(&prop, cur_sol.as_deref());
            let log_ratio = n * (ll - cur_ll) / temp;
            let accept = ll > f64::NEG_INFINITY
                && (cur_ll == f64::NEG_INFINITY || log_ratio >= 0.0 || u.ln() < log_ratio);
            if accept {
                x = prop;
                cur_ll = ll;
                cur_sol = sol;
                accepted_in_batch += 1;
                if cur_ll > best_ll + 1e-13 {
                    best_ll = cur_ll;
                    best_x = x.clone();
                    best_sol = cur_sol.clone();
                    trace.push(TracePoint {
                        theta: ev.theta(&x),
                        loglik: cur_ll,
                    });
                }
            }
        }
        if (step + 1) % ADAPT_EVERY == 0 {
            let rate = accepted_in_batch as f64 / ADAPT_EVERY as f64;
            let factor = (2.0 * (rate - TARGET_ACCEPT)).exp();
            scale.iter_mut().for_each(|s| *s *= factor);
            accepted_in_batch = 0;
        }
    }

    if best_ll == f64::NEG_INFINITY {
        return Err(Error::Unfittable);
    }

    let mut nm_converged = true;
    if options.polish && dim > 0 {
        let step: Vec<f64> = best_x
            .iter()
            .zip(ev.lower.iter().zip(&ev.upper))
            .map(|(v, (l, u))| {
                let s = 0.05;
                if v + s <= *u {
                    s
                } else if v - s >= *l {
                    -s
                } else {
                    (u - l) / 2.0
                }
            })
            .collect();
        let warm = best_sol.clone();
        let ev_cell = std::cell::RefCell::new(&mut ev);
        let mut last_sol = warm;
        let objective = |xs: &[f64]| -> f64 {
            let mut e = ev_cell.borrow_mut();
            let xc = e.clamp(xs);
            let outside: f64 = xs.iter().zip(&xc).map(|(a, b)| (a - b).abs()).sum();
            let (ll, sol) = e.eval(&xc, last_sol.as_deref());
            if sol.is_some() {
                last_sol = sol;
            }
            -ll + outside
        };
        let nm = nelder_mead(
            objective,
            &best_x,
            &NelderMeadOptions {
                step,
                diameter_tol: SIMPLEX_DIAMETER_TOL,
                max_evals: 400 * (dim + 1),
            },
        );
        nm_converged = nm.converged;
        let xn = ev.clamp(&nm.x);
        if -nm.value >= best_ll {
            best_x = xn;
            best_ll = -nm.value;
            trace.push(TracePoint {
                theta: ev.theta(&best_x),
                loglik: best_ll,
            });
        }
    }

    // final state from a cold start so the result does not depend on the search path
    let theta_hat = ev.theta(&best_x);
    let sol = problem.solve(&theta_hat, &options.solver, None)?;
    let mut scratch = problem.scratch(&theta_hat);
    let loglik = problem.loglik(&theta_hat, &sol.increments, &mut scratch);
    let residual = problem.residual(&theta_hat, &sol).unwrap_or(f64::INFINITY);

    let mut warnings = Vec::new();
    let mut converged = nm_converged;
    if !nm_converged {
        warnings.push("simplex polish hit its evaluation cap".into());
    }
    if gamma_fixed.is_none() && ghi > glo && theta_hat.gamma >= ghi - 1e-6 {
        converged = false;
        warnings.push(format!("gamma pinned at its upper bound {ghi}"));
    }
    if !(residual < 10.0 * options.solver.tol) {
        converged = false;
        warnings.push(format!("fixed-point residual {residual:e} above tolerance"));
    }

    let mut n_evaluations = ev.evals;
    if let Some(c) = cox {
        n_evaluations += c.n_evaluations;
    }
    Ok(FitResult {
        family: *family,
        hazard: problem.hazard(sol.increments.clone()),
        theta_hat,
        loglik,
        n_evaluations,
        best_trace: trace,
        converged,
        fixed_point_residual: residual,
        solver_iterations: sol.iterations,
        gamma_fixed: gamma_fixed.is_some(),
        warnings,
    })
}
