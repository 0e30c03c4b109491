//! The profiled baseline hazard.
//!
//! For fixed `θ = (γ, β)` the likelihood is maximised over step hazards `A` that jump
//! only at observed failure times. The maximiser solves the fixed point
//!
//! ```text
//! ΔA(t_k) = P_n[w dN(t_k)] / (J(t_k) + ρ)
//! J(s)    = P_n[ w Y(s) e^{β'Z(s)} ( Ġ(H(V)) - δ G̈(H(V)) / Ġ(H(V)) ) ]
//! ```
//!
//! with `H(t) = ∫₀ᵗ e^{β'Z} dA`. `ρ` is zero unless `γ < 0` and the constraint
//! `A(τ) ≤ ε₀⁻¹(|γ|) / K₀` binds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{grid_from_times, Dataset, Subject};
use crate::error::{Error, Result};
use crate::frailty::{FamilyKind, FrailtyFamily, TDerivs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub gamma: f64,
    pub beta: Vec<f64>,
}

impl Theta {
    pub fn new(gamma: f64, beta: Vec<f64>) -> Self {
        Theta { gamma, beta }
    }

    pub fn cox(beta: Vec<f64>) -> Self {
        Theta { gamma: 0.0, beta }
    }

    /// `(γ, β₁, …, β_d)`
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.beta.len());
        v.push(self.gamma);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Theta {
            gamma: x[0],
            beta: x[1..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.is_finite() && self.beta.iter().all(|b| b.is_finite())
    }
}

/// Baseline cumulative hazard as a right-continuous step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepHazard {
    pub times: Vec<f64>,
    pub increments: Vec<f64>,
}

impl StepHazard {
    pub fn new(times: Vec<f64>, increments: Vec<f64>) -> Result<Self> {
        if times.len() != increments.len() {
            return Err(Error::invalid("step hazard: times and increments differ in length"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("step hazard: times must be strictly increasing"));
        }
        if increments.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid("step hazard: increments must be finite and nonnegative"));
        }
        Ok(StepHazard { times, increments })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `A(t)`
    pub fn value(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        self.increments[..k].iter().sum()
    }

    /// `ΔA(t)`; zero off the support.
    pub fn jump_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x < t);
        if k < self.times.len() && self.times[k] == t {
            self.increments[k]
        } else {
            0.0
        }
    }

    pub fn cumulative(&self) -> Vec<f64> {
        self.increments
            .iter()
            .scan(0.0, |acc, x| {
                *acc += x;
                Some(*acc)
            })
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.increments.iter().sum()
    }

    /// CSV `time,increment,cumulative`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "increment", "cumulative"])?;
        for ((t, dx), c) in self.times.iter().zip(&self.increments).zip(self.cumulative()) {
            w.write_record([t.to_string(), dx.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let mut times = Vec::new();
        let mut increments = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        line: i + 2,
                        msg: "malformed baseline row".into(),
                    })
            };
            times.push(parse(0)?);
            increments.push(parse(1)?);
        }
        StepHazard::new(times, increments)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psi {
    pub theta: Theta,
    pub hazard: StepHazard,
}

/// Standardised nonnegative observation weights (mean exactly 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn uniform(n: usize) -> Self {
        Weights(vec![1.0; n])
    }

    /// Divides by the mean. Rejects negative, non-finite and all-zero inputs.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::invalid("weights: empty"));
        }
        if raw.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if !(mean > 0.0) {
            return Err(Error::invalid("weights are all zero"));
        }
        Ok(Weights(raw.into_iter().map(|w| w / mean).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.0.iter().all(|&w| w == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Sup-norm tolerance on successive increments (relative for increments above one).
    pub tol: f64,
    pub max_iter: usize,
    /// Squared-extrapolation acceleration of the fixed point.
    pub accelerate: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 5000,
            accelerate: true,
        }
    }
}

/// `H(t) = Σ_{t_k ≤ t} e^{β'Z(t_k)} ΔA(t_k)`.
pub fn cumulative_h(psi: &Psi, subject: &Subject, t: f64) -> f64 {
    let a = &psi.hazard;
    let k_end = a.times.partition_point(|&x| x <= t);
    (0..k_end)
        .map(|k| {
            let eta = dot(&psi.theta.beta, subject.z.at(a.times[k]));
            eta.exp() * a.increments[k]
        })
        .sum()
}

/// `J(s)` by direct summation over subjects (general transform form).
pub fn weighted_j(
    psi: &Psi,
    family: &FrailtyFamily,
    data: &Dataset,
    w: &Weights,
    s: f64,
) -> Result<f64> {
    check_weights(data, w)?;
    let mut total = 0.0;
    for (subj, &wi) in data.subjects().iter().zip(w.as_slice()) {
        let h = cumulative_h(psi, subj, subj.time);
        let d = family
            .t_derivs(psi.theta.gamma, h)
            .ok_or_else(|| Error::InvalidTheta(format!("transform undefined at H = {h}")))?;
        if !subj.at_risk(s) {
            continue;
        }
        let factor = d.gdot - if subj.event { d.gddot / d.gdot } else { 0.0 };
        total += wi * dot(&psi.theta.beta, subj.z.at(s)).exp() * factor;
    }
    Ok(total / data.n() as f64)
}

/// Profiled baseline hazard `Â_θ`.
pub fn solve_baseline(
    theta: &Theta,
    family: &FrailtyFamily,
    data: &Dataset,
    w: &Weights,
    opts: &SolverOptions,
) -> Result<StepHazard> {
    let problem = Problem::new(data, family, w, None)?;
    let sol = problem.solve(theta, opts, None)?;
    Ok(problem.hazard(sol.increments))
}

/// Nonparametric log-likelihood with `ΔA` in place of the density. `-∞` when `ψ` is
/// outside the model (domain violation, `G < 0`, or an event without mass).
pub fn log_likelihood(psi: &Psi, family: &FrailtyFamily, data: &Dataset, w: &Weights) -> f64 {
    if check_weights(data, w).is_err() || family.validate().is_err() {
        return f64::NEG_INFINITY;
    }
    if psi.theta.beta.len() != data.d() || !psi.theta.is_finite() {
        return f64::NEG_INFINITY;
    }
    match Problem::new(data, family, w, Some(&psi.hazard.times)) {
        Ok(p) => {
            let mut scratch = p.scratch(&psi.theta);
            p.loglik(&psi.theta, &psi.hazard.increments, &mut scratch)
        }
        Err(_) => f64::NEG_INFINITY,
    }
}

fn check_weights(data: &Dataset, w: &Weights) -> Result<()> {
    if w.len() != data.n() {
        return Err(Error::invalid(format!(
            "{} weights for {} subjects",
            w.len(),
            data.n()
        )));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One covariate segment mapped onto a half-open range of support indices.
#[derive(Debug, Clone, Copy)]
struct Seg {
    k0: u32,
    k1: u32,
    row: u32,
}

#[derive(Debug, Clone)]
struct Unit {
    w: f64,
    event: bool,
    /// Support index of the event time (events only).
    event_k: Option<u32>,
    /// Covariate row at the observed time (for `β'Z(V)`).
    event_row: u32,
    segs: std::ops::Range<usize>,
}

/// A dataset, family and weight vector compiled for repeated fixed-point solves.
///
/// Subjects with zero weight are dropped. Covariate segments are mapped to ranges
/// of support indices so that `H` and `J` cost O(segments + support) per sweep.
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    family: FrailtyFamily,
    times: Vec<f64>,
    /// `P_n[w dN(t_k)]`
    dn: Vec<f64>,
    units: Vec<Unit>,
    segs: Vec<Seg>,
    /// Flattened covariate rows, `d` values each.
    rows: Vec<f64>,
    d: usize,
    n: f64,
}

/// Per-θ cache: exponentiated linear predictors per covariate row.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    risk: Vec<f64>,
    eta: Vec<f64>,
    h: Vec<f64>,
    cum: Vec<f64>,
    diff: Vec<f64>,
}

/// Converged fixed point.
#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub increments: Vec<f64>,
    pub iterations: usize,
    pub rho: f64,
}

impl Problem {
    pub fn new(
        data: &Dataset,
        family: &FrailtyFamily,
        w: &Weights,
        support: Option<&[f64]>,
    ) -> Result<Self> {
        family.validate()?;
        check_weights(data, w)?;
        let d = data.d();
        let n = data.n() as f64;
        let weights = w.as_slice();
        let times: Vec<f64> = match support {
            Some(t) => t.to_vec(),
            None => {
                grid_from_times(
                    data.subjects()
                        .iter()
                        .zip(weights)
                        .filter(|(s, &wi)| s.event && wi > 0.0)
                        .map(|(s, _)| s.time),
                )
                .times
            }
        };
        let count_le = |t: f64| times.partition_point(|&x| x <= t) as u32;
        let mut dn = vec![0.0; times.len()];
        let mut units = Vec::new();
        let mut segs = Vec::new();
        let mut rows = Vec::new();
        for (s, &wi) in data.subjects().iter().zip(weights) {
            if wi == 0.0 {
                continue;
            }
            let event_k = if s.event {
                let k = times.partition_point(|&x| x < s.time);
                if k < times.len() && times[k] == s.time {
                    dn[k] += wi / n;
                    Some(k as u32)
                } else {
                    None
                }
            } else {
                None
            };
            let m = count_le(s.time);
            let bps = s.z.breakpoints();
            let vals = s.z.values();
            let first = segs.len();
            let mut last_row = 0;
            for (j, v) in vals.iter().enumerate() {
                let row = (rows.len() / d.max(1)) as u32;
                rows.extend_from_slice(v);
                if d == 0 {
                    // keep one logical row per segment even without covariates
                    rows.push(0.0);
                }
                let k0 = count_le(bps[j]).min(m);
                let k1 = if j + 1 < vals.len() { count_le(bps[j + 1]).min(m) } else { m };
                last_row = row;
                if k1 > k0 {
                    segs.push(Seg { k0, k1, row });
                }
            }
            units.push(Unit {
                w: wi,
                event: s.event,
                event_k,
                event_row: last_row,
                segs: first..segs.len(),
            });
        }
        Ok(Problem {
            family: *family,
            times,
            dn,
            units,
            segs,
            rows,
            d,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    pub fn hazard(&self, increments: Vec<f64>) -> StepHazard {
        StepHazard {
            times: self.times.clone(),
            increments,
        }
    }

    fn row_stride(&self) -> usize {
        self.d.max(1)
    }

    pub fn scratch(&self, theta: &Theta) -> Scratch {
        let stride = self.row_stride();
        let nrows = self.rows.len() / stride;
        let mut eta = Vec::with_capacity(nrows);
        for r in 0..nrows {
            let z = &self.rows[r * stride..r * stride + self.d];
            eta.push(dot(&theta.beta, z));
        }
        Scratch {
            risk: eta.iter().map(|e| e.exp()).collect(),
            eta,
            h: vec![0.0; self.units.len()],
            cum: vec![0.0; self.times.len() + 1],
            diff: vec![0.0; self.times.len() + 1],
        }
    }

    /// `K₀`: largest of 1 and `e^{±β'Z}` over the covariate rows in play.
    fn k0(&self, scratch: &Scratch) -> f64 {
        scratch
            .eta
            .iter()
            .fold(0.0_f64, |m, e| m.max(e.abs()))
            .exp()
    }

    /// Fills `scratch.h` with `H_i(V_i)`.
    fn compute_h(&self, inc: &[f64], scratch: &mut Scratch) {
        let cum = &mut scratch.cum;
        cum[0] = 0.0;
        for (k, x) in inc.iter().enumerate() {
            cum[k + 1] = cum[k] + x;
        }
        for (i, u) in self.units.iter().enumerate() {
            let mut h = 0.0;
            for s in &self.segs[u.segs.clone()] {
                h += scratch.risk[s.row as usize] * (cum[s.k1 as usize] - cum[s.k0 as usize]);
            }
            scratch.h[i] = h;
        }
    }

    /// `Ġ - δ G̈/Ġ` at `H`. Gamma and inverse Gaussian use their closed forms.
    #[inline]
    fn kernel(&self, gamma: f64, h: f64, event: bool) -> Option<f64> {
        match self.family.kind {
            FamilyKind::Gamma => {
                let den = 1.0 + gamma * h;
                (den > 0.0).then(|| (1.0 + if event { gamma } else { 0.0 }) / den)
            }
            FamilyKind::InverseGaussian => {
                let s = 1.0 + 2.0 * gamma * h;
                (s > 0.0).then(|| (s.sqrt() + if event { gamma } else { 0.0 }) / s)
            }
            _ => {
                let TDerivs { gdot, gddot, .. } = self.family.t_derivs(gamma, h)?;
                Some(gdot - if event { gddot / gdot } else { 0.0 })
            }
        }
    }

    /// One sweep of the fixed-point map. `None` if the transform leaves its domain.
    pub fn step(
        &self,
        gamma: f64,
        rho: f64,
        inc: &[f64],
        scratch: &mut Scratch,
        out: &mut [f64],
    ) -> Option<()> {
        self.compute_h(inc, scratch);
        let diff = &mut scratch.diff;
        diff.iter_mut().for_each(|x| *x = 0.0);
        for (i, u) in self.units.iter().enumerate() {
            let kappa = self.kernel(gamma, scratch.h[i], u.event)?;
            if !kappa.is_finite() {
                return None;
            }
            let c = u.w * kappa;
            for s in &self.segs[u.segs.clone()] {
                let v = c * scratch.risk[s.row as usize];
                diff[s.k0 as usize] += v;
                diff[s.k1 as usize] -= v;
            }
        }
        let mut run = 0.0;
        for k in 0..self.times.len() {
            run += diff[k];
            let denom = run / self.n + rho;
            if !(denom > 0.0) {
                return None;
            }
            out[k] = self.dn[k] / denom;
        }
        Some(())
    }

    pub fn initial(&self) -> Vec<f64> {
        self.dn.clone()
    }

    /// Fixed point for a given `ρ`, started from `init` (or the empirical event measure).
    fn iterate(
        &self,
        theta: &Theta,
        rho: f64,
        opts: &SolverOptions,
        init: Option<&[f64]>,
        scratch: &mut Scratch,
    ) -> Result<Solution> {
        let k = self.times.len();
        let mut x0 = match init {
            Some(v) if v.len() == k && v.iter().all(|x| *x > 0.0) => v.to_vec(),
            _ => self.initial(),
        };
        let mut x1 = vec![0.0; k];
        let mut x2 = vec![0.0; k];
        let mut xp = vec![0.0; k];
        let invalid = || Error::InvalidTheta(format!("transform leaves its domain at gamma = {}", theta.gamma));
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        let mut step_max = 1.0f64;
        while iterations < opts.max_iter {
            self.step(theta.gamma, rho, &x0, scratch, &mut x1).ok_or_else(invalid)?;
            iterations += 1;
            residual = sup_diff(&x0, &x1);
            if residual < opts.tol {
                return Ok(Solution {
                    increments: x1,
                    iterations,
                    rho,
                });
            }
            if !opts.accelerate {
                std::mem::swap(&mut x0, &mut x1);
                continue;
            }
            // squared extrapolation (SQUAREM, steplength variant 3)
            if self.step(theta.gamma, rho, &x1, scratch, &mut x2).is_none() {
                std::mem::swap(&mut x0, &mut x1);
                continue;
            }
            iterations += 1;
            let (mut rr, mut vv) = (0.0, 0.0);
            for j in 0..k {
                let r = x1[j] - x0[j];
                let v = x2[j] - 2.0 * x1[j] + x0[j];
                rr += r * r;
                vv += v * v;
            }
            let alpha = if vv > 0.0 { -(rr / vv).sqrt() } else { -1.0 };
            let alpha = alpha.clamp(-step_max, -1.0);
            let plain = sup_diff(&x1, &x2);
            let mut ok = true;
            for j in 0..k {
                let r = x1[j] - x0[j];
                let v = x2[j] - 2.0 * x1[j] + x0[j];
                xp[j] = x0[j] - 2.0 * alpha * r + alpha * alpha * v;
                ok &= xp[j] > 0.0 && xp[j].is_finite();
            }
            // keep the extrapolation only if it does not worsen the residual
            if ok && self.step(theta.gamma, rho, &xp, scratch, &mut x1).is_some() {
                iterations += 1;
                if sup_diff(&xp, &x1) <= plain {
                    if alpha == -step_max {
                        step_max *= 4.0;
                    }
                    std::mem::swap(&mut x0, &mut x1);
                    continue;
                }
            }
            step_max = (step_max / 4.0).max(1.0);
            std::mem::swap(&mut x0, &mut x2);
        }
        Err(Error::NonConvergence {
            iterations,
            residual,
            last: Box::new(self.hazard(x0)),
        })
    }

    /// `Â_θ`, handling the negative-γ constraint through `ρ`.
    pub fn solve(&self, theta: &Theta, opts: &SolverOptions, init: Option<&[f64]>) -> Result<Solution> {
        if !theta.is_finite() {
            return Err(Error::InvalidTheta("non-finite theta".into()));
        }
        if theta.beta.len() != self.d {
            return Err(Error::invalid(format!(
                "beta has dimension {}, data has {}",
                theta.beta.len(),
                self.d
            )));
        }
        if self.times.is_empty() {
            return Err(Error::invalid("no weighted events"));
        }
        let mut scratch = self.scratch(theta);
        // the starting point itself must be admissible
        self.compute_h(&self.dn, &mut scratch);
        if scratch
            .h
            .iter()
            .any(|&h| !crate::frailty::domain_check(&self.family, theta.gamma, h))
        {
            return Err(Error::InvalidTheta(format!(
                "initial hazard outside the transform domain at gamma = {}",
                theta.gamma
            )));
        }
        if theta.gamma >= 0.0 {
            return self.iterate(theta, 0.0, opts, init, &mut scratch);
        }

        let bound = self
            .family
            .epsilon0_inverse(-theta.gamma)
            .ok_or_else(|| Error::InvalidTheta(format!("gamma = {} below the extension", theta.gamma)))?
            / self.k0(&scratch);
        if let Ok(sol) = self.iterate(theta, 0.0, opts, init, &mut scratch) {
            if sol.increments.iter().sum::<f64>() <= bound {
                return Ok(sol);
            }
        }
        // constrained: find ρ > 0 with A_ρ(τ) = bound
        let total_at = |rho: f64, scratch: &mut Scratch| -> Option<Solution> {
            self.iterate(theta, rho, opts, None, scratch).ok()
        };
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut best = None;
        for _ in 0..200 {
            match total_at(hi, &mut scratch) {
                Some(sol) if sol.increments.iter().sum::<f64>() <= bound => {
                    best = Some(sol);
                    break;
                }
                _ => {
                    lo = hi;
                    hi *= 2.0;
                }
            }
        }
        let mut best = best.ok_or_else(|| Error::InvalidTheta("no admissible rho".into()))?;
        for _ in 0..200 {
            let gap = bound - best.increments.iter().sum::<f64>();
            if gap.abs() < 1e-12 || hi - lo < 1e-15 * hi.max(1.0) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            match total_at(mid, &mut scratch) {
                Some(sol) if sol.increments.iter().sum::<f64>() <= bound => {
                    hi = mid;
                    best = sol;
                }
                _ => lo = mid,
            }
        }
        Ok(best)
    }

    /// Log-likelihood at `(θ, inc)` on this problem's support.
    pub fn loglik(&self, theta: &Theta, inc: &[f64], scratch: &mut Scratch) -> f64 {
        if inc.len() != self.times.len() {
            return f64::NEG_INFINITY;
        }
        self.compute_h(inc, scratch);
        let gamma = theta.gamma;
        let mut total = 0.0;
        for (i, u) in self.units.iter().enumerate() {
            let h = scratch.h[i];
            let (g, log_gdot) = match self.family.kind {
                FamilyKind::Gamma if gamma.abs() >= 1e-8 => {
                    let x = gamma * h;
                    if !(x > -1.0) {
                        return f64::NEG_INFINITY;
                    }
                    let l = x.ln_1p();
                    (l / gamma, -l)
                }
                _ => match self.family.t_derivs(gamma, h) {
                    Some(d) if d.gdot > 0.0 => (d.g, d.gdot.ln()),
                    _ => return f64::NEG_INFINITY,
                },
            };
            if !(g >= 0.0) {
                return f64::NEG_INFINITY;
            }
            let mut c = -g;
            if u.event {
                let jump = match u.event_k {
                    Some(k) => inc[k as usize],
                    None => 0.0,
                };
                if !(jump > 0.0) {
                    return f64::NEG_INFINITY;
                }
                c += log_gdot + scratch.eta[u.event_row as usize] + jump.ln();
            }
            total += u.w * c;
        }
        total / self.n
    }

    /// Solve then evaluate; `-∞` on any failure.
    pub fn profile(&self, theta: &Theta, opts: &SolverOptions, init: Option<&[f64]>) -> (f64, Option<Solution>) {
        match self.solve(theta, opts, init) {
            Ok(sol) => {
                let mut scratch = self.scratch(theta);
                let ll = self.loglik(theta, &sol.increments, &mut scratch);
                (ll, Some(sol))
            }
            Err(_) => (f64::NEG_INFINITY, None),
        }
    }

    /// `max_k |ΔA_k (J_k + ρ) - P_n[w dN_k]|` at a candidate solution.
    pub fn residual(&self, theta: &Theta, sol: &Solution) -> Option<f64> {
        let mut scratch = self.scratch(theta);
        let mut next = vec![0.0; self.times.len()];
        self.step(theta.gamma, sol.rho, &sol.increments, &mut scratch, &mut next)?;
        // next = dn / (J + ρ)  =>  J + ρ = dn / next
        Some(
            sol.increments
                .iter()
                .zip(&next)
                .zip(&self.dn)
                .map(|((a, nx), dn)| if *dn > 0.0 { (a * dn / nx - dn).abs() } else { 0.0 })
                .fold(0.0, f64::max),
        )
    }

    /// `(1/n) Σ w_i (H_i²/2 - δ_i H_i)`: the γ-score at γ = 0.
    pub fn gamma_score_at_zero(&self, theta: &Theta, inc: &[f64]) -> f64 {
        let mut scratch = self.scratch(theta);
        self.compute_h(inc, &mut scratch);
        self.units
            .iter()
            .zip(&scratch.h)
            .map(|(u, &h)| u.w * (h * h / 2.0 - if u.event { h } else { 0.0 }))
            .sum::<f64>()
            / self.n
    }
}

/// Sup-norm change, relative once an increment exceeds one. Large tail increments
/// sit where the map is nearly flat and cannot be pinned down absolutely.
fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Plain (unaccelerated) fixed-point iterates from the empirical event measure,
/// for inspecting the path of the solver. Stops early on a domain violation.
pub fn fixed_point_path(
    theta: &Theta,
    family: &FrailtyFamily,
    data: &Dataset,
    w: &Weights,
    sweeps: usize,
) -> Result<Vec<StepHazard>> {
    let p = Problem::new(data, family, w, None)?;
    let mut scratch = p.scratch(theta);
    let mut cur = p.initial();
    let mut out = vec![p.hazard(cur.clone())];
    let mut next = vec![0.0; cur.len()];
    for _ in 0..sweeps {
        if p.step(theta.gamma, 0.0, &cur, &mut scratch, &mut next).is_none() {
            break;
        }
        std::mem::swap(&mut cur, &mut next);
        out.push(p.hazard(cur.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariatePath;

    fn three_events() -> Dataset {
        Dataset::from_columns(&[1.0, 2.0, 3.0], &[true, true, true], &[vec![0.0], vec![0.0], vec![0.0]], None)
            .unwrap()
    }

    fn psi(gamma: f64, beta: Vec<f64>, times: Vec<f64>, inc: Vec<f64>) -> Psi {
        Psi {
            theta: Theta::new(gamma, beta),
            hazard: StepHazard::new(times, inc).unwrap(),
        }
    }

    #[test]
    fn cumulative_h_examples() {
        let s = Subject::new("a", 2.0, true, CovariatePath::fixed(vec![1.0]));
        let p = psi(0.0, vec![0.0], vec![1.0, 2.0], vec![1.0 / 3.0, 0.5]);
        assert!((cumulative_h(&p, &s, 2.0) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(cumulative_h(&p, &s, 0.5), 0.0);
        let p = psi(0.0, vec![std::f64::consts::LN_2], vec![1.0, 2.0], vec![1.0 / 3.0, 0.5]);
        assert!((cumulative_h(&p, &s, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_j_examples() {
        let data = Dataset::from_columns(&[1.0], &[true], &[vec![0.0]], None).unwrap();
        let p = psi(1.0, vec![0.0], vec![1.0], vec![1.0]);
        let w = Weights::uniform(1);
        let j = weighted_j(&p, &crate::FrailtyFamily::gamma(), &data, &w, 0.5).unwrap();
        assert!((j - 1.0).abs() < 1e-15);
        assert_eq!(weighted_j(&p, &crate::FrailtyFamily::gamma(), &data, &w, 5.0).unwrap(), 0.0);
        // γ = 0: Breslow denominator
        let data = three_events();
        let p = psi(0.0, vec![0.3], vec![1.0, 2.0, 3.0], vec![0.2, 0.2, 0.2]);
        let j = weighted_j(&p, &crate::FrailtyFamily::gamma(), &data, &Weights::uniform(3), 1.5).unwrap();
        assert!((j - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nelson_aalen_reduction() {
        let data = three_events();
        let a = solve_baseline(
            &Theta::cox(vec![0.0]),
            &crate::FrailtyFamily::gamma(),
            &data,
            &Weights::uniform(3),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(a.times, [1.0, 2.0, 3.0]);
        for (x, want) in a.increments.iter().zip([1.0 / 3.0, 0.5, 1.0]) {
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn breslow_two_subjects() {
        let data = Dataset::from_columns(&[1.0, 2.0], &[true, true], &[vec![0.0], vec![2f64.ln()]], None)
            .unwrap();
        let a = solve_baseline(
            &Theta::cox(vec![1.0]),
            &crate::FrailtyFamily::gamma(),
            &data,
            &Weights::uniform(2),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!((a.increments[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.increments[1] - 0.5).abs() < 1e-12);
        assert!((a.total() - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn loglik_examples() {
        let fam = crate::FrailtyFamily::gamma();
        let censored = Dataset::from_columns(&[2.0, 1.0], &[false, true], &[vec![0.0], vec![0.0]], None).unwrap();
        // subject 1: censored with A(V) = c = 0.7; isolate it with zero weight on the other
        let w = Weights::new(vec![1.0, 0.0]).unwrap();
        let p = psi(0.0, vec![0.0], vec![1.0], vec![0.7]);
        let ll = log_likelihood(&p, &fam, &censored, &w);
        assert!((ll - (-0.7 * 2.0) / 2.0).abs() < 1e-15, "{ll}");

        let one = Dataset::from_columns(&[1.0], &[true], &[vec![0.0]], None).unwrap();
        let p = psi(0.0, vec![0.0], vec![1.0], vec![0.4]);
        let ll = log_likelihood(&p, &fam, &one, &Weights::uniform(1));
        assert!((ll - (0.4f64.ln() - 0.4)).abs() < 1e-15);

        let p = psi(1.0, vec![0.0], vec![1.0], vec![1.0]);
        let ll = log_likelihood(&p, &fam, &one, &Weights::uniform(1));
        assert!((ll + 2.0 * std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn loglik_sentinels() {
        let fam = crate::FrailtyFamily::gamma();
        let one = Dataset::from_columns(&[1.0], &[true], &[vec![0.0]], None).unwrap();
        // event without mass
        let p = psi(0.0, vec![0.0], vec![0.5], vec![0.4]);
        assert_eq!(log_likelihood(&p, &fam, &one, &Weights::uniform(1)), f64::NEG_INFINITY);
        // domain violation: 1 + γH <= 0
        let p = psi(-0.5, vec![0.0], vec![1.0], vec![3.0]);
        assert_eq!(log_likelihood(&p, &fam, &one, &Weights::uniform(1)), f64::NEG_INFINITY);
    }

    #[test]
    fn weights_standardise() {
        let w = Weights::new(vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(w.as_slice(), [1.0; 4]);
        assert!(Weights::new(vec![0.0, 0.0]).is_err());
        assert!(Weights::new(vec![1.0, -1.0]).is_err());
        let w = Weights::new(vec![0.3, 1.7, 4.1]).unwrap();
        let mean = w.as_slice().iter().sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_varying_covariate_enters_h() {
        // z = 0 on (0, 1], z = 1 on (1, 3]
        let z = CovariatePath::piecewise(vec![0.0, 1.0], vec![vec![0.0], vec![1.0]]).unwrap();
        let s = Subject::new("a", 3.0, true, z);
        let p = psi(0.0, vec![2f64.ln()], vec![1.0, 2.0, 3.0], vec![0.1, 0.2, 0.3]);
        let h = cumulative_h(&p, &s, 3.0);
        assert!((h - (0.1 + 2.0 * 0.2 + 2.0 * 0.3)).abs() < 1e-15);
        // compiled path agrees with direct sum
        let data = Dataset::new(vec![s], None, None).unwrap();
        let prob = Problem::new(&data, &crate::FrailtyFamily::gamma(), &Weights::uniform(1), Some(&p.hazard.times))
            .unwrap();
        let mut sc = prob.scratch(&p.theta);
        prob.compute_h(&p.hazard.increments, &mut sc);
        assert!((sc.h[0] - h).abs() < 1e-15);
    }

    #[test]
    fn fast_kernels_match_general_form() {
        for fam in [crate::FrailtyFamily::gamma(), crate::FrailtyFamily::inverse_gaussian()] {
            let general = crate::FrailtyFamily::igg(fam.igg_alpha().unwrap()).unwrap();
            let data = three_events();
            let w = Weights::uniform(3);
            let p1 = Problem::new(&data, &fam, &w, None).unwrap();
            let p2 = Problem::new(&data, &general, &w, None).unwrap();
            for gamma in [-0.2, 0.3, 1.7] {
                for h in [0.0, 0.4, 2.2] {
                    for ev in [false, true] {
                        let a = p1.kernel(gamma, h, ev).unwrap();
                        let b = p2.kernel(gamma, h, ev).unwrap();
                        assert!((a - b).abs() < 1e-13 * (1.0 + b.abs()), "{fam:?} {gamma} {h} {ev}: {a} vs {b}");
                    }
                }
            }
        }
    }
}
