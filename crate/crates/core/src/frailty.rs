//! Frailty Laplace transforms `Λ_γ(t) = E[exp(-W t)]` and the derivatives of
//! `G_γ = -log Λ_γ` needed by the likelihood, the baseline solver and the score test.
//!
//! Supported families: gamma, inverse Gaussian, the IGG(α) power family that contains
//! both, and the log-normal (evaluated by Gauss–Hermite quadrature). Every family is
//! parameterised so that `γ = 0` is the Cox model (`Λ_0(t) = e^{-t}`) and, for
//! `γ ≥ 0`, `-G̈_γ(0+)` is the frailty variance.
//!
//! Negative `γ` is an analytic extension. It is only defined on a family-specific
//! region which [`domain_check`] decides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::NormalRule;

/// Below this |γ| the closed forms are replaced by their `γ → 0` limits.
const GAMMA_ZERO: f64 = 1e-8;
/// Below this |γt/(1-α)| the γ-derivative uses a power series instead of a difference.
const SERIES_CUTOFF: f64 = 1e-3;

pub const DEFAULT_LOGNORMAL_NODES: usize = 40;
pub const MIN_LOGNORMAL_NODES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyKind {
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "ig")]
    InverseGaussian,
    #[serde(rename = "igg")]
    Igg,
    #[serde(rename = "lognormal")]
    LogNormal,
}

/// A posited (or true) frailty family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrailtyFamily {
    pub kind: FamilyKind,
    /// Shape constant of IGG(α); ignored by the other kinds.
    #[serde(default)]
    pub alpha: f64,
    /// Gauss–Hermite node count; only used by the log-normal. The default 40 keeps
    /// `Λ` within 1e-8 for γ ≤ 1 and t ≤ 50; heavier frailties need more nodes
    /// (about 120 for 1e-7 at γ = 4.6).
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
}

fn default_nodes() -> usize {
    DEFAULT_LOGNORMAL_NODES
}

/// `G_γ(t)` and its derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformBundle {
    /// `G_γ(t)`
    pub g: f64,
    /// `∂G/∂t`
    pub gdot: f64,
    /// `∂²G/∂t²`
    pub gddot: f64,
    /// `∂G/∂γ`
    pub ggamma: f64,
    /// `∂²G/∂t∂γ`
    pub gdotgamma: f64,
}

/// The t-derivatives only. This is what the solver and the likelihood need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TDerivs {
    pub g: f64,
    pub gdot: f64,
    pub gddot: f64,
}

impl FrailtyFamily {
    pub fn gamma() -> Self {
        FrailtyFamily {
            kind: FamilyKind::Gamma,
            alpha: 0.0,
            quadrature_nodes: DEFAULT_LOGNORMAL_NODES,
        }
    }

    pub fn inverse_gaussian() -> Self {
        FrailtyFamily {
            kind: FamilyKind::InverseGaussian,
            alpha: 0.5,
            quadrature_nodes: DEFAULT_LOGNORMAL_NODES,
        }
    }

    pub fn igg(alpha: f64) -> Result<Self> {
        let fam = FrailtyFamily {
            kind: FamilyKind::Igg,
            alpha,
            quadrature_nodes: DEFAULT_LOGNORMAL_NODES,
        };
        fam.validate()?;
        Ok(fam)
    }

    pub fn lognormal() -> Self {
        FrailtyFamily {
            kind: FamilyKind::LogNormal,
            alpha: 0.0,
            quadrature_nodes: DEFAULT_LOGNORMAL_NODES,
        }
    }

    pub fn lognormal_with_nodes(nodes: usize) -> Result<Self> {
        let fam = FrailtyFamily {
            quadrature_nodes: nodes,
            ..Self::lognormal()
        };
        fam.validate()?;
        Ok(fam)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            FamilyKind::Igg if !(0.0..1.0).contains(&self.alpha) => Err(Error::invalid(format!(
                "IGG alpha must lie in [0, 1), got {}",
                self.alpha
            ))),
            FamilyKind::LogNormal if self.quadrature_nodes < MIN_LOGNORMAL_NODES => {
                Err(Error::invalid(format!(
                    "log-normal needs at least {MIN_LOGNORMAL_NODES} quadrature nodes, got {}",
                    self.quadrature_nodes
                )))
            }
            _ => Ok(()),
        }
    }

    /// The IGG shape constant this family corresponds to, if it is in the IGG class.
    pub fn igg_alpha(&self) -> Option<f64> {
        match self.kind {
            FamilyKind::Gamma => Some(0.0),
            FamilyKind::InverseGaussian => Some(0.5),
            FamilyKind::Igg => Some(self.alpha),
            FamilyKind::LogNormal => None,
        }
    }

    /// Short name used in file output and tables.
    pub fn label(&self) -> String {
        match self.kind {
            FamilyKind::Gamma => "gamma".into(),
            FamilyKind::InverseGaussian => "ig".into(),
            FamilyKind::Igg => format!("igg({})", self.alpha),
            FamilyKind::LogNormal => "lognormal".into(),
        }
    }

    /// `ε₀(t)`: how far below zero γ may go for arguments up to `t`.
    pub fn epsilon0(&self, t: f64) -> f64 {
        let m = t.max(1.0);
        match self.kind {
            FamilyKind::LogNormal => m.powi(-4) / 64.0,
            _ => (2.0 / 3.0) / m,
        }
    }

    /// Largest `t` with `ε₀(t) ≥ eps`, or `None` when no such `t` exists.
    pub fn epsilon0_inverse(&self, eps: f64) -> Option<f64> {
        if !(eps > 0.0) {
            return Some(f64::INFINITY);
        }
        match self.kind {
            FamilyKind::LogNormal => {
                let x = 64.0 * eps;
                (x <= 1.0).then(|| x.powf(-0.25))
            }
            _ => {
                let top = 2.0 / 3.0;
                (eps <= top).then(|| top / eps)
            }
        }
    }

    pub(crate) fn t_derivs(&self, gamma: f64, t: f64) -> Option<TDerivs> {
        if !domain_check(self, gamma, t) {
            return None;
        }
        let d = self.t_derivs_raw(gamma, t);
        (d.g.is_finite() && d.gdot.is_finite() && d.gddot.is_finite()).then_some(d)
    }

    /// No domain guard. Callers must check first, or be finite-differencing
    /// the analytic continuation on purpose.
    fn t_derivs_raw(&self, gamma: f64, t: f64) -> TDerivs {
        if gamma.abs() < GAMMA_ZERO {
            return TDerivs {
                g: t,
                gdot: 1.0,
                gddot: 0.0,
            };
        }
        match self.igg_alpha() {
            Some(alpha) => igg_t_derivs(alpha, gamma, t),
            None => lognormal_t_derivs(self.quadrature_nodes, gamma, t),
        }
    }
}

fn igg_t_derivs(alpha: f64, gamma: f64, t: f64) -> TDerivs {
    let x = gamma * t / (1.0 - alpha);
    let ln_s = x.ln_1p();
    let phi = if alpha == 0.0 {
        ln_s
    } else {
        (alpha * ln_s).exp_m1() / alpha
    };
    TDerivs {
        g: (1.0 - alpha) / gamma * phi,
        gdot: ((alpha - 1.0) * ln_s).exp(),
        gddot: -gamma * ((alpha - 2.0) * ln_s).exp(),
    }
}

fn igg_bundle(alpha: f64, gamma: f64, t: f64) -> TransformBundle {
    let TDerivs { g, gdot, gddot } = igg_t_derivs(alpha, gamma, t);
    let x = gamma * t / (1.0 - alpha);
    let ln_s = x.ln_1p();
    let ggamma = if x.abs() < SERIES_CUTOFF {
        // G = t·g(x) with g(x) = Σ c_{k+1} x^k, c_k = Π_{j<k}(α-j)/k!
        let mut c = [0.0; 7];
        c[1] = 1.0;
        for k in 2..7 {
            c[k] = c[k - 1] * (alpha - (k as f64 - 1.0)) / k as f64;
        }
        let dg = c[2] + x * (2.0 * c[3] + x * (3.0 * c[4] + x * (4.0 * c[5] + x * 5.0 * c[6])));
        t * t / (1.0 - alpha) * dg
    } else {
        (t * gdot - g) / gamma
    };
    TransformBundle {
        g,
        gdot,
        gddot,
        ggamma,
        gdotgamma: -t * ((alpha - 2.0) * ln_s).exp(),
    }
}

/// Log-normal `G` and t-derivatives. For γ > 0 this is a softmax over the quadrature
/// nodes; for γ < 0 it is the real part of the analytic continuation.
fn lognormal_t_derivs(nodes: usize, gamma: f64, t: f64) -> TDerivs {
    let rule = NormalRule::cached(nodes);
    if gamma > 0.0 {
        let sigma = gamma.sqrt();
        // log p_j - t x_j, with x_j = exp(σ v_j - γ/2)
        let mut max_e = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(rule.len());
        for (v, p) in rule.nodes.iter().zip(&rule.weights) {
            let x = (sigma * v - gamma / 2.0).exp();
            let e = p.ln() - t * x;
            max_e = max_e.max(e);
            terms.push((e, x));
        }
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for (e, x) in &terms {
            let q = (e - max_e).exp();
            s0 += q;
            s1 += q * x;
            s2 += q * x * x;
        }
        let m1 = s1 / s0;
        let m2 = s2 / s0;
        TDerivs {
            // Λ(0) = 1 and Ġ(0) = E[W] = 1 exactly, whatever the rule's rounding
            g: if t == 0.0 { 0.0 } else { -(max_e + s0.ln()) },
            gdot: if t == 0.0 { 1.0 } else { m1 },
            gddot: -(m2 - m1 * m1).max(0.0),
        }
    } else {
        let xi = (-gamma).sqrt();
        let half = xi * xi / 2.0;
        let u = t * half.exp();
        let mut l = [0.0_f64; 3];
        for (v, p) in rule.nodes.iter().zip(&rule.weights) {
            let a = xi * v;
            let base = p * (-u * a.cos()).exp();
            let phase = u * a.sin();
            for (k, lk) in l.iter_mut().enumerate() {
                *lk += base * (phase - k as f64 * a).cos();
            }
        }
        let lam = l[0];
        let d1 = -half.exp() * l[1];
        let d2 = (2.0 * half).exp() * l[2];
        let r = d1 / lam;
        TDerivs {
            g: if t == 0.0 { 0.0 } else { -lam.ln() },
            gdot: if t == 0.0 { 1.0 } else { -r },
            gddot: -d2 / lam + r * r,
        }
    }
}

/// Whether `Λ_γ(t)` is defined (including the negative-γ extension).
pub fn domain_check(family: &FrailtyFamily, gamma: f64, t: f64) -> bool {
    if !gamma.is_finite() || !t.is_finite() || t < 0.0 {
        return false;
    }
    if gamma >= 0.0 {
        return true;
    }
    match family.igg_alpha() {
        Some(alpha) => 1.0 + gamma * t / (1.0 - alpha) > 0.0,
        None => -gamma <= family.epsilon0(t),
    }
}

fn domain_error(family: &FrailtyFamily, gamma: f64, t: f64) -> Error {
    Error::Domain {
        family: family.label(),
        gamma,
        t,
    }
}

/// `Λ_γ(t)`.
pub fn laplace(family: &FrailtyFamily, gamma: f64, t: f64) -> Result<f64> {
    family.validate()?;
    let d = family
        .t_derivs(gamma, t)
        .ok_or_else(|| domain_error(family, gamma, t))?;
    Ok((-d.g).exp())
}

/// `G_γ(t)` with all first- and mixed derivatives.
pub fn transform_bundle(family: &FrailtyFamily, gamma: f64, t: f64) -> Result<TransformBundle> {
    family.validate()?;
    if !domain_check(family, gamma, t) {
        return Err(domain_error(family, gamma, t));
    }
    let b = if gamma.abs() < GAMMA_ZERO {
        TransformBundle {
            g: t,
            gdot: 1.0,
            gddot: 0.0,
            ggamma: -t * t / 2.0,
            gdotgamma: -t,
        }
    } else {
        match family.igg_alpha() {
            Some(alpha) => igg_bundle(alpha, gamma, t),
            None => {
                let d = family.t_derivs_raw(gamma, t);
                let h = (1e-5 * gamma.abs()).max(1e-5);
                let up = family.t_derivs_raw(gamma + h, t);
                let dn = family.t_derivs_raw(gamma - h, t);
                TransformBundle {
                    g: d.g,
                    gdot: d.gdot,
                    gddot: d.gddot,
                    ggamma: (up.g - dn.g) / (2.0 * h),
                    gdotgamma: (up.gdot - dn.gdot) / (2.0 * h),
                }
            }
        }
    };
    let vals = [b.g, b.gdot, b.gddot, b.ggamma, b.gdotgamma];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{} transform not finite at gamma = {gamma}, t = {t}",
            family.label()
        )));
    }
    Ok(b)
}

/// Variance of the frailty, `-G̈_γ(0+)`, for `γ ≥ 0`.
pub fn frailty_variance(family: &FrailtyFamily, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!(
            "frailty variance needs gamma >= 0, got {gamma}"
        )));
    }
    Ok(match family.kind {
        FamilyKind::LogNormal => gamma.exp_m1(),
        _ => gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn laplace_examples() {
        let g = FrailtyFamily::gamma();
        assert!(close(laplace(&g, 0.0, 1.0).unwrap(), (-1.0f64).exp(), 1e-14));
        assert!(close(laplace(&g, 1.0, 1.0).unwrap(), 0.5, 1e-14));
        let ig = FrailtyFamily::inverse_gaussian();
        let want = (-2.0 * (2.0f64.sqrt() - 1.0)).exp();
        assert!(close(laplace(&ig, 0.5, 1.0).unwrap(), want, 1e-14));
        assert!((want - 0.436_736).abs() < 1e-6);
        for fam in [g, ig, FrailtyFamily::igg(0.3).unwrap(), FrailtyFamily::lognormal()] {
            for gamma in [0.0, 0.7, 3.0] {
                assert_eq!(laplace(&fam, gamma, 0.0).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn bundle_gamma_closed_form() {
        let b = transform_bundle(&FrailtyFamily::gamma(), 1.0, 1.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!(close(b.g, ln2, 1e-14));
        assert!(close(b.gdot, 0.5, 1e-14));
        assert!(close(b.gddot, -0.25, 1e-14));
        assert!(close(b.ggamma, -ln2 + 0.5, 1e-13));
        assert!(close(b.gdotgamma, -0.25, 1e-14));
    }

    #[test]
    fn bundle_ig_closed_form() {
        let b = transform_bundle(&FrailtyFamily::inverse_gaussian(), 0.5, 1.0).unwrap();
        assert!(close(b.g, 2.0 * (2.0f64.sqrt() - 1.0), 1e-14));
        assert!(close(b.gdot, 1.0 / 2.0f64.sqrt(), 1e-14));
        assert!(close(b.gddot, -0.5 * 2.0f64.powf(-1.5), 1e-14));
    }

    #[test]
    fn bundle_at_origin() {
        for fam in [
            FrailtyFamily::gamma(),
            FrailtyFamily::inverse_gaussian(),
            FrailtyFamily::igg(0.8).unwrap(),
            FrailtyFamily::lognormal(),
        ] {
            for gamma in [0.0, 0.4, 2.5] {
                let b = transform_bundle(&fam, gamma, 0.0).unwrap();
                assert!(b.g.abs() < 1e-12, "{fam:?} {gamma} {b:?}");
                assert!((b.gdot - 1.0).abs() < 1e-9, "{fam:?} {gamma} {b:?}");
                assert!(b.ggamma.abs() < 1e-9, "{fam:?} {gamma} {b:?}");
            }
        }
    }

    #[test]
    fn zero_gamma_limits() {
        let b = transform_bundle(&FrailtyFamily::igg(0.3).unwrap(), 0.0, 2.0).unwrap();
        assert_eq!(b.g, 2.0);
        assert_eq!(b.ggamma, -2.0);
        assert_eq!(b.gdotgamma, -2.0);
    }

    #[test]
    fn domain_examples() {
        let g = FrailtyFamily::gamma();
        assert!(domain_check(&g, -0.5, 1.0));
        assert!(!domain_check(&g, -0.5, 2.5));
        assert!(domain_check(&FrailtyFamily::lognormal(), 3.0, 100.0));
        assert!(!domain_check(&FrailtyFamily::lognormal(), -1e-3, 2.0));
        assert!(domain_check(&FrailtyFamily::lognormal(), -1e-3, 1.0));
        assert!(!domain_check(&g, 0.5, -1.0));
        assert!(!domain_check(&g, f64::NAN, 1.0));
        // IG: 1 + 2γt > 0
        let ig = FrailtyFamily::inverse_gaussian();
        assert!(domain_check(&ig, -0.2, 2.4));
        assert!(!domain_check(&ig, -0.2, 2.6));
        assert!(matches!(
            laplace(&g, -0.5, 2.5),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn variance_examples() {
        assert_eq!(frailty_variance(&FrailtyFamily::gamma(), 2.0).unwrap(), 2.0);
        let ln = frailty_variance(&FrailtyFamily::lognormal(), 1.0).unwrap();
        assert!((ln - 1.718_282).abs() < 1e-6);
        assert_eq!(frailty_variance(&FrailtyFamily::inverse_gaussian(), 0.0).unwrap(), 0.0);
        assert!(frailty_variance(&FrailtyFamily::gamma(), -0.1).is_err());
    }

    #[test]
    fn variance_matches_second_derivative_at_zero() {
        for (fam, gamma) in [
            (FrailtyFamily::gamma(), 2.0),
            (FrailtyFamily::igg(0.25).unwrap(), 1.3),
            (FrailtyFamily::lognormal(), 1.0),
        ] {
            let b = transform_bundle(&fam, gamma, 0.0).unwrap();
            let v = frailty_variance(&fam, gamma).unwrap();
            assert!(close(-b.gddot, v, 1e-8), "{fam:?}: {} vs {v}", -b.gddot);
        }
    }

    #[test]
    fn invalid_families_rejected() {
        assert!(FrailtyFamily::igg(1.0).is_err());
        assert!(FrailtyFamily::igg(-0.1).is_err());
        assert!(FrailtyFamily::lognormal_with_nodes(10).is_err());
    }

    #[test]
    fn epsilon_inverse_roundtrip() {
        for fam in [FrailtyFamily::gamma(), FrailtyFamily::lognormal()] {
            for t in [1.5, 4.0, 30.0] {
                let e = fam.epsilon0(t);
                let back = fam.epsilon0_inverse(e).unwrap();
                assert!(close(back, t, 1e-12));
            }
        }
        assert!(FrailtyFamily::gamma().epsilon0_inverse(0.7).is_none());
    }
}
