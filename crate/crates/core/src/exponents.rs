//! Hölder exponent selection for the regularized noise and the solution
//! space, with explicit infeasibility reporting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::fbm::HurstParam;

/// Regularity constants used by the Jacobian and right-inverse theory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A3Block {
    pub gamma1: f64,
    pub gamma2: f64,
    /// Measured by the assumption audit when available.
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub eta: f64,
    pub beta_tilde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub holds: bool,
}

/// Exponents `(gamma_tilde, kappa, kappa_0, delta, alpha)` and the
/// derived constraint checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionProfile {
    pub hurst: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub gamma_tilde: f64,
    pub kappa0: f64,
    pub delta: f64,
    pub alpha: f64,
    pub a3: A3Block,
    pub checks: Vec<Check>,
}

fn check(name: &str, holds: bool) -> Check {
    Check {
        name: name.to_string(),
        holds,
    }
}

impl AssumptionProfile {
    /// Re-evaluates every index inequality from the stored values.
    pub fn evaluate_checks(&self) -> Vec<Check> {
        let (g, k, k0, d, h, a) = (
            self.gamma_tilde,
            self.kappa,
            self.kappa0,
            self.delta,
            self.hurst,
            self.alpha,
        );
        let gm = self.a3.gamma1.max(self.a3.gamma2);
        let gcap = (2.0 * h - 1.0).min(0.75);
        vec![
            check("gamma_tilde > kappa0", g > k0),
            check("kappa0 > kappa", k0 > k),
            check("kappa > 1/4", k > 0.25),
            check("gamma_tilde + kappa > 1", g + k > 1.0),
            check("gamma_tilde - kappa >= kappa0", g - k >= k0),
            check("1/2 < gamma_tilde < H", g > 0.5 && g < h),
            check("H < gamma_tilde + delta < 1", g + d > h && g + d < 1.0),
            check(
                "gamma1, gamma2 in (0, (2H-1) ^ 3/4)",
                self.a3.gamma1 > 0.0 && self.a3.gamma2 > 0.0 && gm < gcap,
            ),
            check("alpha > 1 - H", a > 1.0 - h),
            check("alpha < (1 - gamma_i)/2", a < 0.5 * (1.0 - gm)),
            check("eta_A3 in [0, 1 - alpha)", self.a3.eta >= 0.0 && self.a3.eta < 1.0 - a),
            check(
                "beta_tilde in (alpha, 1/2)",
                self.a3.beta_tilde > a && self.a3.beta_tilde < 0.5,
            ),
        ]
    }

    /// Names of the inequalities that fail.
    pub fn violations(&self) -> Vec<String> {
        self.evaluate_checks()
            .into_iter()
            .filter(|c| !c.holds)
            .map(|c| c.name)
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        self.violations().is_empty()
    }
}

impl fmt::Display for AssumptionProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "assumption profile")?;
        writeln!(f, "  H            = {}", self.hurst)?;
        writeln!(f, "  kappa        = {}", self.kappa)?;
        writeln!(f, "  epsilon      = {}", self.epsilon)?;
        writeln!(f, "  eta          = {}", self.eta)?;
        writeln!(f, "  gamma_tilde  = {}", self.gamma_tilde)?;
        writeln!(f, "  kappa0       = {}", self.kappa0)?;
        writeln!(f, "  delta        = {}", self.delta)?;
        writeln!(f, "  alpha        = {}", self.alpha)?;
        writeln!(
            f,
            "  A3: gamma1 = {}, gamma2 = {}, eta = {}, beta_tilde = {}",
            self.a3.gamma1, self.a3.gamma2, self.a3.eta, self.a3.beta_tilde
        )?;
        for c in &self.checks {
            writeln!(f, "  [{}] {}", if c.holds { "ok" } else { "FAIL" }, c.name)?;
        }
        Ok(())
    }
}

/// Chooses `epsilon`, `eta` with `H - epsilon + kappa > 1` and
/// `1/2 + epsilon < eta < H - kappa`, then sets `gamma_tilde = H - epsilon`,
/// `kappa0 = H - eta` and `delta` centred in `(H - gamma_tilde, 1 - gamma_tilde)`.
///
/// An empty constraint set yields [`Error::Infeasible`] naming the
/// violated inequality.
pub fn choose_exponents(h: HurstParam, kappa: f64) -> Result<AssumptionProfile> {
    if !(kappa > 0.25 && kappa < 0.5) {
        return arg(format!("kappa must lie in (1/4, 1/2), got {kappa}"));
    }
    let hv = h.value();
    let mut problems = Vec::new();
    if hv + kappa <= 1.0 {
        problems.push(format!(
            "H - epsilon + kappa > 1 has no solution epsilon > 0 since H + kappa = {} <= 1",
            hv + kappa
        ));
    }
    if hv - kappa <= 0.5 {
        problems.push(format!(
            "eta-interval (1/2 + epsilon, H - kappa) is empty: eta > 1/2 + epsilon > 1/2 but H - kappa = {}",
            hv - kappa
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Infeasible(problems.join("; ")));
    }
    let eps_max = (hv + kappa - 1.0).min(hv - kappa - 0.5).min(hv - 0.5);
    let epsilon = 0.5 * eps_max;
    let eta = 0.5 * ((0.5 + epsilon) + (hv - kappa));
    let gamma_tilde = hv - epsilon;
    let kappa0 = hv - eta;
    let delta = 0.5 * ((hv - gamma_tilde) + (1.0 - gamma_tilde));

    let gamma_a3 = 0.5 * (2.0 * hv - 1.0).min(0.75);
    let lo = (1.0 - hv).max(0.5 * kappa);
    let hi = (0.5 * (1.0 - gamma_a3)).min(kappa);
    let alpha = if lo < hi { 0.5 * (lo + hi) } else { 0.5 * ((1.0 - hv) + 0.5 * (1.0 - gamma_a3)) };
    let a3 = A3Block {
        gamma1: gamma_a3,
        gamma2: gamma_a3,
        c1: None,
        c2: None,
        eta: 0.0,
        beta_tilde: 0.5 * (alpha + 0.5),
    };
    let mut profile = AssumptionProfile {
        hurst: hv,
        kappa,
        epsilon,
        eta,
        gamma_tilde,
        kappa0,
        delta,
        alpha,
        a3,
        checks: Vec::new(),
    };
    profile.checks = profile.evaluate_checks();
    let core = &profile.checks[..7];
    if let Some(bad) = core.iter().find(|c| !c.holds) {
        return Err(Error::Infeasible(format!("selected exponents violate {}", bad.name)));
    }
    Ok(profile)
}
