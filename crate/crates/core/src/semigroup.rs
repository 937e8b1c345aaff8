//! Diagonal analytic semigroups on a Galerkin truncation.
//!
//! The Dirichlet Laplacian on `(0, 1)` has eigenfunctions
//! `e_n(x) = sqrt(2) sin(pi n x)` and eigenvalues `pi^2 n^2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Coefficients of `sum_n c_n e_n`.
pub type GalerkinVector = DVector<f64>;
/// Operator on the truncation, in the `e_n` basis.
pub type GalerkinMatrix = DMatrix<f64>;

pub const DEFAULT_AMP_CAP: f64 = 1e12;

/// `S(t) = exp(t A)` with `A = -diag(mu_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSemigroup {
    mu: Vec<f64>,
    amp_cap: f64,
}

impl SpectralSemigroup {
    /// Semigroup with eigenvalues `0 < mu_1 <= ... <= mu_N`.
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return arg("semigroup needs at least one mode");
        }
        if mu.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return arg("eigenvalues must be positive and finite");
        }
        if mu.windows(2).any(|w| w[1] < w[0]) {
            return arg("eigenvalues must be non-decreasing");
        }
        Ok(Self {
            mu,
            amp_cap: DEFAULT_AMP_CAP,
        })
    }

    /// `mu_n = pi^2 n^2`, `n = 1..=n_modes`.
    pub fn dirichlet_laplacian(n_modes: usize) -> Result<Self> {
        if n_modes < 1 {
            return arg("Galerkin dimension must be at least 1");
        }
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        Self::new((1..=n_modes).map(|n| pi2 * (n * n) as f64).collect())
    }

    /// All eigenvalues zero, so `S(t) = Id`. For testing integration code only.
    pub fn identity(n_modes: usize) -> Result<Self> {
        if n_modes < 1 {
            return arg("Galerkin dimension must be at least 1");
        }
        Ok(Self {
            mu: vec![0.0; n_modes],
            amp_cap: DEFAULT_AMP_CAP,
        })
    }

    pub fn with_amp_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap >= 1.0) {
            return arg(format!("amplification cap must be at least 1, got {cap}"));
        }
        self.amp_cap = cap;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.mu
    }

    pub fn mu(&self, n: usize) -> f64 {
        self.mu[n]
    }

    pub fn amp_cap(&self) -> f64 {
        self.amp_cap
    }

    fn check_len(&self, v: &GalerkinVector) -> Result<()> {
        if v.len() != self.dim() {
            return arg(format!(
                "vector has {} coefficients, semigroup has {} modes",
                v.len(),
                self.dim()
            ));
        }
        Ok(())
    }

    /// Diagonal of `S(t)`.
    pub fn factors(&self, t: f64) -> Vec<f64> {
        self.mu.iter().map(|m| (-m * t).exp()).collect()
    }

    pub fn apply_s(&self, t: f64, v: &GalerkinVector) -> Result<GalerkinVector> {
        if t < 0.0 {
            return arg(format!("S(t) needs t >= 0, got {t}; use apply_s_inverse"));
        }
        self.check_len(v)?;
        Ok(self.apply_s_unchecked(t, v))
    }

    pub(crate) fn apply_s_unchecked(&self, t: f64, v: &GalerkinVector) -> GalerkinVector {
        GalerkinVector::from_iterator(
            v.len(),
            v.iter().zip(&self.mu).map(|(c, m)| (-m * t).exp() * c),
        )
    }

    /// `S(t)` as a matrix.
    pub fn matrix(&self, t: f64) -> GalerkinMatrix {
        GalerkinMatrix::from_diagonal(&DVector::from_vec(self.factors(t)))
    }

    /// `S(t) M`, scaling rows.
    pub fn left_mul(&self, t: f64, m: &GalerkinMatrix) -> GalerkinMatrix {
        let f = self.factors(t);
        let mut out = m.clone();
        for (i, fi) in f.iter().enumerate() {
            out.row_mut(i).scale_mut(*fi);
        }
        out
    }

    /// `M S(t)`, scaling columns.
    pub fn right_mul(&self, t: f64, m: &GalerkinMatrix) -> GalerkinMatrix {
        let f = self.factors(t);
        let mut out = m.clone();
        for (j, fj) in f.iter().enumerate() {
            out.column_mut(j).scale_mut(*fj);
        }
        out
    }

    /// Left inverse `S(-t)`, refused when `e^{mu_n t}` exceeds the cap for a
    /// mode whose coefficient is nonzero.
    pub fn apply_s_inverse(&self, t: f64, v: &GalerkinVector, amp_cap: f64) -> Result<GalerkinVector> {
        if t < 0.0 {
            return arg(format!("S(-t) needs t >= 0, got {t}"));
        }
        self.check_len(v)?;
        let mut out = v.clone();
        for (n, (c, m)) in out.iter_mut().zip(&self.mu).enumerate() {
            let amp = (m * t).exp();
            if amp > amp_cap && *c != 0.0 {
                return Err(Error::Range {
                    mode: n + 1,
                    amplification: amp,
                    cap: amp_cap,
                });
            }
            *c *= amp;
        }
        Ok(out)
    }

    /// `(-A)^alpha v`.
    pub fn fractional_power(&self, alpha: f64, v: &GalerkinVector) -> Result<GalerkinVector> {
        self.check_len(v)?;
        if alpha < 0.0 && self.mu.contains(&0.0) {
            return arg("negative fractional power of a singular generator");
        }
        Ok(GalerkinVector::from_iterator(
            v.len(),
            v.iter().zip(&self.mu).map(|(c, m)| m.powf(alpha) * c),
        ))
    }

    /// `|v|_alpha = ||(-A)^alpha v||`.
    pub fn norm_alpha(&self, alpha: f64, v: &GalerkinVector) -> Result<f64> {
        let w = self.fractional_power(alpha, v)?;
        Ok(w.iter().map(|c| c * c).sum::<f64>().sqrt())
    }

    /// `max_n mu_n^alpha e^{-mu_n t}`, the norm of `(-A)^alpha S(t)`.
    pub fn smoothing_bound_check(&self, alpha: f64, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return arg(format!("smoothing bound needs t > 0, got {t}"));
        }
        if alpha < 0.0 {
            return arg(format!("smoothing bound needs alpha >= 0, got {alpha}"));
        }
        Ok(self
            .mu
            .iter()
            .map(|m| m.powf(alpha) * (-m * t).exp())
            .fold(0.0, f64::max))
    }

    /// `A v = -diag(mu) v`.
    pub fn apply_generator(&self, v: &GalerkinVector) -> GalerkinVector {
        GalerkinVector::from_iterator(v.len(), v.iter().zip(&self.mu).map(|(c, m)| -m * c))
    }
}

/// `sup_{x>0} x^alpha e^{-x} = (alpha / e)^alpha`.
pub fn smoothing_constant(alpha: f64) -> f64 {
    if alpha == 0.0 {
        1.0
    } else {
        (alpha / std::f64::consts::E).powf(alpha)
    }
}
