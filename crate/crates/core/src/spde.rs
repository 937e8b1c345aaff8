//! Exponential one-step scheme for the mild equation
//! `X_t = S(t) x0 + int_0^t S(t-s) F(X_s) ds + sum_i sqrt(lambda_i) int_0^t S(t-s) G_i(X_s) d beta^i_s`,
//! together with the Jacobian flow, its right inverse and the directional
//! derivative with respect to the noise.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::fbm::{derive_seed, sample_qfbm_with, FbmSampler, HurstParam, QFbmPath, SamplerMethod, TraceClassSpec};
use crate::fields::FieldSet;
use crate::grid::TimeGrid;
use crate::par;
use crate::semigroup::{GalerkinMatrix, GalerkinVector, SpectralSemigroup};

/// States `X(t_k)` on the noise grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub grid: TimeGrid,
    pub states: Vec<GalerkinVector>,
}

impl SolutionPath {
    pub fn at(&self, k: usize) -> &GalerkinVector {
        &self.states[k]
    }

    pub fn last(&self) -> &GalerkinVector {
        self.states.last().unwrap()
    }
}

fn check_inputs(x0: &GalerkinVector, fields: &FieldSet, sg: &SpectralSemigroup, noise: &QFbmPath) -> Result<()> {
    if x0.len() != sg.dim() || fields.dim() != sg.dim() {
        return arg("state, field and semigroup dimensions differ");
    }
    if fields.modes() != noise.modes() {
        return arg(format!(
            "{} diffusion fields but {} noise modes",
            fields.modes(),
            noise.modes()
        ));
    }
    Ok(())
}

fn noise_weights(noise: &QFbmPath, k: usize) -> Vec<f64> {
    (0..noise.modes())
        .map(|i| noise.spec.sqrt_lambda(i) * noise.increment(i, k))
        .collect()
}

/// `X_{k+1} = S(dt) [X_k + F(X_k) dt + sum_i sqrt(lambda_i) G_i(X_k) (beta^i_{k+1} - beta^i_k)]`.
pub fn solve_mild(
    x0: &GalerkinVector,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
) -> Result<SolutionPath> {
    check_inputs(x0, fields, sg, noise)?;
    let grid = &noise.grid;
    let mut states = Vec::with_capacity(grid.len());
    states.push(x0.clone());
    for k in 0..grid.steps() {
        let dt = grid.dt(k);
        let x = &states[k];
        let mut inc = x + fields.drift.value(x) * dt;
        for (g, w) in fields.diffusion.iter().zip(noise_weights(noise, k)) {
            if w != 0.0 {
                inc += g.value(x) * w;
            }
        }
        let next = sg.apply_s_unchecked(dt, &inc);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        states.push(next);
    }
    Ok(SolutionPath {
        grid: grid.clone(),
        states,
    })
}

/// `B_k = nabla F(X_k) dt + sum_i sqrt(lambda_i) nabla G_i(X_k) d beta^i_k`.
fn step_generator(fields: &FieldSet, sol: &SolutionPath, noise: &QFbmPath, k: usize) -> GalerkinMatrix {
    let x = sol.at(k);
    let dt = sol.grid.dt(k);
    fields.drift.jacobian(x) * dt + fields.diffusion_jacobian_sum(x, &noise_weights(noise, k))
}

/// `S(-t_k) B_k S(t_k)`, through preimages when the fields live in
/// `S(T0)E` with `t_k <= T0`, by guarded amplification otherwise.
fn conjugated_generator(
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    sol: &SolutionPath,
    noise: &QFbmPath,
    k: usize,
) -> Result<GalerkinMatrix> {
    let t = sol.grid.t(k);
    let x = sol.at(k);
    let dt = sol.grid.dt(k);
    if let Some(t0) = fields.common_range_time() {
        if t <= t0 * (1.0 + 1e-12) {
            let mut m = fields.drift.preimage_jacobian(x).unwrap() * dt;
            for (g, w) in fields.diffusion.iter().zip(noise_weights(noise, k)) {
                if w != 0.0 {
                    m += g.preimage_jacobian(x).unwrap() * w;
                }
            }
            let lag = (t0 - t).max(0.0);
            return Ok(sg.right_mul(t, &sg.left_mul(lag, &m)));
        }
    }
    let b = step_generator(fields, sol, noise, k);
    let n = sg.dim();
    let mut out = b.clone();
    for i in 0..n {
        let amp = (sg.mu(i) * t).exp();
        for j in 0..n {
            if b[(i, j)] == 0.0 {
                continue;
            }
            if amp > sg.amp_cap() {
                return Err(Error::Range {
                    mode: i + 1,
                    amplification: amp,
                    cap: sg.amp_cap(),
                });
            }
            out[(i, j)] = b[(i, j)] * amp * (-sg.mu(j) * t).exp();
        }
    }
    Ok(out)
}

/// `J_{k+1} = S(dt) (I + B_k) J_k`, `J_0 = Id`.
pub fn solve_jacobian(
    sol: &SolutionPath,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
) -> Result<Vec<GalerkinMatrix>> {
    let n = sg.dim();
    let mut out = Vec::with_capacity(sol.grid.len());
    out.push(GalerkinMatrix::identity(n, n));
    for k in 0..sol.grid.steps() {
        let b = step_generator(fields, sol, noise, k);
        let j = &out[k];
        let next = sg.left_mul(sol.grid.dt(k), &(j + &b * j));
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        out.push(next);
    }
    Ok(out)
}

/// Update rule for the right-inverse factor `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RightInverseScheme {
    /// `R_{k+1} = R_k (I + M_k)^{-1}`; keeps `P R = Id` to round-off.
    #[default]
    ProductInverse,
    /// `R_{k+1} = R_k (I - M_k)`, first order.
    Euler,
}

/// `P_k`, `R_k = Id + U_k` with `J_k = S(t_k) P_k` and `J+_k = R_k S(-t_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrices {
    pub grid: TimeGrid,
    pub jacobian: Vec<GalerkinMatrix>,
    pub p: Vec<GalerkinMatrix>,
    pub r: Vec<GalerkinMatrix>,
    pub scheme: RightInverseScheme,
}

impl FlowMatrices {
    /// Last grid index carrying `P` and `R`.
    pub fn last_index(&self) -> usize {
        self.r.len() - 1
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k > self.last_index() {
            return arg(format!("right inverse computed up to index {}, asked for {k}", self.last_index()));
        }
        Ok(())
    }

    pub fn u(&self, k: usize) -> GalerkinMatrix {
        let n = self.r[k].nrows();
        &self.r[k] - GalerkinMatrix::identity(n, n)
    }

    /// `J+_k (S(T0) w) = R_k S(T0 - t_k) w`, requires `t_k <= T0`.
    pub fn apply_jplus_range(
        &self,
        sg: &SpectralSemigroup,
        k: usize,
        t0: f64,
        w: &GalerkinVector,
    ) -> Result<GalerkinVector> {
        self.check_index(k)?;
        let t = self.grid.t(k);
        if t > t0 * (1.0 + 1e-12) {
            return arg(format!("t = {t} exceeds smoothing time {t0}"));
        }
        Ok(&self.r[k] * sg.apply_s_unchecked((t0 - t).max(0.0), w))
    }

    /// `J+_k v = R_k S(-t_k) v` for an arbitrary vector, guarded by the
    /// semigroup's amplification cap.
    pub fn apply_jplus(&self, sg: &SpectralSemigroup, k: usize, v: &GalerkinVector) -> Result<GalerkinVector> {
        self.check_index(k)?;
        let back = sg.apply_s_inverse(self.grid.t(k), v, sg.amp_cap())?;
        Ok(&self.r[k] * back)
    }

    /// Largest `||P_k R_k - Id||` (spectral norm) over the grid.
    pub fn product_defect(&self) -> f64 {
        self.p
            .iter()
            .zip(&self.r)
            .map(|(p, r)| {
                let n = p.nrows();
                spectral_norm(&(p * r - GalerkinMatrix::identity(n, n)))
            })
            .fold(0.0, f64::max)
    }

    /// Largest relative `||J_k - S(t_k) P_k||` over the grid.
    pub fn flow_defect(&self, sg: &SpectralSemigroup) -> f64 {
        self.jacobian
            .iter()
            .zip(&self.p)
            .enumerate()
            .map(|(k, (j, p))| {
                let sp = sg.left_mul(self.grid.t(k), p);
                (j - &sp).norm() / j.norm().max(f64::MIN_POSITIVE)
            })
            .fold(0.0, f64::max)
    }
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    nalgebra::SVD::new(m.clone(), false, false).singular_values.max()
}

/// Jacobian, `P` and `R` along a solution.
pub fn solve_right_inverse(
    sol: &SolutionPath,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    scheme: RightInverseScheme,
) -> Result<FlowMatrices> {
    solve_right_inverse_until(sol, fields, sg, noise, scheme, sol.grid.steps())
}

/// As [`solve_right_inverse`] with `P` and `R` stopped at grid index `last`;
/// the Jacobian still covers the whole grid.
pub fn solve_right_inverse_until(
    sol: &SolutionPath,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    scheme: RightInverseScheme,
    last: usize,
) -> Result<FlowMatrices> {
    if last > sol.grid.steps() {
        return arg(format!("index {last} beyond the last grid point {}", sol.grid.steps()));
    }
    let jacobian = solve_jacobian(sol, fields, sg, noise)?;
    let n = sg.dim();
    let id = GalerkinMatrix::identity(n, n);
    let mut p = Vec::with_capacity(last + 1);
    let mut r = Vec::with_capacity(last + 1);
    p.push(id.clone());
    r.push(id.clone());
    for k in 0..last {
        let m = conjugated_generator(fields, sg, sol, noise, k)?;
        let step = &id + &m;
        let pn = &step * &p[k];
        let rn = match scheme {
            RightInverseScheme::ProductInverse => {
                let inv = step
                    .clone()
                    .lu()
                    .try_inverse()
                    .ok_or(Error::Divergence { step: k + 1 })?;
                &r[k] * inv
            }
            RightInverseScheme::Euler => &r[k] * (&id - &m),
        };
        if pn.iter().chain(rn.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        p.push(pn);
        r.push(rn);
    }
    Ok(FlowMatrices {
        grid: sol.grid.clone(),
        jacobian,
        p,
        r,
        scheme,
    })
}

/// Derivative of the discrete solution map along a noise direction `h`:
/// `Y_{k+1} = S(dt) [(I + B_k) Y_k + sum_i sqrt(lambda_i) G_i(X_k) (h^i_{k+1} - h^i_k)]`.
pub fn frechet_directional(
    sol: &SolutionPath,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    h: &QFbmPath,
) -> Result<Vec<GalerkinVector>> {
    if h.modes() != noise.modes() || h.grid.len() != noise.grid.len() {
        return arg("direction shape does not match the noise");
    }
    let n = sg.dim();
    let mut out = Vec::with_capacity(sol.grid.len());
    out.push(GalerkinVector::zeros(n));
    for k in 0..sol.grid.steps() {
        let b = step_generator(fields, sol, noise, k);
        let y = &out[k];
        let mut inc = y + &b * y;
        for (i, g) in fields.diffusion.iter().enumerate() {
            let w = h.spec.sqrt_lambda(i) * h.increment(i, k);
            if w != 0.0 {
                inc += g.value(sol.at(k)) * w;
            }
        }
        let next = sg.apply_s_unchecked(sol.grid.dt(k), &inc);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        out.push(next);
    }
    Ok(out)
}

/// Kernel `Psi_{t_k, t_j} = J_k J_j^{-1} G_mode(X_j)` for `k >= j`, from the
/// linear evolution `Psi_{k+1} = S(dt)(I + B_k) Psi_k`, `Psi_j = G_mode(X_j)`.
/// Entries before `j` are zero.
pub fn psi_kernel(
    sol: &SolutionPath,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    j: usize,
    mode: usize,
) -> Result<Vec<GalerkinVector>> {
    if mode >= fields.modes() {
        return arg(format!("mode {mode} out of range"));
    }
    if j >= sol.grid.len() {
        return arg(format!("start index {j} outside the grid"));
    }
    let n = sg.dim();
    let mut out = vec![GalerkinVector::zeros(n); sol.grid.len()];
    out[j] = fields.diffusion[mode].value(sol.at(j));
    for k in j..sol.grid.steps() {
        let b = step_generator(fields, sol, noise, k);
        let v = &out[k];
        let next = sg.apply_s_unchecked(sol.grid.dt(k), &(v + &b * v));
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step: k + 1 });
        }
        out[k + 1] = next;
    }
    Ok(out)
}

/// Differences between successive refinement levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConvergence {
    pub steps: Vec<usize>,
    /// RMS over samples of `||X^{dt/2}_T - X^{dt}_T||`, one per refinement.
    pub differences: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl SelfConvergence {
    pub fn monotone(&self) -> bool {
        self.differences.windows(2).all(|w| w[1] < w[0])
    }
}

/// Solves on `base_steps * 2^l` cells for `l = 0..=levels` with the noise of
/// the finest level subsampled, over `samples` noise draws.
#[allow(clippy::too_many_arguments)]
pub fn self_convergence(
    x0: &GalerkinVector,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    spec: &TraceClassSpec,
    hurst: HurstParam,
    horizon: f64,
    base_steps: usize,
    levels: usize,
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<SelfConvergence> {
    if levels == 0 || samples == 0 {
        return arg("self-convergence needs at least one level and one sample");
    }
    let fine_steps = base_steps << levels;
    let fine = TimeGrid::uniform(horizon, fine_steps)?;
    let method = if fine.len() >= 512 { SamplerMethod::Circulant } else { SamplerMethod::Cholesky };
    let sampler = FbmSampler::new(hurst, &fine, method)?;
    let runs: Vec<Result<Vec<GalerkinVector>>> = par::map_indexed(samples, workers, |s| {
        let noise = sample_qfbm_with(spec, &sampler, derive_seed(seed, s as u64));
        (0..=levels)
            .map(|l| {
                let coarse = noise.subsample(1 << (levels - l))?;
                Ok(solve_mild(x0, fields, sg, &coarse)?.last().clone())
            })
            .collect()
    });
    let mut sq = vec![0.0; levels];
    for run in runs {
        let ends = run?;
        for l in 0..levels {
            sq[l] += (&ends[l + 1] - &ends[l]).norm_squared();
        }
    }
    let differences: Vec<f64> = sq.iter().map(|s| (s / samples as f64).sqrt()).collect();
    let ratios = differences.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(SelfConvergence {
        steps: (0..=levels).map(|l| base_steps << l).collect(),
        differences,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{FieldRef, SineField};
    use std::sync::Arc;

    fn zero_fields(sg: &SpectralSemigroup, m: usize) -> FieldSet {
        let z: FieldRef = Arc::new(SineField::constant(&GalerkinVector::zeros(sg.dim())));
        FieldSet::new(sg, z.clone(), vec![z; m]).unwrap()
    }

    #[test]
    fn homogeneous_flow_is_semigroup() {
        let sg = SpectralSemigroup::dirichlet_laplacian(4).unwrap();
        let grid = TimeGrid::uniform(0.5, 64).unwrap();
        let spec = TraceClassSpec::power_law(2, 3.0).unwrap();
        let h = HurstParam::new(0.8).unwrap();
        let noise = crate::fbm::sample_qfbm(&spec, h, &grid, 3).unwrap();
        let fs = zero_fields(&sg, 2);
        let x0 = GalerkinVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let sol = solve_mild(&x0, &fs, &sg, &noise).unwrap();
        let flows = solve_right_inverse(&sol, &fs, &sg, &noise, RightInverseScheme::ProductInverse).unwrap();
        for k in [0, 10, 64] {
            let want = sg.apply_s(grid.t(k), &x0).unwrap();
            assert!((sol.at(k) - &want).norm() <= 1e-13 * want.norm());
            assert!((flows.jacobian[k].clone() - sg.matrix(grid.t(k))).norm() < 1e-13);
            assert!(flows.u(k).norm() == 0.0);
        }
    }

    #[test]
    fn mismatched_modes_rejected() {
        let sg = SpectralSemigroup::dirichlet_laplacian(2).unwrap();
        let grid = TimeGrid::uniform(0.5, 8).unwrap();
        let spec = TraceClassSpec::power_law(3, 3.0).unwrap();
        let h = HurstParam::new(0.8).unwrap();
        let noise = QFbmPath::zeros(spec, grid, h);
        let fs = zero_fields(&sg, 2);
        assert!(solve_mild(&GalerkinVector::zeros(2), &fs, &sg, &noise).is_err());
    }
}
