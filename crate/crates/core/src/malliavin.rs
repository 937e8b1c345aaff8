//! Malliavin derivative of the discrete solution, the reduced operator
//! `C_t` and the projected matrix `gamma_t = (T J_t) C_t (T J_t)^T`.
//!
//! Weight convention: `C_t = sum_l lambda_l alpha_H int int q_l(u) q_l(v)^T |u-v|^{2H-2} du dv`
//! with `q_l(u) = J+_u G_l(X_u)` and `G_l = G(e_l)`; the `sqrt(lambda_l)`
//! factors of the noise appear squared as `lambda_l`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::fbm::{cell_weights, HurstParam, QFbmPath};
use crate::fields::FieldSet;
use crate::semigroup::{GalerkinMatrix, GalerkinVector, SpectralSemigroup};
use crate::spde::{psi_kernel, FlowMatrices, SolutionPath};

/// `J+_{t_k} G_mode(X_k)`, through the field preimage when available.
pub fn jplus_field(
    sol: &SolutionPath,
    flows: &FlowMatrices,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    k: usize,
    mode: usize,
) -> Result<GalerkinVector> {
    let g = fields
        .diffusion
        .get(mode)
        .ok_or_else(|| crate::error::Error::Argument(format!("mode {mode} out of range")))?;
    let x = sol.at(k);
    if let (Some((t0, _)), Some(w)) = (g.range(), g.preimage_derivative(x, &[])) {
        if sol.grid.t(k) <= t0 * (1.0 + 1e-12) {
            return flows.apply_jplus_range(sg, k, t0, &w);
        }
    }
    flows.apply_jplus(sg, k, &g.value(x))
}

/// `D^mode_{t_r} X_{t_t} = J_t J+_r G_mode(X_r)`; zero when `r > t`.
pub fn malliavin_derivative(
    sol: &SolutionPath,
    flows: &FlowMatrices,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    r: usize,
    t: usize,
    mode: usize,
) -> Result<GalerkinVector> {
    if r > t {
        return Ok(GalerkinVector::zeros(sg.dim()));
    }
    let q = jplus_field(sol, flows, fields, sg, r, mode)?;
    Ok(&flows.jacobian[t] * q)
}

/// Same kernel from the linear evolution started at `r`.
pub fn malliavin_derivative_direct(
    sol: &SolutionPath,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    r: usize,
    t: usize,
    mode: usize,
) -> Result<GalerkinVector> {
    if r > t {
        return Ok(GalerkinVector::zeros(sg.dim()));
    }
    Ok(psi_kernel(sol, fields, sg, noise, r, mode)?.swap_remove(t))
}

fn check_t(sol: &SolutionPath, t: usize) -> Result<()> {
    if t == 0 || t >= sol.grid.len() {
        return arg(format!("time index {t} must lie in 1..{}", sol.grid.len()));
    }
    Ok(())
}

/// Reduced operator `C_{t_t}` from the left-point values of `q_l` on the
/// cells of `[0, t_t]`.
pub fn reduced_malliavin(
    sol: &SolutionPath,
    flows: &FlowMatrices,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    t: usize,
    h: HurstParam,
) -> Result<GalerkinMatrix> {
    check_t(sol, t)?;
    let n = sg.dim();
    let w_full = cell_weights(&sol.grid, h);
    let w = w_full.view((0, 0), (t, t)).into_owned();
    let mut c = GalerkinMatrix::zeros(n, n);
    for l in 0..fields.modes() {
        let mut q = DMatrix::zeros(n, t);
        for k in 0..t {
            q.set_column(k, &jplus_field(sol, flows, fields, sg, k, l)?);
        }
        c += (&q * &w * q.transpose()) * noise.spec.lambda(l);
    }
    Ok(symmetrize(c))
}

fn symmetrize(m: GalerkinMatrix) -> GalerkinMatrix {
    (&m + m.transpose()) * 0.5
}

/// `gamma = (T J) C (T J)^T`.
pub fn gamma_matrix(c: &GalerkinMatrix, j: &GalerkinMatrix, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = c.nrows();
    if c.ncols() != n || j.shape() != (n, n) || t.ncols() != n {
        return arg(format!(
            "shape mismatch: C {:?}, J {:?}, T {:?}",
            c.shape(),
            j.shape(),
            t.shape()
        ));
    }
    let tj = t * j;
    Ok(symmetrize(&tj * c * tj.transpose()))
}

/// `gamma` assembled directly from `<D T_i X_t, D T_j X_t>_H` with the
/// kernels solved from their own linear equations. Cost `O(K^2 N M)` solves.
pub fn gamma_direct(
    sol: &SolutionPath,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    t: usize,
    proj: &DMatrix<f64>,
    h: HurstParam,
) -> Result<DMatrix<f64>> {
    check_t(sol, t)?;
    if proj.ncols() != sg.dim() {
        return arg("projection width does not match the state");
    }
    let d = proj.nrows();
    let w = cell_weights(&sol.grid, h);
    let mut gamma = DMatrix::zeros(d, d);
    for l in 0..fields.modes() {
        let kernels: Vec<GalerkinVector> = (0..t)
            .map(|a| malliavin_derivative_direct(sol, fields, sg, noise, a, t, l).map(|v| proj * v))
            .collect::<Result<_>>()?;
        for a in 0..t {
            for b in 0..t {
                gamma += &kernels[a] * kernels[b].transpose() * (w[(a, b)] * noise.spec.lambda(l));
            }
        }
    }
    Ok(symmetrize(gamma))
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| a.total_cmp(b));
    e
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalliavinMatrices {
    pub c: GalerkinMatrix,
    pub gamma: DMatrix<f64>,
    pub c_eigenvalues: Vec<f64>,
    pub gamma_eigenvalues: Vec<f64>,
    pub projection: DMatrix<f64>,
}

/// `C_t`, `gamma_t` and their spectra.
#[allow(clippy::too_many_arguments)]
pub fn malliavin_matrices(
    sol: &SolutionPath,
    flows: &FlowMatrices,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    t: usize,
    h: HurstParam,
    proj: &DMatrix<f64>,
) -> Result<MalliavinMatrices> {
    let c = reduced_malliavin(sol, flows, fields, sg, noise, t, h)?;
    let gamma = gamma_matrix(&c, &flows.jacobian[t], proj)?;
    Ok(MalliavinMatrices {
        c_eigenvalues: symmetric_eigenvalues(&c),
        gamma_eigenvalues: symmetric_eigenvalues(&gamma),
        c,
        gamma,
        projection: proj.clone(),
    })
}

/// Rows `e_{i}^T` for the given zero-based coordinates.
pub fn coordinate_projection(n: usize, coords: &[usize]) -> Result<DMatrix<f64>> {
    if coords.is_empty() {
        return arg("projection needs at least one coordinate");
    }
    if let Some(c) = coords.iter().find(|c| **c >= n) {
        return arg(format!("coordinate {c} out of range for dimension {n}"));
    }
    let mut t = DMatrix::zeros(coords.len(), n);
    for (r, c) in coords.iter().enumerate() {
        t[(r, *c)] = 1.0;
    }
    Ok(t)
}
