//! Fractional Brownian motion: covariance, the square-root kernel `K_H`,
//! the Hilbert space `H` of step functions, exact samplers and the
//! Cameron-Martin lift.
//!
//! Step functions are stored as one value per grid cell `[t_j, t_{j+1})`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::function::{beta::beta, gamma::gamma};

use crate::error::{arg, Error, Result};
use crate::grid::TimeGrid;
use crate::quadrature::integrate;

/// Hurst index restricted to the open interval `(1/2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstParam(f64);

impl HurstParam {
    pub fn new(h: f64) -> Result<Self> {
        if !(h > 0.5 && h < 1.0) {
            return arg(format!("Hurst index must lie in (1/2, 1), got {h}"));
        }
        Ok(Self(h))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `alpha_H = H (2H - 1)`.
    pub fn alpha(self) -> f64 {
        self.0 * (2.0 * self.0 - 1.0)
    }

    /// Normalising constant of `K_H`.
    pub fn c_h(self) -> f64 {
        let h = self.0;
        (self.alpha() / beta(2.0 - 2.0 * h, h - 0.5)).sqrt()
    }
}

/// `R_H(s, t) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2`.
pub fn covariance_rh(s: f64, t: f64, h: HurstParam) -> Result<f64> {
    if s < 0.0 || t < 0.0 {
        return arg(format!("covariance needs nonnegative times, got ({s}, {t})"));
    }
    Ok(rh(s, t, h.value()))
}

fn rh(s: f64, t: f64, h: f64) -> f64 {
    let e = 2.0 * h;
    0.5 * (s.powf(e) + t.powf(e) - (t - s).abs().powf(e))
}

/// Square-root kernel `K_H(t, s)` for `0 < s < t`.
///
/// The inner integral is computed after the change of variables
/// `u = s + v^{1/a}` with `a = H - 1/2`, which removes the endpoint
/// singularity entirely.
pub fn kernel_kh(t: f64, s: f64, h: HurstParam) -> Result<f64> {
    if !(s > 0.0) || !(s < t) {
        return arg(format!("kernel needs 0 < s < t, got s={s}, t={t}"));
    }
    Ok(kh_unchecked(t, s, h))
}

fn kh_unchecked(t: f64, s: f64, h: HurstParam) -> f64 {
    if t <= s {
        return 0.0;
    }
    let a = h.value() - 0.5;
    let inv = 1.0 / a;
    let upper = (t - s).powf(a);
    let (val, _) = integrate(
        |v: f64| (s + v.powf(inv)).powf(a) * inv,
        0.0,
        upper,
        1e-13 * upper.max(1e-300) * t.powf(a),
    );
    h.c_h() * s.powf(-a) * val
}

/// `dK_H/dt (t, s) = c_H (t/s)^{H-1/2} (t-s)^{H-3/2}`.
pub fn kernel_kh_dt(t: f64, s: f64, h: HurstParam) -> Result<f64> {
    if !(s > 0.0) || !(s < t) {
        return arg(format!("kernel derivative needs 0 < s < t, got s={s}, t={t}"));
    }
    let hv = h.value();
    Ok(h.c_h() * (t / s).powf(hv - 0.5) * (t - s).powf(hv - 1.5))
}

fn check_cells(name: &str, f: &[f64], grid: &TimeGrid) -> Result<()> {
    if f.len() != grid.steps() {
        return arg(format!(
            "{name} has {} cell values, grid has {} cells",
            f.len(),
            grid.steps()
        ));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return arg(format!("{name} contains non-finite values"));
    }
    Ok(())
}

/// Cell values of `1_{[0,t]}` for a grid point `t`.
pub fn indicator(grid: &TimeGrid, t: f64) -> Result<Vec<f64>> {
    let m = grid.index_of(t)?;
    Ok((0..grid.steps()).map(|j| if j < m { 1.0 } else { 0.0 }).collect())
}

/// Evaluates `(K*_H phi)(s) = int_s^T phi(t) dK_H/dt(t, s) dt` at `s > 0`.
///
/// Exact for step functions once `K_H` is known: each cell contributes
/// `phi_j [K_H(t_{j+1}, s) - K_H(max(t_j, s), s)]`.
pub fn k_star_apply(phi: &[f64], h: HurstParam, grid: &TimeGrid, s: f64) -> Result<f64> {
    check_cells("phi", phi, grid)?;
    if !(s > 0.0) || s > grid.horizon() {
        return arg(format!("K* evaluation point must lie in (0, T], got {s}"));
    }
    let mut acc = 0.0;
    let mut prev = 0.0;
    let mut prev_end = f64::NAN;
    for (j, &v) in phi.iter().enumerate() {
        let (a, b) = (grid.t(j), grid.t(j + 1));
        if b <= s {
            continue;
        }
        let lo_val = if a <= s {
            0.0
        } else if a == prev_end {
            prev
        } else {
            kh_unchecked(a, s, h)
        };
        let hi_val = kh_unchecked(b, s, h);
        acc += v * (hi_val - lo_val);
        prev = hi_val;
        prev_end = b;
    }
    Ok(acc)
}

/// `K*_H phi` at each point of `points`.
pub fn k_star_sampled(
    phi: &[f64],
    h: HurstParam,
    grid: &TimeGrid,
    points: &[f64],
) -> Result<Vec<f64>> {
    points.iter().map(|&s| k_star_apply(phi, h, grid, s)).collect()
}

/// Cell-pair weights `alpha_H int_{I_j} int_{I_k} |u - v|^{2H-2} du dv`.
///
/// The integral has the closed form
/// `R_H(b,d) - R_H(a,d) - R_H(b,c) + R_H(a,c)` for `I_j = [a,b]`,
/// `I_k = [c,d]`; it is evaluated in the cancellation-free form.
pub fn cell_weights(grid: &TimeGrid, h: HurstParam) -> DMatrix<f64> {
    let n = grid.steps();
    let e = 2.0 * h.value();
    let p = |x: f64| x.abs().powf(e);
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        let (a, b) = (grid.t(j), grid.t(j + 1));
        for k in 0..=j {
            let (c, d) = (grid.t(k), grid.t(k + 1));
            let v = 0.5 * (p(b - c) - p(a - c) - p(b - d) + p(a - d));
            w[(j, k)] = v;
            w[(k, j)] = v;
        }
    }
    w
}

/// `<f, g>_H` for step functions on `grid`.
pub fn inner_h(f: &[f64], g: &[f64], h: HurstParam, grid: &TimeGrid) -> Result<f64> {
    check_cells("f", f, grid)?;
    check_cells("g", g, grid)?;
    let w = cell_weights(grid, h);
    Ok(inner_with_weights(f, g, &w))
}

pub(crate) fn inner_with_weights(f: &[f64], g: &[f64], w: &DMatrix<f64>) -> f64 {
    let n = f.len();
    let mut acc = 0.0;
    for j in 0..n {
        if f[j] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for k in 0..n {
            row += w[(j, k)] * g[k];
        }
        acc += f[j] * row;
    }
    acc
}

fn check_order(a: f64) -> Result<()> {
    if !(a > 0.0 && a < 0.5) {
        return arg(format!("fractional order must lie in (0, 1/2), got {a}"));
    }
    Ok(())
}

fn frac_at(f: &[f64], a: f64, grid: &TimeGrid, x: f64, inv_gamma: f64) -> f64 {
    let mut acc = 0.0;
    for (j, &v) in f.iter().enumerate() {
        let (lo, hi) = (grid.t(j), grid.t(j + 1));
        if hi <= x || v == 0.0 {
            continue;
        }
        acc += v * ((hi - x).powf(a) - (lo.max(x) - x).powf(a));
    }
    acc * inv_gamma
}

/// Right-sided Riemann-Liouville integral
/// `(I^a_{T-} f)(x) = Gamma(a)^{-1} int_x^T f(s) (s - x)^{a-1} ds`
/// of a step function, evaluated exactly at each `x` in `points`
/// (points left of 0 are allowed).
pub fn fractional_integral_right(
    f: &[f64],
    a: f64,
    grid: &TimeGrid,
    points: &[f64],
) -> Result<Vec<f64>> {
    check_order(a)?;
    check_cells("f", f, grid)?;
    let inv_gamma = 1.0 / gamma(a + 1.0);
    Ok(points
        .iter()
        .map(|&x| {
            if x >= grid.horizon() {
                0.0
            } else {
                frac_at(f, a, grid, x, inv_gamma)
            }
        })
        .collect())
}

/// `int_{-inf}^T |(I^{H-1/2}_{T-} f)(x)|^2 dx` for a step function
/// extended by zero outside `[0, T]`, by adaptive quadrature.
///
/// `||f||_H^2` is a fixed multiple of this energy; the multiple depends
/// only on `H` and is obtained by evaluating both sides on `1_{[0,T]}`.
pub fn fractional_energy(f: &[f64], h: HurstParam, grid: &TimeGrid, tol: f64) -> Result<f64> {
    check_cells("f", f, grid)?;
    let a = h.value() - 0.5;
    let inv_gamma = 1.0 / gamma(a + 1.0);
    let sq = |x: f64| {
        let v = frac_at(f, a, grid, x, inv_gamma);
        v * v
    };
    let mut total = 0.0;
    for j in 0..grid.steps() {
        total += integrate(sq, grid.t(j), grid.t(j + 1), tol / grid.steps() as f64).0;
    }
    total += integrate(sq, -1.0, 0.0, tol).0;
    let p = 1.0 / (2.0 - 2.0 * h.value());
    let tail = |y: f64| {
        if y <= 0.0 {
            return 0.0;
        }
        let x = -y.powf(-p);
        sq(x) * p * y.powf(-p - 1.0)
    };
    total += integrate(tail, 0.0, 1.0, tol).0;
    Ok(total)
}

/// Stable 64-bit mix used to derive independent child seeds.
///
/// `derive_seed(seed, i) = splitmix64(seed ^ splitmix64(i + 0x9E3779B97F4A7C15))`,
/// where `splitmix64` is the finaliser of Steele, Lea and Flood.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Covariance matrix `[R_H(t_j, t_k)]` over the nonzero grid points.
pub fn covariance_matrix(grid: &TimeGrid, h: HurstParam) -> DMatrix<f64> {
    let pts = &grid.points()[1..];
    let n = pts.len();
    DMatrix::from_fn(n, n, |j, k| rh(pts[j], pts[k], h.value()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    #[default]
    Cholesky,
    /// Davies-Harte circulant embedding; needs a uniform grid.
    Circulant,
}

enum Engine {
    Cholesky(DMatrix<f64>),
    Circulant {
        sqrt_eig: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
}

/// Reusable exact sampler of scalar FBM on a fixed grid.
pub struct FbmSampler {
    grid: TimeGrid,
    hurst: HurstParam,
    engine: Engine,
    used: SamplerMethod,
}

impl std::fmt::Debug for FbmSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FbmSampler")
            .field("steps", &self.grid.steps())
            .field("hurst", &self.hurst)
            .field("method", &self.used)
            .finish()
    }
}

impl FbmSampler {
    pub fn new(hurst: HurstParam, grid: &TimeGrid, method: SamplerMethod) -> Result<Self> {
        let engine = match method {
            SamplerMethod::Cholesky => Engine::Cholesky(cholesky_factor(grid, hurst)?),
            SamplerMethod::Circulant => {
                if !grid.is_uniform() {
                    return arg("circulant embedding needs a uniform grid");
                }
                match circulant_spectrum(grid, hurst) {
                    Some(sqrt_eig) => {
                        let fft = FftPlanner::new().plan_fft_forward(sqrt_eig.len());
                        Engine::Circulant { sqrt_eig, fft }
                    }
                    None => Engine::Cholesky(cholesky_factor(grid, hurst)?),
                }
            }
        };
        let used = match engine {
            Engine::Cholesky(_) => SamplerMethod::Cholesky,
            Engine::Circulant { .. } => SamplerMethod::Circulant,
        };
        Ok(Self {
            grid: grid.clone(),
            hurst,
            engine,
            used,
        })
    }

    /// Method actually in use after any fall-back.
    pub fn method(&self) -> SamplerMethod {
        self.used
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    /// Path values at every grid point, starting with `0`.
    pub fn sample(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.grid.steps();
        let mut path = Vec::with_capacity(n + 1);
        path.push(0.0);
        match &self.engine {
            Engine::Cholesky(l) => {
                let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                for j in 0..n {
                    let mut acc = 0.0;
                    for (k, zk) in z.iter().enumerate().take(j + 1) {
                        acc += l[(j, k)] * zk;
                    }
                    path.push(acc);
                }
            }
            Engine::Circulant { sqrt_eig, fft } => {
                let mut buf: Vec<Complex<f64>> = sqrt_eig
                    .iter()
                    .map(|&s| {
                        let re: f64 = StandardNormal.sample(&mut rng);
                        let im: f64 = StandardNormal.sample(&mut rng);
                        Complex::new(s * re, s * im)
                    })
                    .collect();
                fft.process(&mut buf);
                let mut acc = 0.0;
                for c in buf.iter().take(n) {
                    acc += c.re;
                    path.push(acc);
                }
            }
        }
        path
    }
}

fn cholesky_factor(grid: &TimeGrid, h: HurstParam) -> Result<DMatrix<f64>> {
    let c = covariance_matrix(grid, h);
    let scale = c.diagonal().max();
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut m = c.clone();
        for j in 0..m.nrows() {
            m[(j, j)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Ok(ch.l());
        }
        jitter = if jitter == 0.0 { 1e-14 * scale } else { jitter * 10.0 };
    }
    let min_eig = SymmetricEigen::new(c).eigenvalues.min();
    Err(Error::Sampler(format!(
        "covariance not positive definite after jitter {jitter:.1e}; smallest eigenvalue {min_eig:.3e}"
    )))
}

/// Square roots of `lambda_k / m` for the circulant embedding of the
/// increment covariance, or `None` when the spectrum is materially negative.
fn circulant_spectrum(grid: &TimeGrid, h: HurstParam) -> Option<Vec<f64>> {
    let n = grid.steps();
    let dt = grid.dt(0);
    let e = 2.0 * h.value();
    let scale = dt.powf(e);
    let gam = |k: usize| {
        let k = k as f64;
        0.5 * scale * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
    };
    let m = 2 * n;
    let mut row: Vec<Complex<f64>> = (0..m)
        .map(|j| {
            let k = if j <= n { j } else { m - j };
            Complex::new(gam(k), 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(m).process(&mut row);
    let max = row.iter().map(|c| c.re).fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(m);
    for c in &row {
        if c.re < -1e-10 * max {
            return None;
        }
        out.push((c.re.max(0.0) / m as f64).sqrt());
    }
    Some(out)
}

/// One exact FBM path on `grid` by Cholesky factorisation.
pub fn sample_fbm(h: HurstParam, grid: &TimeGrid, seed: u64) -> Result<Vec<f64>> {
    Ok(FbmSampler::new(h, grid, SamplerMethod::Cholesky)?.sample(seed))
}

/// Eigenvalues `lambda_1 >= lambda_2 >= ... > 0` of the noise covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceClassSpec {
    lambdas: Vec<f64>,
}

impl TraceClassSpec {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return arg("trace-class spec needs at least one mode");
        }
        if lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return arg("eigenvalues must be positive and finite");
        }
        if lambdas.windows(2).any(|w| w[1] > w[0]) {
            return arg("eigenvalues must be non-increasing");
        }
        Ok(Self { lambdas })
    }

    /// `lambda_i = i^{-p}` for `i = 1..=modes`.
    pub fn power_law(modes: usize, p: f64) -> Result<Self> {
        if !(p > 2.0) {
            return arg(format!("power-law exponent must exceed 2 for summable square roots, got {p}"));
        }
        Self::new((1..=modes).map(|i| (i as f64).powf(-p)).collect())
    }

    pub fn modes(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambda(&self, i: usize) -> f64 {
        self.lambdas[i]
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn sqrt_lambda(&self, i: usize) -> f64 {
        self.lambdas[i].sqrt()
    }

    pub fn trace(&self) -> f64 {
        self.lambdas.iter().sum()
    }
}

/// Sampled trace-class FBM: one scalar path per mode on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFbmPath {
    pub spec: TraceClassSpec,
    pub grid: TimeGrid,
    pub hurst: HurstParam,
    pub values: Vec<Vec<f64>>,
}

impl QFbmPath {
    /// Builds a path set from explicit per-mode values.
    pub fn from_values(
        spec: TraceClassSpec,
        grid: TimeGrid,
        hurst: HurstParam,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if values.len() != spec.modes() {
            return arg(format!(
                "expected {} mode paths, got {}",
                spec.modes(),
                values.len()
            ));
        }
        if values.iter().any(|v| v.len() != grid.len()) {
            return arg("mode path length does not match grid");
        }
        Ok(Self {
            spec,
            grid,
            hurst,
            values,
        })
    }

    /// All-zero path set (a direction with no components).
    pub fn zeros(spec: TraceClassSpec, grid: TimeGrid, hurst: HurstParam) -> Self {
        let values = vec![vec![0.0; grid.len()]; spec.modes()];
        Self {
            spec,
            grid,
            hurst,
            values,
        }
    }

    pub fn modes(&self) -> usize {
        self.spec.modes()
    }

    pub fn mode(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    /// `beta^i(t_{k+1}) - beta^i(t_k)`.
    pub fn increment(&self, i: usize, k: usize) -> f64 {
        self.values[i][k + 1] - self.values[i][k]
    }

    /// `self + eps * dir`, mode by mode.
    pub fn shifted(&self, dir: &QFbmPath, eps: f64) -> Result<Self> {
        if dir.modes() != self.modes() || dir.grid.len() != self.grid.len() {
            return arg("direction shape does not match path");
        }
        let mut out = self.clone();
        for (v, d) in out.values.iter_mut().zip(&dir.values) {
            for (a, b) in v.iter_mut().zip(d) {
                *a += eps * b;
            }
        }
        Ok(out)
    }

    /// Every `factor`-th grid value, on the coarsened grid.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let values = self
            .values
            .iter()
            .map(|v| v.iter().step_by(factor).copied().collect())
            .collect();
        Ok(Self {
            spec: self.spec.clone(),
            grid,
            hurst: self.hurst,
            values,
        })
    }

    /// Grid version of `sum_i sqrt(lambda_i) ||beta^i||_{W^{gamma,delta}_T}`.
    pub fn weighted_norm(&self, gamma_exp: f64, delta_exp: f64) -> f64 {
        (0..self.modes())
            .map(|i| self.spec.sqrt_lambda(i) * holder_weighted(&self.values[i], &self.grid, gamma_exp, delta_exp))
            .sum()
    }
}

/// `sup_{s<t} |w(t) - w(s)| / (|t-s|^gamma (1 + t + s)^delta)` over grid pairs.
pub fn holder_weighted(w: &[f64], grid: &TimeGrid, gamma_exp: f64, delta_exp: f64) -> f64 {
    let p = grid.points();
    let mut best = 0.0f64;
    for j in 0..p.len() {
        for k in 0..j {
            let r = (w[j] - w[k]).abs()
                / ((p[j] - p[k]).powf(gamma_exp) * (1.0 + p[j] + p[k]).powf(delta_exp));
            best = best.max(r);
        }
    }
    best
}

/// Independent FBMs for every mode; mode `i` uses `derive_seed(seed, i)`.
pub fn sample_qfbm(
    spec: &TraceClassSpec,
    h: HurstParam,
    grid: &TimeGrid,
    seed: u64,
) -> Result<QFbmPath> {
    let sampler = FbmSampler::new(h, grid, SamplerMethod::Cholesky)?;
    Ok(sample_qfbm_with(spec, &sampler, seed))
}

/// As [`sample_qfbm`] with a prepared sampler.
pub fn sample_qfbm_with(spec: &TraceClassSpec, sampler: &FbmSampler, seed: u64) -> QFbmPath {
    let values = (0..spec.modes())
        .map(|i| sampler.sample(derive_seed(seed, i as u64)))
        .collect();
    QFbmPath {
        spec: spec.clone(),
        grid: sampler.grid().clone(),
        hurst: sampler.hurst(),
        values,
    }
}

/// Cameron-Martin lift of a step function `h` into mode `mode`.
///
/// Component `mode` is `t -> int_0^t K_H(t,s) (K*_H h)(s) ds`, which equals
/// `<1_{[0,t]}, h>_H`; the other components are zero.
pub fn cameron_martin_lift(
    h_fn: &[f64],
    mode: usize,
    spec: &TraceClassSpec,
    h: HurstParam,
    grid: &TimeGrid,
) -> Result<QFbmPath> {
    check_cells("h", h_fn, grid)?;
    if mode >= spec.modes() {
        return arg(format!("mode {mode} out of range for {} modes", spec.modes()));
    }
    let w = cell_weights(grid, h);
    let wh = &w * DVector::from_column_slice(h_fn);
    let mut out = QFbmPath::zeros(spec.clone(), grid.clone(), h);
    let comp = &mut out.values[mode];
    let mut acc = 0.0;
    for c in 0..grid.steps() {
        acc += wh[c];
        comp[c + 1] = acc;
    }
    Ok(out)
}
