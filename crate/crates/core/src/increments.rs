//! Increment calculus on grids: `delta`, the semigroup-twisted `delta_hat`,
//! Hölder-type norms, the regularized noise and the convolutional Young
//! integral computed by dyadic refinement.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::fbm::QFbmPath;
use crate::grid::TimeGrid;
use crate::semigroup::{GalerkinVector, SpectralSemigroup};

/// Two-parameter increment `g_{ts}` for grid pairs `t >= s`, packed by rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment2 {
    grid: TimeGrid,
    dim: usize,
    data: Vec<GalerkinVector>,
}

fn tri(j: usize, k: usize) -> usize {
    j * (j + 1) / 2 + k
}

impl Increment2 {
    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        let n = grid.len();
        Self {
            grid: grid.clone(),
            dim,
            data: vec![GalerkinVector::zeros(dim); n * (n + 1) / 2],
        }
    }

    /// Builds `g_{t_j t_k} = f(j, k)` for `j >= k`.
    pub fn from_fn<F: FnMut(usize, usize) -> GalerkinVector>(grid: &TimeGrid, dim: usize, mut f: F) -> Self {
        let n = grid.len();
        let mut data = Vec::with_capacity(n * (n + 1) / 2);
        for j in 0..n {
            for k in 0..=j {
                data.push(f(j, k));
            }
        }
        Self {
            grid: grid.clone(),
            dim,
            data,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `g_{t_j t_k}`, `j >= k`.
    pub fn get(&self, j: usize, k: usize) -> &GalerkinVector {
        assert!(j >= k, "increments are stored for t >= s");
        &self.data[tri(j, k)]
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// `max_{j >= k} ||g_{t_j t_k}||`.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

fn check_path(f: &[GalerkinVector], grid: &TimeGrid) -> Result<usize> {
    if f.len() != grid.len() {
        return arg(format!("path has {} points, grid has {}", f.len(), grid.len()));
    }
    let dim = f[0].len();
    if f.iter().any(|v| v.len() != dim) {
        return arg("path vectors have inconsistent dimensions");
    }
    Ok(dim)
}

/// `(delta f)_{ts} = f_t - f_s`.
pub fn delta_1(f: &[GalerkinVector], grid: &TimeGrid) -> Result<Increment2> {
    let dim = check_path(f, grid)?;
    Ok(Increment2::from_fn(grid, dim, |j, k| &f[j] - &f[k]))
}

/// `(delta_hat f)_{ts} = f_t - S(t - s) f_s`.
pub fn delta_hat_1(f: &[GalerkinVector], grid: &TimeGrid, sg: &SpectralSemigroup) -> Result<Increment2> {
    let dim = check_path(f, grid)?;
    if dim != sg.dim() {
        return arg("path dimension does not match semigroup");
    }
    let p = grid.points();
    Ok(Increment2::from_fn(grid, dim, |j, k| {
        &f[j] - sg.apply_s_unchecked(p[j] - p[k], &f[k])
    }))
}

/// Largest entry of `(delta g)_{tsu} = g_{tu} - g_{ts} - g_{su}` over all
/// grid triples `t >= s >= u`.
pub fn delta_2_max(g: &Increment2) -> f64 {
    let n = g.grid.len();
    let mut worst = 0.0f64;
    for j in 0..n {
        for k in 0..=j {
            for l in 0..=k {
                let r = g.get(j, l) - g.get(j, k) - g.get(k, l);
                worst = worst.max(r.amax());
            }
        }
    }
    worst
}

/// Largest norm of `(delta_hat g)_{tsu} = g_{tu} - g_{ts} - S(t-s) g_{su}`
/// over all grid triples.
pub fn delta_hat_2_max(g: &Increment2, sg: &SpectralSemigroup) -> f64 {
    let n = g.grid.len();
    let p = g.grid.points();
    let mut worst = 0.0f64;
    for j in 0..n {
        for k in 0..=j {
            for l in 0..=k {
                let r = g.get(j, l) - g.get(j, k) - sg.apply_s_unchecked(p[j] - p[k], g.get(k, l));
                worst = worst.max(r.norm());
            }
        }
    }
    worst
}

/// `||g||_{mu, alpha} = max_{t > s} |g_{ts}|_alpha / (t - s)^mu` on the grid.
pub fn holder_norm(g: &Increment2, sg: &SpectralSemigroup, mu: f64, alpha: f64) -> Result<f64> {
    if mu < 0.0 {
        return arg(format!("Hölder exponent must be nonnegative, got {mu}"));
    }
    if g.dim != sg.dim() {
        return arg("increment dimension does not match semigroup");
    }
    let p = g.grid.points();
    let mut best = 0.0f64;
    for j in 0..p.len() {
        for k in 0..j {
            let v = sg.norm_alpha(alpha, g.get(j, k))? / (p[j] - p[k]).powf(mu);
            best = best.max(v);
        }
    }
    Ok(best)
}

/// `X^{x,i}_{ts} = S(t - s)(x^i_t - x^i_s) sqrt(lambda_i)`, held lazily.
///
/// Each `X_{ts}` is a diagonal operator; [`RegularizedNoise::diag`] returns
/// its diagonal.
#[derive(Debug, Clone)]
pub struct RegularizedNoise<'a> {
    sg: &'a SpectralSemigroup,
    path: &'a QFbmPath,
    mode: usize,
}

impl<'a> RegularizedNoise<'a> {
    pub fn new(sg: &'a SpectralSemigroup, path: &'a QFbmPath, mode: usize) -> Result<Self> {
        if mode >= path.modes() {
            return arg(format!("mode {mode} out of range for {} modes", path.modes()));
        }
        Ok(Self { sg, path, mode })
    }

    /// Diagonal of `X_{t_j t_k}`.
    pub fn diag(&self, j: usize, k: usize) -> GalerkinVector {
        let p = self.path.grid.points();
        let x = self.path.mode(self.mode);
        let w = (x[j] - x[k]) * self.path.spec.sqrt_lambda(self.mode);
        GalerkinVector::from_vec(self.sg.factors(p[j] - p[k])) * w
    }

    /// Worst residual of `(delta_hat X)_{tsu} - X_{ts} a_{su}` over all grid
    /// triples, with `a_{su} = S(s - u) - Id`, relative to `max ||X||`.
    pub fn chen_residual(&self) -> f64 {
        let grid = &self.path.grid;
        let p = grid.points();
        let n = grid.len();
        let cache = Increment2::from_fn(grid, self.sg.dim(), |j, k| self.diag(j, k));
        let scale = cache.max_norm().max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for j in 0..n {
            for k in 0..=j {
                let xts = cache.get(j, k);
                let sts = self.sg.factors(p[j] - p[k]);
                for l in 0..=k {
                    let xtu = cache.get(j, l);
                    let xsu = cache.get(k, l);
                    let ssu = self.sg.factors(p[k] - p[l]);
                    let mut r = 0.0f64;
                    for m in 0..self.sg.dim() {
                        let lhs = xtu[m] - xts[m] - sts[m] * xsu[m];
                        let rhs = xts[m] * (ssu[m] - 1.0);
                        r += (lhs - rhs) * (lhs - rhs);
                    }
                    worst = worst.max(r.sqrt());
                }
            }
        }
        worst / scale
    }
}

/// Germ used on each dyadic piece `[a, b]` of the convolution integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Germ {
    /// `S(t - a) z_a (x_b - x_a)`.
    LeftPoint,
    /// Exact integral of `S(t - u) z_u x'_u` for `z`, `x` linear on `[a, b]`.
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub tol: f64,
    pub min_depth: usize,
    pub max_depth: usize,
    pub germ: Germ,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            min_depth: 2,
            max_depth: 16,
            germ: Germ::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvolutionResult {
    pub value: GalerkinVector,
    /// Depth at which successive levels first agreed within `tol`.
    pub depth: usize,
    /// Differences between successive levels, starting at level 1.
    pub level_diffs: Vec<f64>,
}

/// `int_0^h r^k e^{-mu r} dr` for `k = 0, 1`.
pub(crate) fn exp_moments(mu: f64, h: f64) -> (f64, f64) {
    let y = mu * h;
    if y == 0.0 {
        return (h, 0.5 * h * h);
    }
    let i0 = if y.abs() < 1e-8 { h * (1.0 - 0.5 * y) } else { -(-y).exp_m1() / mu };
    let ratio = if y.abs() < 0.1 {
        let mut term = 1.0;
        let mut acc = 0.0;
        for n in 2..16u32 {
            if n > 2 {
                term *= -y / n as f64;
            } else {
                term = 0.5;
            }
            acc += term * (n - 1) as f64;
        }
        acc
    } else {
        (1.0 - (-y).exp() * (1.0 + y)) / (y * y)
    };
    (i0, h * h * ratio)
}

/// Sum of germs over `pieces` equal subintervals of `[s, t]`.
#[allow(clippy::too_many_arguments)]
fn riemann_level<Z, X>(
    sg: &SpectralSemigroup,
    lambdas: &[f64],
    z: &Z,
    x: &X,
    s: f64,
    t: f64,
    pieces: usize,
    germ: Germ,
) -> GalerkinVector
where
    Z: Fn(usize, f64) -> GalerkinVector,
    X: Fn(usize, f64) -> f64,
{
    let n = sg.dim();
    let mut total = GalerkinVector::zeros(n);
    let h = (t - s) / pieces as f64;
    for (i, lam) in lambdas.iter().enumerate() {
        let w = lam.sqrt();
        let mut za = z(i, s);
        let mut xa = x(i, s);
        for p in 0..pieces {
            let a = s + h * p as f64;
            let b = if p + 1 == pieces { t } else { s + h * (p + 1) as f64 };
            let zb = z(i, b);
            let xb = x(i, b);
            let dx = xb - xa;
            if dx != 0.0 {
                match germ {
                    Germ::LeftPoint => {
                        for m in 0..n {
                            total[m] += w * (-sg.mu(m) * (t - a)).exp() * za[m] * dx;
                        }
                    }
                    Germ::Linear => {
                        let len = b - a;
                        for m in 0..n {
                            let mu = sg.mu(m);
                            let (i0, i1) = exp_moments(mu, len);
                            let dz = zb[m] - za[m];
                            let inner = zb[m] * i0 - dz / len * i1;
                            total[m] += w * (-mu * (t - b)).exp() * inner * dx / len;
                        }
                    }
                }
            }
            za = zb;
            xa = xb;
        }
    }
    total
}

/// `sum_i sqrt(lambda_i) int_s^t S(t - u) z^i(u) dx^i(u)` for integrands
/// given as functions of `(mode, time)`, by dyadic refinement of `[s, t]`.
pub fn convolution_integral_fn<Z, X>(
    sg: &SpectralSemigroup,
    lambdas: &[f64],
    z: Z,
    x: X,
    s: f64,
    t: f64,
    opts: &RefineOptions,
) -> Result<ConvolutionResult>
where
    Z: Fn(usize, f64) -> GalerkinVector,
    X: Fn(usize, f64) -> f64,
{
    if !(s < t) {
        if s == t {
            return Ok(ConvolutionResult {
                value: GalerkinVector::zeros(sg.dim()),
                depth: 0,
                level_diffs: Vec::new(),
            });
        }
        return arg(format!("convolution integral needs s <= t, got [{s}, {t}]"));
    }
    if !(opts.tol > 0.0) {
        return arg("tolerance must be positive");
    }
    let mut prev = riemann_level(sg, lambdas, &z, &x, s, t, 1, opts.germ);
    let mut diffs = Vec::new();
    for depth in 1..=opts.max_depth {
        let cur = riemann_level(sg, lambdas, &z, &x, s, t, 1 << depth, opts.germ);
        let d = (&cur - &prev).norm();
        diffs.push(d);
        if !d.is_finite() {
            return Err(Error::Divergence { step: depth });
        }
        if depth >= opts.min_depth && d < opts.tol {
            return Ok(ConvolutionResult {
                value: cur,
                depth,
                level_diffs: diffs,
            });
        }
        prev = cur;
    }
    let last = diffs[diffs.len() - 1];
    let previous = if diffs.len() > 1 { diffs[diffs.len() - 2] } else { f64::NAN };
    Err(Error::Convergence {
        depth: opts.max_depth,
        last,
        previous,
    })
}

/// Piecewise-linear interpolation of grid data.
pub(crate) fn interp_scalar(grid: &TimeGrid, v: &[f64], u: f64) -> f64 {
    let k = grid.cell_of(u);
    let (a, b) = (grid.t(k), grid.t(k + 1));
    let w = ((u - a) / (b - a)).clamp(0.0, 1.0);
    v[k] + w * (v[k + 1] - v[k])
}

pub(crate) fn interp_vector(grid: &TimeGrid, v: &[GalerkinVector], u: f64) -> GalerkinVector {
    let k = grid.cell_of(u);
    let (a, b) = (grid.t(k), grid.t(k + 1));
    let w = ((u - a) / (b - a)).clamp(0.0, 1.0);
    &v[k] * (1.0 - w) + &v[k + 1] * w
}

/// Convolution integral for grid data: `z[i][k]` is `z^i(t_k)` and `x` the
/// driving path; both are interpolated linearly between grid points.
pub fn convolution_integral(
    sg: &SpectralSemigroup,
    z: &[Vec<GalerkinVector>],
    x: &QFbmPath,
    s: f64,
    t: f64,
    opts: &RefineOptions,
) -> Result<ConvolutionResult> {
    let grid = &x.grid;
    if z.len() != x.modes() {
        return arg(format!("integrand has {} modes, noise has {}", z.len(), x.modes()));
    }
    for zi in z {
        if zi.len() != grid.len() {
            return arg("integrand length does not match grid");
        }
        if zi.iter().any(|v| v.len() != sg.dim()) {
            return arg("integrand dimension does not match semigroup");
        }
    }
    if s < 0.0 || t > grid.horizon() * (1.0 + 1e-12) {
        return arg(format!("interval [{s}, {t}] outside the grid"));
    }
    convolution_integral_fn(
        sg,
        x.spec.lambdas(),
        |i, u| interp_vector(grid, &z[i], u),
        |i, u| interp_scalar(grid, x.mode(i), u),
        s,
        t,
        opts,
    )
}

/// `sum_{i > M} i^{-p/2}` bounded by `M^{1 - p/2} / (p/2 - 1)`; multiply by
/// a path-norm bound to get the mode-truncation tail of a noise sum.
pub fn power_law_sqrt_tail(modes: usize, p: f64) -> f64 {
    let q = 0.5 * p;
    if q <= 1.0 {
        return f64::INFINITY;
    }
    (modes as f64).powf(1.0 - q) / (q - 1.0)
}
