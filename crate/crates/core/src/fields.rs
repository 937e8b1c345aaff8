//! Vector fields on the Galerkin truncation with exact derivatives of every
//! order, fields in the semigroup range `S(T0)E`, Lie brackets and the
//! bracket hierarchy.

use std::sync::Arc;

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::exponents::AssumptionProfile;
use crate::semigroup::{GalerkinMatrix, GalerkinVector, SpectralSemigroup};

/// A smooth map `E -> E` on the truncation.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    /// `nabla^n V(x)(h_1, ..., h_n)` with `n = dirs.len()`; `n = 0` is `V(x)`.
    fn derivative(&self, x: &GalerkinVector, dirs: &[&GalerkinVector]) -> GalerkinVector;

    /// `(T0, S)` when every value and derivative lies in `S(T0)E`.
    fn range(&self) -> Option<(f64, &SpectralSemigroup)> {
        None
    }

    /// `S(-T0) nabla^n V(x)(dirs)`, computed without amplification.
    fn preimage_derivative(&self, _x: &GalerkinVector, _dirs: &[&GalerkinVector]) -> Option<GalerkinVector> {
        None
    }

    /// `S(-T0) nabla^{n+1} V(x)(dirs, S(T0) w)`.
    ///
    /// Defined for range fields and also for the drift `A x + F(x)`, whose
    /// derivative along `S(T0) w` is `S(T0)(A w) + nabla F(x) S(T0) w`.
    fn preimage_along_range(
        &self,
        x: &GalerkinVector,
        dirs: &[&GalerkinVector],
        w: &GalerkinVector,
    ) -> Option<GalerkinVector> {
        let (t0, sg) = self.range()?;
        let lifted = sg.apply_s_unchecked(t0, w);
        let mut all: Vec<&GalerkinVector> = dirs.to_vec();
        all.push(&lifted);
        self.preimage_derivative(x, &all)
    }

    /// Smoothing time of [`VectorField::preimage_along_range`].
    fn along_range_time(&self) -> Option<f64> {
        self.range().map(|(t0, _)| t0)
    }

    fn label(&self) -> String;

    fn value(&self, x: &GalerkinVector) -> GalerkinVector {
        self.derivative(x, &[])
    }

    /// `nabla V(x) h`.
    fn jvp(&self, x: &GalerkinVector, h: &GalerkinVector) -> GalerkinVector {
        self.derivative(x, &[h])
    }

    /// Jacobian matrix `nabla V(x)`, column by column.
    fn jacobian(&self, x: &GalerkinVector) -> GalerkinMatrix {
        let n = self.dim();
        let mut m = GalerkinMatrix::zeros(n, n);
        for p in 0..n {
            let e = GalerkinVector::from_fn(n, |i, _| if i == p { 1.0 } else { 0.0 });
            m.set_column(p, &self.jvp(x, &e));
        }
        m
    }

    /// `S(-T0) nabla V(x)` as a matrix.
    fn preimage_jacobian(&self, x: &GalerkinVector) -> Option<GalerkinMatrix> {
        let n = self.dim();
        let mut m = GalerkinMatrix::zeros(n, n);
        for p in 0..n {
            let e = GalerkinVector::from_fn(n, |i, _| if i == p { 1.0 } else { 0.0 });
            m.set_column(p, &self.preimage_derivative(x, &[&e])?);
        }
        Some(m)
    }
}

pub type FieldRef = Arc<dyn VectorField>;

/// `w_m(x) = a_m + sum_p L_{mp} x_p + sum_p b_{mp} sin(c_{mp} x_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineField {
    pub offset: Vec<f64>,
    pub linear: Option<DMatrix<f64>>,
    pub amp: DMatrix<f64>,
    pub freq: DMatrix<f64>,
    #[serde(default)]
    pub name: String,
}

impl SineField {
    pub fn new(
        offset: Vec<f64>,
        linear: Option<DMatrix<f64>>,
        amp: DMatrix<f64>,
        freq: DMatrix<f64>,
    ) -> Result<Self> {
        let n = offset.len();
        if n == 0 {
            return arg("field dimension must be positive");
        }
        if amp.shape() != (n, n) || freq.shape() != (n, n) {
            return arg("amplitude and frequency matrices must be N x N");
        }
        if let Some(l) = &linear {
            if l.shape() != (n, n) {
                return arg("linear part must be N x N");
            }
        }
        if offset.iter().chain(amp.iter()).chain(freq.iter()).any(|v| !v.is_finite()) {
            return arg("field coefficients must be finite");
        }
        Ok(Self {
            offset,
            linear,
            amp,
            freq,
            name: String::new(),
        })
    }

    /// The constant field `v`.
    pub fn constant(v: &GalerkinVector) -> Self {
        let n = v.len();
        Self {
            offset: v.iter().copied().collect(),
            linear: None,
            amp: DMatrix::zeros(n, n),
            freq: DMatrix::zeros(n, n),
            name: String::new(),
        }
    }

    /// `x -> L x`.
    pub fn linear_map(l: DMatrix<f64>) -> Self {
        let n = l.nrows();
        Self {
            offset: vec![0.0; n],
            linear: Some(l),
            amp: DMatrix::zeros(n, n),
            freq: DMatrix::zeros(n, n),
            name: String::new(),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

impl VectorField for SineField {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn derivative(&self, x: &GalerkinVector, dirs: &[&GalerkinVector]) -> GalerkinVector {
        let n = self.dim();
        let order = dirs.len();
        let mut out = GalerkinVector::zeros(n);
        let shift = order as f64 * std::f64::consts::FRAC_PI_2;
        for m in 0..n {
            let mut acc = if order == 0 { self.offset[m] } else { 0.0 };
            if let Some(l) = &self.linear {
                match order {
                    0 => acc += (0..n).map(|p| l[(m, p)] * x[p]).sum::<f64>(),
                    1 => acc += (0..n).map(|p| l[(m, p)] * dirs[0][p]).sum::<f64>(),
                    _ => {}
                }
            }
            for p in 0..n {
                let b = self.amp[(m, p)];
                if b == 0.0 {
                    continue;
                }
                let c = self.freq[(m, p)];
                let prod: f64 = dirs.iter().map(|h| h[p]).product();
                if prod == 0.0 {
                    continue;
                }
                acc += b * c.powi(order as i32) * (c * x[p] + shift).sin() * prod;
            }
            out[m] = acc;
        }
        out
    }

    fn label(&self) -> String {
        if self.name.is_empty() {
            "sine".into()
        } else {
            self.name.clone()
        }
    }
}

/// `w_m(x) = sum_p q_{mp} x_p^2`; unbounded growth, used as an audit control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticField {
    pub coeff: DMatrix<f64>,
}

impl VectorField for QuadraticField {
    fn dim(&self) -> usize {
        self.coeff.nrows()
    }

    fn derivative(&self, x: &GalerkinVector, dirs: &[&GalerkinVector]) -> GalerkinVector {
        let n = self.dim();
        GalerkinVector::from_fn(n, |m, _| {
            (0..n)
                .map(|p| {
                    let q = self.coeff[(m, p)];
                    match dirs.len() {
                        0 => q * x[p] * x[p],
                        1 => 2.0 * q * x[p] * dirs[0][p],
                        2 => 2.0 * q * dirs[0][p] * dirs[1][p],
                        _ => 0.0,
                    }
                })
                .sum()
        })
    }

    fn label(&self) -> String {
        "quadratic".into()
    }
}

/// `V(x) = S(T0) W(x)`.
pub struct RangeField {
    inner: FieldRef,
    t0: f64,
    sg: SpectralSemigroup,
}

impl RangeField {
    pub fn new(inner: FieldRef, t0: f64, sg: SpectralSemigroup) -> Result<Self> {
        if !(t0 > 0.0) || !t0.is_finite() {
            return arg(format!("smoothing time must be positive, got {t0}"));
        }
        if inner.dim() != sg.dim() {
            return arg("field dimension does not match semigroup");
        }
        Ok(Self { inner, t0, sg })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn preimage(&self) -> &FieldRef {
        &self.inner
    }
}

impl VectorField for RangeField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn derivative(&self, x: &GalerkinVector, dirs: &[&GalerkinVector]) -> GalerkinVector {
        self.sg.apply_s_unchecked(self.t0, &self.inner.derivative(x, dirs))
    }

    fn range(&self) -> Option<(f64, &SpectralSemigroup)> {
        Some((self.t0, &self.sg))
    }

    fn preimage_derivative(&self, x: &GalerkinVector, dirs: &[&GalerkinVector]) -> Option<GalerkinVector> {
        Some(self.inner.derivative(x, dirs))
    }

    fn label(&self) -> String {
        format!("S(T0){}", self.inner.label())
    }
}

/// `G_0(x) = A x + F(x)`.
pub struct DriftWithGenerator {
    sg: SpectralSemigroup,
    f: FieldRef,
}

impl DriftWithGenerator {
    pub fn new(sg: SpectralSemigroup, f: FieldRef) -> Result<Self> {
        if f.dim() != sg.dim() {
            return arg("drift dimension does not match semigroup");
        }
        Ok(Self { sg, f })
    }

    pub fn f(&self) -> &FieldRef {
        &self.f
    }

    pub fn semigroup(&self) -> &SpectralSemigroup {
        &self.sg
    }
}

impl VectorField for DriftWithGenerator {
    fn dim(&self) -> usize {
        self.sg.dim()
    }

    fn derivative(&self, x: &GalerkinVector, dirs: &[&GalerkinVector]) -> GalerkinVector {
        let fpart = self.f.derivative(x, dirs);
        match dirs.len() {
            0 => self.sg.apply_generator(x) + fpart,
            1 => self.sg.apply_generator(dirs[0]) + fpart,
            _ => fpart,
        }
    }

    fn preimage_along_range(
        &self,
        x: &GalerkinVector,
        dirs: &[&GalerkinVector],
        w: &GalerkinVector,
    ) -> Option<GalerkinVector> {
        let fpart = self.f.preimage_along_range(x, dirs, w)?;
        if dirs.is_empty() {
            Some(self.sg.apply_generator(w) + fpart)
        } else {
            Some(fpart)
        }
    }

    fn along_range_time(&self) -> Option<f64> {
        self.f.range().map(|(t0, _)| t0)
    }

    fn label(&self) -> String {
        "G0".into()
    }
}

/// `[U, V](x) = nabla V(x) U(x) - nabla U(x) V(x)`.
pub struct Bracket {
    u: FieldRef,
    v: FieldRef,
}

impl Bracket {
    pub fn new(u: FieldRef, v: FieldRef) -> Result<Self> {
        if u.dim() != v.dim() {
            return arg("bracket of fields with different dimensions");
        }
        Ok(Self { u, v })
    }
}

/// Splits `dirs` by the bitmask `mask` into (selected, rest).
fn split<'a>(dirs: &[&'a GalerkinVector], mask: usize) -> (Vec<&'a GalerkinVector>, Vec<&'a GalerkinVector>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, d) in dirs.iter().enumerate() {
        if mask & (1 << i) != 0 {
            a.push(*d);
        } else {
            b.push(*d);
        }
    }
    (a, b)
}

impl VectorField for Bracket {
    fn dim(&self) -> usize {
        self.u.dim()
    }

    fn derivative(&self, x: &GalerkinVector, dirs: &[&GalerkinVector]) -> GalerkinVector {
        let n = dirs.len();
        let mut out = GalerkinVector::zeros(self.dim());
        for mask in 0..(1usize << n) {
            let (sel, rest) = split(dirs, mask);
            let du = self.u.derivative(x, &rest);
            let dv = self.v.derivative(x, &rest);
            let mut a = sel.clone();
            a.push(&du);
            let mut b = sel;
            b.push(&dv);
            out += self.v.derivative(x, &a) - self.u.derivative(x, &b);
        }
        out
    }

    fn range(&self) -> Option<(f64, &SpectralSemigroup)> {
        let (t0, sg) = self.v.range()?;
        match self.u.along_range_time() {
            Some(tu) if tu == t0 => Some((t0, sg)),
            _ => None,
        }
    }

    fn preimage_derivative(&self, x: &GalerkinVector, dirs: &[&GalerkinVector]) -> Option<GalerkinVector> {
        self.range()?;
        let n = dirs.len();
        let mut out = GalerkinVector::zeros(self.dim());
        for mask in 0..(1usize << n) {
            let (sel, rest) = split(dirs, mask);
            let du = self.u.derivative(x, &rest);
            let wv = self.v.preimage_derivative(x, &rest)?;
            let mut a = sel.clone();
            a.push(&du);
            out += self.v.preimage_derivative(x, &a)? - self.u.preimage_along_range(x, &sel, &wv)?;
        }
        Some(out)
    }

    fn label(&self) -> String {
        format!("[{},{}]", self.u.label(), self.v.label())
    }
}

/// `[V, W](x) = nabla W(x) V(x) - nabla V(x) W(x)`.
pub fn lie_bracket(v: &dyn VectorField, w: &dyn VectorField, x: &GalerkinVector) -> GalerkinVector {
    let vx = v.value(x);
    let wx = w.value(x);
    w.jvp(x, &vx) - v.jvp(x, &wx)
}

/// Drift `F` and diffusion fields `G_i`, with the formal drift `G_0`.
#[derive(Clone)]
pub struct FieldSet {
    pub drift: FieldRef,
    pub diffusion: Vec<FieldRef>,
    pub g0: Arc<DriftWithGenerator>,
}

impl FieldSet {
    pub fn new(sg: &SpectralSemigroup, drift: FieldRef, diffusion: Vec<FieldRef>) -> Result<Self> {
        if drift.dim() != sg.dim() || diffusion.iter().any(|g| g.dim() != sg.dim()) {
            return arg("field dimensions must match the semigroup");
        }
        let g0 = Arc::new(DriftWithGenerator::new(sg.clone(), drift.clone())?);
        Ok(Self {
            drift,
            diffusion,
            g0,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn modes(&self) -> usize {
        self.diffusion.len()
    }

    /// `sum_i c_i nabla G_i(x)` as a matrix.
    pub fn diffusion_jacobian_sum(&self, x: &GalerkinVector, c: &[f64]) -> GalerkinMatrix {
        let n = self.dim();
        let mut m = GalerkinMatrix::zeros(n, n);
        for (g, ci) in self.diffusion.iter().zip(c) {
            if *ci != 0.0 {
                m += g.jacobian(x) * *ci;
            }
        }
        m
    }

    /// True when `F` and every `G_i` are range fields with a common `T0`.
    pub fn common_range_time(&self) -> Option<f64> {
        let (t0, _) = self.drift.range()?;
        for g in &self.diffusion {
            match g.range() {
                Some((t, _)) if t == t0 => {}
                _ => return None,
            }
        }
        Some(t0)
    }
}

/// Fields of `V_0, ..., V_k` with their level, evaluated at `x0`.
pub struct BracketHierarchy {
    pub fields: Vec<FieldRef>,
    pub levels: Vec<usize>,
    pub x0: GalerkinVector,
    pub k_max: usize,
    sg: SpectralSemigroup,
}

pub const DEFAULT_FIELD_CAP: usize = 512;
pub const DEFAULT_RANK_TAU: f64 = 1e-8;

/// `V_0 = {G_i}`, `V_{k+1} = V_k ∪ {[G_j, V] : V ∈ V_k, j >= 0}` with `G_0`
/// the drift including the generator. Only fields new at each level are
/// bracketed again, so no field appears twice.
pub fn build_hierarchy(
    fields: &FieldSet,
    x0: &GalerkinVector,
    k_max: usize,
    cap: usize,
) -> Result<BracketHierarchy> {
    if x0.len() != fields.dim() {
        return arg("x0 dimension does not match the fields");
    }
    let mut all: Vec<FieldRef> = fields.diffusion.clone();
    let mut levels = vec![0; all.len()];
    if all.len() > cap {
        return Err(Error::Resource(format!("{} fields exceed cap {cap}", all.len())));
    }
    let mut frontier: Vec<FieldRef> = all.clone();
    let generators: Vec<FieldRef> = std::iter::once(fields.g0.clone() as FieldRef)
        .chain(fields.diffusion.iter().cloned())
        .collect();
    for level in 1..=k_max {
        let next_count = frontier.len() * generators.len();
        if all.len() + next_count > cap {
            return Err(Error::Resource(format!(
                "level {level} would hold {} fields, above cap {cap}",
                all.len() + next_count
            )));
        }
        let mut next = Vec::with_capacity(next_count);
        for v in &frontier {
            for g in &generators {
                next.push(Arc::new(Bracket::new(g.clone(), v.clone())?) as FieldRef);
            }
        }
        levels.extend(std::iter::repeat_n(level, next.len()));
        all.extend(next.iter().cloned());
        frontier = next;
    }
    Ok(BracketHierarchy {
        fields: all,
        levels,
        x0: x0.clone(),
        k_max,
        sg: fields.g0.semigroup().clone(),
    })
}

/// Singular values and numerical rank of a span matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub preimage_coordinates: bool,
}

pub fn numerical_rank(m: &DMatrix<f64>, tau: f64) -> Result<(usize, Vec<f64>)> {
    if !(tau > 0.0 && tau < 1.0) {
        return arg(format!("rank threshold must lie in (0, 1), got {tau}"));
    }
    if m.ncols() == 0 || m.nrows() == 0 {
        return arg("empty span matrix");
    }
    let mut sv: Vec<f64> = SVD::new(m.clone(), false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv[0];
    let rank = if smax == 0.0 { 0 } else { sv.iter().filter(|s| **s > tau * smax).count() };
    Ok((rank, sv))
}

fn is_coordinate_projection(t: &DMatrix<f64>) -> bool {
    t.row_iter().all(|r| {
        r.iter().filter(|v| **v != 0.0).count() == 1 && r.iter().all(|v| *v == 0.0 || *v == 1.0)
    })
}

impl BracketHierarchy {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Number of fields in `V_k`.
    pub fn count_at(&self, k: usize) -> usize {
        self.levels.iter().filter(|l| **l <= k).count()
    }

    /// Span matrix of `V_k(x0)`, in preimage coordinates `S(-T0)V` when
    /// every field admits them; the flag reports which was used.
    pub fn span_matrix(&self, k: usize) -> (DMatrix<f64>, bool) {
        let cols: Vec<&FieldRef> = self
            .fields
            .iter()
            .zip(&self.levels)
            .filter(|(_, l)| **l <= k)
            .map(|(f, _)| f)
            .collect();
        let n = self.x0.len();
        let pre: Option<Vec<GalerkinVector>> = cols
            .iter()
            .map(|f| f.preimage_derivative(&self.x0, &[]))
            .collect();
        let (vecs, flag) = match pre {
            Some(v) => (v, true),
            None => (cols.iter().map(|f| f.value(&self.x0)).collect(), false),
        };
        let mut m = DMatrix::zeros(n, vecs.len());
        for (j, v) in vecs.iter().enumerate() {
            m.set_column(j, v);
        }
        (m, flag)
    }

    /// Rank of `T V_k(x0)`; `T` defaults to the identity.
    pub fn rank_at_level(&self, k: usize, projection: Option<&DMatrix<f64>>, tau: f64) -> Result<RankInfo> {
        if self.is_empty() {
            return arg("empty hierarchy");
        }
        let (m, pre) = self.span_matrix(k);
        let mat = match projection {
            None => m,
            Some(t) => {
                if t.ncols() != m.nrows() {
                    return arg(format!("projection has {} columns, state has {}", t.ncols(), m.nrows()));
                }
                if !pre || is_coordinate_projection(t) {
                    t * m
                } else {
                    let t0 = self.fields[0].range().map(|r| r.0).unwrap_or(0.0);
                    t * self.sg.left_mul(t0, &m)
                }
            }
        };
        let (rank, singular_values) = numerical_rank(&mat, tau)?;
        Ok(RankInfo {
            rank,
            singular_values,
            preimage_coordinates: pre,
        })
    }

    /// Rank of the whole hierarchy `V_{k_max}`.
    pub fn rank_at(&self, projection: Option<&DMatrix<f64>>, tau: f64) -> Result<RankInfo> {
        self.rank_at_level(self.k_max, projection, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Pass,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub assumption: String,
    pub status: AuditStatus,
    pub measured: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn get(&self, name: &str) -> Option<&AuditEntry> {
        self.entries.iter().find(|e| e.assumption == name)
    }

    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.status == AuditStatus::Pass)
    }
}

fn entry(name: &str, ok: bool, measured: Option<f64>, detail: String) -> AuditEntry {
    AuditEntry {
        assumption: name.into(),
        status: if ok { AuditStatus::Pass } else { AuditStatus::Warn },
        measured,
        detail,
    }
}

fn op_norm(m: &GalerkinMatrix) -> f64 {
    SVD::new(m.clone(), false, false).singular_values.max()
}

/// Largest `||nabla^2 V(x)(e_p, e_q)||` over basis pairs.
fn second_norm(f: &dyn VectorField, x: &GalerkinVector) -> f64 {
    let n = f.dim();
    let basis: Vec<GalerkinVector> = (0..n)
        .map(|p| GalerkinVector::from_fn(n, |i, _| if i == p { 1.0 } else { 0.0 }))
        .collect();
    let mut best = 0.0f64;
    for p in 0..n {
        for q in 0..=p {
            best = best.max(f.derivative(x, &[&basis[p], &basis[q]]).norm());
        }
    }
    best
}

/// Growth ratio `g(s) = ||V(s x)|| / (1 + s ||x||)` at `s = 10` and `100`.
fn growth_ratio(f: &dyn VectorField, x: &GalerkinVector) -> f64 {
    let g = |s: f64| f.value(&(x * s)).norm() / (1.0 + s * x.norm());
    g(100.0) / g(10.0).max(1e-300)
}

/// Empirical bounds behind the regularity assumptions, advisory only.
pub fn assumption_audit(
    fields: &FieldSet,
    profile: &AssumptionProfile,
    sample_points: &[GalerkinVector],
) -> AuditReport {
    let mut entries = Vec::new();
    let all: Vec<(&str, &FieldRef)> = std::iter::once(("F", &fields.drift))
        .chain(fields.diffusion.iter().map(|g| ("G", g)))
        .collect();

    let mut lip = 0.0f64;
    let mut grad = 0.0f64;
    let mut second = 0.0f64;
    let mut lip_grad = 0.0f64;
    let mut lip_second = 0.0f64;
    let mut growth = 0.0f64;
    for (_, f) in &all {
        for (a, x) in sample_points.iter().enumerate() {
            let jx = f.jacobian(x);
            grad = grad.max(op_norm(&jx));
            second = second.max(second_norm(f.as_ref(), x));
            if x.norm() > 0.0 {
                growth = growth.max(growth_ratio(f.as_ref(), x));
            }
            for y in &sample_points[..a] {
                let d = (x - y).norm();
                if d == 0.0 {
                    continue;
                }
                lip = lip.max((f.value(x) - f.value(y)).norm() / d);
                lip_grad = lip_grad.max(op_norm(&(&jx - f.jacobian(y))) / d);
                lip_second = lip_second.max((second_norm(f.as_ref(), x) - second_norm(f.as_ref(), y)).abs() / d);
            }
        }
    }
    let finite = |v: f64| v.is_finite();
    entries.push(entry(
        "H1",
        finite(lip) && growth <= 2.0,
        Some(lip),
        format!("Lipschitz constant {lip:.4e}, growth ratio {growth:.3}"),
    ));
    entries.push(entry(
        "H1-growth",
        growth <= 2.0,
        Some(growth),
        if growth <= 2.0 {
            "at most linear growth along scaled sample points".into()
        } else {
            "super-linear growth along scaled sample points".into()
        },
    ));
    entries.push(entry(
        "A1",
        finite(grad) && finite(second),
        Some(grad.max(second)),
        format!("sup ||nabla G|| = {grad:.4e}, sup ||nabla^2 G|| = {second:.4e}"),
    ));
    entries.push(entry(
        "A2",
        finite(lip_grad) && finite(lip_second),
        Some(lip_grad.max(lip_second)),
        format!("Lipschitz of nabla: {lip_grad:.4e}, of nabla^2: {lip_second:.4e}"),
    ));

    let sg = fields.g0.semigroup();
    let g1 = profile.a3.gamma1;
    let mut c1 = 0.0f64;
    for r in [1e-3, 1e-2, 0.1, 0.5] {
        for g in &fields.diffusion {
            for x in sample_points {
                let v = sg.apply_s_unchecked(r, &g.value(x)).norm() * r.powf(g1) / (1.0 + x.norm());
                c1 = c1.max(v);
            }
        }
    }
    entries.push(entry(
        "A3",
        finite(c1) && profile.a3.gamma1 > 0.0,
        Some(c1),
        format!("c1 estimate {c1:.4e} with gamma1 = {g1}; spot check only"),
    ));

    let f_range = fields.drift.range().is_some();
    let g_range = fields.diffusion.iter().all(|g| g.range().is_some());
    let common = fields.common_range_time();
    entries.push(entry(
        "B1",
        g_range,
        None,
        if g_range { "diffusion fields are range fields".into() } else { "some G_i is not a range field".into() },
    ));
    entries.push(entry(
        "B2",
        f_range,
        None,
        if f_range { "drift is a range field".into() } else { "drift is not a range field".into() },
    ));
    entries.push(entry(
        "C1",
        common.is_some(),
        common,
        match common {
            Some(t) => format!("all fields share smoothing time {t}"),
            None => "fields do not share a smoothing time".into(),
        },
    ));
    entries.push(entry(
        "C2",
        finite(grad) && finite(second),
        Some(second),
        "bounded derivatives on sample points".into(),
    ));
    let c3 = common.is_some() && sample_points.first().is_some_and(|x| {
        fields.diffusion.iter().all(|g| {
            Bracket::new(fields.g0.clone(), g.clone())
                .ok()
                .and_then(|b| b.preimage_derivative(x, &[]))
                .is_some()
        })
    });
    entries.push(entry(
        "C3",
        c3,
        None,
        if c3 { "bracket preimages representable".into() } else { "bracket preimages unavailable".into() },
    ));
    AuditReport { entries }
}
