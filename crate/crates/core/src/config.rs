//! Experiment configuration: a versioned TOML schema with reals written as
//! decimal strings, dotted-path overrides, and the builder that turns a
//! validated config into semigroup, noise spec and fields.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exponents::{choose_exponents, AssumptionProfile};
use crate::fbm::{HurstParam, SamplerMethod, TraceClassSpec};
use crate::fields::{FieldRef, FieldSet, RangeField, SineField};
use crate::grid::TimeGrid;
use crate::increments::RefineOptions;
use crate::malliavin::coordinate_projection;
use crate::semigroup::{GalerkinVector, SpectralSemigroup};
use crate::spde::RightInverseScheme;

pub const SCHEMA_VERSION: u32 = 1;

/// A real number read from a decimal string (plain TOML numbers are
/// accepted too) and written back as its shortest round-trip string.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Real(pub f64);

impl Real {
    pub fn get(self) -> f64 {
        self.0
    }
}

impl From<f64> for Real {
    fn from(v: f64) -> Self {
        Real(v)
    }
}

impl fmt::Display for Real {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Float(f64),
            Int(i64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(s) => s
                .trim()
                .parse::<f64>()
                .map(Real)
                .map_err(|_| serde::de::Error::custom(format!("`{s}` is not a decimal number"))),
            Raw::Float(v) => Ok(Real(v)),
            Raw::Int(v) => Ok(Real(v as f64)),
        }
    }
}

fn reals(v: &[f64]) -> Vec<Real> {
    v.iter().map(|x| Real(*x)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaRule {
    /// `lambda_i = i^{-exponent}`.
    PowerLaw { exponent: Real },
    Explicit { values: Vec<Real> },
}

/// `w_m(x) = a_m + sum_p L_{mp} x_p + sum_p b_{mp} sin(c_{mp} x_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineFieldConfig {
    pub offset: Vec<Real>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<Vec<Vec<Real>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amp: Option<Vec<Vec<Real>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq: Option<Vec<Vec<Real>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldsConfig {
    /// `W_i = e_i + coupling sin(x_i) e_{i+M}` for `i <= M`, with drift
    /// `W_F(x)_m = drift_amp sin(x_m)`; every field is wrapped in `S(T0)`.
    BracketGenerating { coupling: Real, drift_amp: Real },
    /// `G_1 = e_1`, the other `G_i` and `F` zero; no brackets.
    Degenerate,
    Custom {
        drift: SineFieldConfig,
        diffusion: Vec<SineFieldConfig>,
        /// Wrap every field as `S(T0) W`.
        range: bool,
    },
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(rename = "H")]
    pub hurst: Real,
    pub kappa: Real,
    pub horizon: Real,
    /// Number of uniform time steps.
    pub steps: usize,
    /// Galerkin dimension `N`.
    pub galerkin_modes: usize,
    /// Noise modes `M`.
    pub noise_modes: usize,
    pub lambda: LambdaRule,
    /// `T0` of the range fields; defaults to the horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothing_time: Option<Real>,
    pub fields: FieldsConfig,
    /// Initial condition; defaults to `x0_n = (-1)^{n+1} / (2n)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<Real>>,
    /// One-based coordinates kept by the projection `T`.
    pub projection: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    /// Times at which Malliavin matrices are evaluated; grid points.
    pub t_values: Vec<Real>,
    pub hierarchy_levels: usize,
    pub rank_tau: Real,
    pub sampler: SamplerMethod,
    pub right_inverse: RightInverseScheme,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            hurst: Real(0.9),
            kappa: Real(0.3),
            horizon: Real(0.5),
            steps: 256,
            galerkin_modes: 8,
            noise_modes: 4,
            lambda: LambdaRule::PowerLaw { exponent: Real(3.0) },
            smoothing_time: Some(Real(0.0625)),
            fields: FieldsConfig::BracketGenerating {
                coupling: Real(0.5),
                drift_amp: Real(0.2),
            },
            x0: None,
            projection: vec![1, 2],
            samples: 64,
            seed: 42,
            t_values: vec![Real(0.0625)],
            hierarchy_levels: 1,
            rank_tau: Real(1e-8),
            sampler: SamplerMethod::Cholesky,
            right_inverse: RightInverseScheme::ProductInverse,
            output_dir: "out".into(),
        }
    }
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let loc = e
        .span()
        .map(|s| {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: ")
        })
        .unwrap_or_default();
    Error::Config(format!("{loc}{}", e.message()))
}

/// Parses a TOML value written on the right of `key=value`; bare words are
/// taken as strings.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{path}`")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config file body, then applies `key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| toml_error(text, e))?;
        if overrides.is_empty() {
            let cfg: Self = toml::from_str(text).map_err(|e| toml_error(text, e))?;
            return cfg.check_schema();
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_override_value(v.trim()))?;
        }
        let rendered = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Self = toml::from_str(&rendered)
            .map_err(|e| Error::Config(format!("after overrides: {}", e.message())))?;
        cfg.check_schema()
    }

    fn check_schema(self) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        Ok(self)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Defaults plus overrides, without a file.
    pub fn default_with_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_toml_with_overrides(&Self::default().to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_toml()?.as_bytes());
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn hurst(&self) -> Result<HurstParam> {
        HurstParam::new(self.hurst.get())
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing_time.map(Real::get).unwrap_or(self.horizon.get())
    }

    /// Structural checks, independent of exponent feasibility.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        self.hurst()?;
        let k = self.kappa.get();
        if !(k > 0.25 && k < 0.5) {
            return bad(format!("kappa must lie in (1/4, 1/2), got {k}"));
        }
        if !(self.horizon.get() > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.steps == 0 || self.galerkin_modes == 0 || self.noise_modes == 0 {
            return bad("steps, galerkin_modes and noise_modes must be positive".into());
        }
        if !(self.smoothing() > 0.0) {
            return bad("smoothing_time must be positive".into());
        }
        if let FieldsConfig::BracketGenerating { .. } = self.fields {
            if 2 * self.noise_modes > self.galerkin_modes {
                return bad(format!(
                    "bracket-generating family needs galerkin_modes >= 2 * noise_modes, got N = {}, M = {}",
                    self.galerkin_modes, self.noise_modes
                ));
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != self.galerkin_modes {
                return bad(format!("x0 has {} entries, expected {}", x0.len(), self.galerkin_modes));
            }
        }
        if self.projection.is_empty() || self.projection.iter().any(|c| *c == 0 || *c > self.galerkin_modes) {
            return bad(format!("projection coordinates must lie in 1..={}", self.galerkin_modes));
        }
        let tau = self.rank_tau.get();
        if !(tau > 0.0 && tau < 1.0) {
            return bad(format!("rank_tau must lie in (0, 1), got {tau}"));
        }
        let grid = self.grid()?;
        for t in &self.t_values {
            let idx = grid.index_of(t.get())?;
            if idx == 0 {
                return bad("t_values must be positive".into());
            }
            if t.get() > self.smoothing() * (1.0 + 1e-12) {
                return bad(format!(
                    "t = {t} exceeds smoothing_time {}; the right inverse is only available on S(T0)E",
                    self.smoothing()
                ));
            }
        }
        Ok(())
    }

    /// Structural validation followed by exponent selection.
    pub fn resolve(&self) -> Result<AssumptionProfile> {
        self.validate()?;
        choose_exponents(self.hurst()?, self.kappa.get())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon.get(), self.steps)
    }

    pub fn semigroup(&self) -> Result<SpectralSemigroup> {
        SpectralSemigroup::dirichlet_laplacian(self.galerkin_modes)
    }

    pub fn trace_spec(&self) -> Result<TraceClassSpec> {
        match &self.lambda {
            LambdaRule::PowerLaw { exponent } => TraceClassSpec::power_law(self.noise_modes, exponent.get()),
            LambdaRule::Explicit { values } => {
                if values.len() != self.noise_modes {
                    return Err(Error::Argument(format!(
                        "lambda.values has {} entries, expected {}",
                        values.len(),
                        self.noise_modes
                    )));
                }
                TraceClassSpec::new(values.iter().map(|r| r.get()).collect())
            }
        }
    }

    pub fn initial_condition(&self) -> GalerkinVector {
        match &self.x0 {
            Some(v) => GalerkinVector::from_iterator(v.len(), v.iter().map(|r| r.get())),
            None => GalerkinVector::from_fn(self.galerkin_modes, |n, _| {
                let s = if n % 2 == 0 { 1.0 } else { -1.0 };
                s / (2.0 * (n + 1) as f64)
            }),
        }
    }

    pub fn projection_matrix(&self) -> Result<DMatrix<f64>> {
        let coords: Vec<usize> = self.projection.iter().map(|c| c - 1).collect();
        coordinate_projection(self.galerkin_modes, &coords)
    }

    pub fn t_indices(&self) -> Result<Vec<usize>> {
        let grid = self.grid()?;
        self.t_values.iter().map(|t| grid.index_of(t.get())).collect()
    }

    pub fn field_set(&self) -> Result<FieldSet> {
        let sg = self.semigroup()?;
        build_fields(&self.fields, &sg, self.noise_modes, self.smoothing())
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions::default()
    }
}

fn matrix(n: usize, rows: &Option<Vec<Vec<Real>>>, what: &str) -> Result<DMatrix<f64>> {
    match rows {
        None => Ok(DMatrix::zeros(n, n)),
        Some(r) => {
            if r.len() != n || r.iter().any(|row| row.len() != n) {
                return Err(Error::Argument(format!("{what} must be {n} x {n}")));
            }
            Ok(DMatrix::from_fn(n, n, |i, j| r[i][j].get()))
        }
    }
}

fn sine_from(cfg: &SineFieldConfig, n: usize) -> Result<SineField> {
    if cfg.offset.len() != n {
        return Err(Error::Argument(format!("field offset must have {n} entries")));
    }
    let linear = match &cfg.linear {
        None => None,
        Some(_) => Some(matrix(n, &cfg.linear, "linear")?),
    };
    SineField::new(
        cfg.offset.iter().map(|r| r.get()).collect(),
        linear,
        matrix(n, &cfg.amp, "amp")?,
        matrix(n, &cfg.freq, "freq")?,
    )
}

fn wrap(w: SineField, range: bool, t0: f64, sg: &SpectralSemigroup) -> Result<FieldRef> {
    if range {
        Ok(Arc::new(RangeField::new(Arc::new(w), t0, sg.clone())?))
    } else {
        Ok(Arc::new(w))
    }
}

/// Builds drift and diffusion fields for a family.
pub fn build_fields(cfg: &FieldsConfig, sg: &SpectralSemigroup, m: usize, t0: f64) -> Result<FieldSet> {
    let n = sg.dim();
    match cfg {
        FieldsConfig::BracketGenerating { coupling, drift_amp } => {
            if 2 * m > n {
                return Err(Error::Argument("bracket-generating family needs N >= 2M".into()));
            }
            let mut diffusion = Vec::with_capacity(m);
            for i in 0..m {
                let mut offset = vec![0.0; n];
                offset[i] = 1.0;
                let mut amp = DMatrix::zeros(n, n);
                let mut freq = DMatrix::zeros(n, n);
                amp[(i + m, i)] = coupling.get();
                freq[(i + m, i)] = 1.0;
                let w = SineField::new(offset, None, amp, freq)?.named(format!("W{}", i + 1));
                diffusion.push(wrap(w, true, t0, sg)?);
            }
            let amp = DMatrix::from_diagonal_element(n, n, drift_amp.get());
            let freq = DMatrix::from_diagonal_element(n, n, 1.0);
            let wf = SineField::new(vec![0.0; n], None, amp, freq)?.named("WF");
            FieldSet::new(sg, wrap(wf, true, t0, sg)?, diffusion)
        }
        FieldsConfig::Degenerate => {
            let zero = SineField::constant(&GalerkinVector::zeros(n));
            let mut e1 = vec![0.0; n];
            e1[0] = 1.0;
            let mut diffusion = vec![wrap(
                SineField::constant(&GalerkinVector::from_vec(e1)).named("e1"),
                true,
                t0,
                sg,
            )?];
            for _ in 1..m {
                diffusion.push(wrap(zero.clone(), true, t0, sg)?);
            }
            FieldSet::new(sg, wrap(zero, true, t0, sg)?, diffusion)
        }
        FieldsConfig::Custom {
            drift,
            diffusion,
            range,
        } => {
            if diffusion.len() != m {
                return Err(Error::Argument(format!(
                    "custom family lists {} diffusion fields, expected {m}",
                    diffusion.len()
                )));
            }
            let f = wrap(sine_from(drift, n)?.named("F"), *range, t0, sg)?;
            let g = diffusion
                .iter()
                .enumerate()
                .map(|(i, c)| wrap(sine_from(c, n)?.named(format!("G{}", i + 1)), *range, t0, sg))
                .collect::<Result<Vec<_>>>()?;
            FieldSet::new(sg, f, g)
        }
    }
}

/// Helper for writing explicit coefficient lists.
pub fn real_row(v: &[f64]) -> Vec<Real> {
    reals(v)
}
