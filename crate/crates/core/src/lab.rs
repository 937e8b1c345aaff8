//! Monte Carlo diagnostics: spectra of `gamma_t` across noise samples,
//! bracket ranks at `x0`, bracket transport residuals and kernel density
//! estimates of `T(X_t)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{arg, Error, Result};
use crate::exponents::AssumptionProfile;
use crate::fbm::{derive_seed, sample_qfbm_with, FbmSampler, HurstParam, QFbmPath};
use crate::fields::{build_hierarchy, Bracket, FieldRef, FieldSet, VectorField, DEFAULT_FIELD_CAP};
use crate::par;
use crate::semigroup::{GalerkinVector, SpectralSemigroup};
use crate::spde::{solve_mild, solve_right_inverse_until, FlowMatrices, SolutionPath};

/// Quadrature rule for the right-hand side of the transport identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportRule {
    LeftPoint,
    Trapezoid,
    /// Per mode, `e^{-mu (T0 - r)}` integrated exactly against the linear
    /// interpolant of `R_r c(r)` on each cell.
    #[default]
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportResidual {
    pub field: String,
    pub time: f64,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub residual: f64,
}

/// `J+_k V(X_k)` through the preimage of `V`.
fn jplus_of(
    v: &dyn VectorField,
    sol: &SolutionPath,
    flows: &FlowMatrices,
    sg: &SpectralSemigroup,
    k: usize,
) -> Result<GalerkinVector> {
    let x = sol.at(k);
    match (v.range(), v.preimage_derivative(x, &[])) {
        (Some((t0, _)), Some(w)) => flows.apply_jplus_range(sg, k, t0, &w),
        _ => flows.apply_jplus(sg, k, &v.value(x)),
    }
}

/// `int_0^{t_s} J+_r b(X_r) dz_r` with `z = r` for `slot = 0` and
/// `z = sqrt(lambda) beta^{slot-1}` otherwise, `z` linear on cells.
fn exponential_sum(
    b: &Bracket,
    sol: &SolutionPath,
    flows: &FlowMatrices,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    slot: usize,
    s: usize,
) -> Result<GalerkinVector> {
    let n = sg.dim();
    let preimages: Option<(f64, Vec<GalerkinVector>)> = b.range().and_then(|(t0, _)| {
        if sol.grid.t(s) > t0 * (1.0 + 1e-12) {
            return None;
        }
        (0..=s)
            .map(|k| b.preimage_derivative(sol.at(k), &[]))
            .collect::<Option<Vec<_>>>()
            .map(|c| (t0, c))
    });
    let (offset, coeffs) = match preimages {
        Some(p) => p,
        None => (0.0, (0..=s).map(|k| b.value(sol.at(k))).collect()),
    };
    let mut acc = GalerkinVector::zeros(n);
    for k in 0..s {
        let dt = sol.grid.dt(k);
        let rate = match slot {
            0 => 1.0,
            l => noise.spec.sqrt_lambda(l - 1) * noise.increment(l - 1, k) / dt,
        };
        if rate == 0.0 {
            continue;
        }
        let mut left = GalerkinVector::zeros(n);
        let mut right = GalerkinVector::zeros(n);
        for m in 0..n {
            let mu = sg.mu(m);
            let lag = offset - sol.grid.t(k + 1);
            let scale = (-mu * lag).exp();
            if !scale.is_finite() || scale > sg.amp_cap() {
                return Err(Error::Range {
                    mode: m + 1,
                    amplification: scale,
                    cap: sg.amp_cap(),
                });
            }
            let (i0, i1) = crate::increments::exp_moments(mu, dt);
            left[m] = coeffs[k][m] * scale * i1 / dt;
            right[m] = coeffs[k + 1][m] * scale * (i0 - i1 / dt);
        }
        acc += (&flows.r[k] * left + &flows.r[k + 1] * right) * rate;
    }
    Ok(acc)
}

/// Compares `J+_s V(X_s)` with
/// `V(x0) + int_0^s J+_r [G_0, V](X_r) dr + sum_l sqrt(lambda_l) int_0^s J+_r [G_l, V](X_r) d beta^l_r`
/// evaluated by grid sums.
#[allow(clippy::too_many_arguments)]
pub fn bracket_transport_check(
    sol: &SolutionPath,
    flows: &FlowMatrices,
    fields: &FieldSet,
    sg: &SpectralSemigroup,
    noise: &QFbmPath,
    v: &FieldRef,
    s: usize,
    rule: TransportRule,
) -> Result<TransportResidual> {
    if s >= sol.grid.len() {
        return arg(format!("time index {s} outside the grid"));
    }
    let lhs = jplus_of(v.as_ref(), sol, flows, sg, s)?;
    let mut rhs = v.value(sol.at(0));
    let brackets: Vec<Bracket> = std::iter::once(fields.g0.clone() as FieldRef)
        .chain(fields.diffusion.iter().cloned())
        .map(|g| Bracket::new(g, v.clone()))
        .collect::<Result<_>>()?;
    if rule == TransportRule::Exponential {
        for (b, bracket) in brackets.iter().enumerate() {
            rhs += exponential_sum(bracket, sol, flows, sg, noise, b, s)?;
        }
        return Ok(TransportResidual {
            field: v.label(),
            time: sol.grid.t(s),
            residual: (&lhs - &rhs).norm(),
            lhs: lhs.iter().copied().collect(),
            rhs: rhs.iter().copied().collect(),
        });
    }
    let eval = |k: usize| -> Result<Vec<GalerkinVector>> {
        brackets.iter().map(|b| jplus_of(b, sol, flows, sg, k)).collect()
    };
    let mut here = eval(0)?;
    for k in 0..s {
        let there = if rule == TransportRule::Trapezoid || k + 1 < s { Some(eval(k + 1)?) } else { None };
        let weights: Vec<f64> = std::iter::once(sol.grid.dt(k))
            .chain((0..noise.modes()).map(|l| noise.spec.sqrt_lambda(l) * noise.increment(l, k)))
            .collect();
        for (b, w) in weights.iter().enumerate() {
            let integrand = match (rule, &there) {
                (TransportRule::Trapezoid, Some(t)) => (&here[b] + &t[b]) * 0.5,
                _ => here[b].clone(),
            };
            rhs += integrand * *w;
        }
        if let Some(t) = there {
            here = t;
        }
    }
    let residual = (&lhs - &rhs).norm();
    Ok(TransportResidual {
        field: v.label(),
        time: sol.grid.t(s),
        lhs: lhs.iter().copied().collect(),
        rhs: rhs.iter().copied().collect(),
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub coordinate: usize,
    pub bandwidth: f64,
    pub bandwidth_floor_applied: bool,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

pub const KDE_POINTS: usize = 256;

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Gaussian kernel density estimate of every coordinate with Silverman's
/// bandwidth `0.9 min(sigma, IQR/1.34) n^{-1/5}` on `[min - 4h, max + 4h]`.
pub fn kde_estimate(samples: &[Vec<f64>], points: usize) -> Result<Vec<KdeCurve>> {
    if samples.len() < 2 {
        return arg(format!("density estimate needs at least 2 samples, got {}", samples.len()));
    }
    if points < 2 {
        return arg("density grid needs at least 2 points");
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return arg("samples have inconsistent dimensions");
    }
    let n = samples.len() as f64;
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        let mut xs: Vec<f64> = samples.iter().map(|s| s[c]).collect();
        if xs.iter().any(|x| !x.is_finite()) {
            return arg("samples contain non-finite values");
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let iqr = quantile_sorted(&xs, 0.75) - quantile_sorted(&xs, 0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        let mut h = 0.9 * spread * n.powf(-0.2);
        let floor = 1e-9 * mean.abs().max(1e-3);
        let floored = !(h > floor);
        if floored {
            h = floor;
        }
        let (lo, hi) = (xs[0] - 4.0 * h, xs[xs.len() - 1] + 4.0 * h);
        let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
        let grid: Vec<f64> = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect();
        let density = grid
            .iter()
            .map(|g| xs.iter().map(|x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum::<f64>() * norm)
            .collect();
        out.push(KdeCurve {
            coordinate: c + 1,
            bandwidth: h,
            bandwidth_floor_applied: floored,
            grid,
            density,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDiagnostics {
    pub t: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub det: f64,
    pub gamma_eigenvalues: Vec<f64>,
    pub projected_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    pub index: usize,
    pub seed: u64,
    pub times: Vec<TimeDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
}

impl Quantiles {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        Some(Self {
            min: s[0],
            q05: quantile_sorted(&s, 0.05),
            q25: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q75: quantile_sorted(&s, 0.75),
            q95: quantile_sorted(&s, 0.95),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeAggregate {
    pub t: f64,
    pub lambda_min: Option<Quantiles>,
    /// `lambda_min / lambda_max` per sample, summarised.
    pub condition_ratio: Option<Quantiles>,
    /// Share of samples with `lambda_min > rank_tau * lambda_max`.
    pub nondegenerate_fraction: f64,
    pub kde: Vec<KdeCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketSummary {
    pub levels: Vec<LevelRank>,
    pub full_rank: bool,
    pub projected_full_rank: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRank {
    pub level: usize,
    pub fields: usize,
    pub rank: usize,
    pub projected_rank: usize,
    pub singular_values: Vec<f64>,
}

/// Everything `report.json` holds. Runtime metadata lives in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub samples_requested: usize,
    pub samples_completed: usize,
    pub rank_tau: f64,
    pub profile: Option<AssumptionProfile>,
    pub brackets: Option<BracketSummary>,
    pub transport: Vec<TransportResidual>,
    pub samples: Vec<SampleDiagnostics>,
    pub failures: Vec<SampleFailure>,
    pub aggregates: Vec<TimeAggregate>,
}

/// Everything needed to simulate one sample, built once per run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub profile: AssumptionProfile,
    pub sg: SpectralSemigroup,
    pub fields: FieldSet,
    pub hurst: HurstParam,
    pub sampler: FbmSampler,
    pub projection: DMatrix<f64>,
    pub x0: GalerkinVector,
    pub t_indices: Vec<usize>,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let profile = config.resolve()?;
        let sg = config.semigroup()?;
        let fields = config.field_set()?;
        let hurst = config.hurst()?;
        let grid = config.grid()?;
        let sampler = FbmSampler::new(hurst, &grid, config.sampler)?;
        Ok(Self {
            config: config.clone(),
            profile,
            sg,
            fields,
            hurst,
            sampler,
            projection: config.projection_matrix()?,
            x0: config.initial_condition(),
            t_indices: config.t_indices()?,
        })
    }

    pub fn sample_seed(&self, index: usize) -> u64 {
        derive_seed(self.config.seed, index as u64)
    }

    pub fn noise(&self, index: usize) -> Result<QFbmPath> {
        Ok(sample_qfbm_with(&self.config.trace_spec()?, &self.sampler, self.sample_seed(index)))
    }

    /// Solution and flows for one sample.
    pub fn trajectory(&self, index: usize) -> Result<(QFbmPath, SolutionPath, FlowMatrices)> {
        let noise = self.noise(index)?;
        let sol = solve_mild(&self.x0, &self.fields, &self.sg, &noise)?;
        let last = self.t_indices.iter().copied().max().unwrap_or(0);
        let flows =
            solve_right_inverse_until(&sol, &self.fields, &self.sg, &noise, self.config.right_inverse, last)?;
        Ok((noise, sol, flows))
    }

    fn run_sample(&self, index: usize) -> Result<SampleDiagnostics> {
        let (noise, sol, flows) = self.trajectory(index)?;
        let mut times = Vec::with_capacity(self.t_indices.len());
        for &t in &self.t_indices {
            let m = crate::malliavin::malliavin_matrices(
                &sol,
                &flows,
                &self.fields,
                &self.sg,
                &noise,
                t,
                self.hurst,
                &self.projection,
            )?;
            let e = &m.gamma_eigenvalues;
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: t });
            }
            let det = m.gamma.determinant();
            let proj = &self.projection * sol.at(t);
            times.push(TimeDiagnostics {
                t: sol.grid.t(t),
                lambda_min: e[0],
                lambda_max: e[e.len() - 1],
                det,
                gamma_eigenvalues: e.clone(),
                projected_state: proj.iter().copied().collect(),
            });
        }
        Ok(SampleDiagnostics {
            index,
            seed: self.sample_seed(index),
            times,
        })
    }

    /// Bracket ranks at `x0`, full and projected, per level.
    pub fn bracket_summary(&self) -> Result<BracketSummary> {
        let h = build_hierarchy(&self.fields, &self.x0, self.config.hierarchy_levels, DEFAULT_FIELD_CAP)?;
        let tau = self.config.rank_tau.get();
        let mut levels = Vec::new();
        for k in 0..=self.config.hierarchy_levels {
            let full = h.rank_at_level(k, None, tau)?;
            let proj = h.rank_at_level(k, Some(&self.projection), tau)?;
            levels.push(LevelRank {
                level: k,
                fields: h.count_at(k),
                rank: full.rank,
                projected_rank: proj.rank,
                singular_values: full.singular_values,
            });
        }
        let last = levels.last().unwrap();
        Ok(BracketSummary {
            full_rank: last.rank == self.sg.dim(),
            projected_full_rank: last.projected_rank == self.projection.nrows(),
            levels,
        })
    }

    /// Transport residual of every diffusion field on sample 0 at the last time of interest.
    pub fn transport(&self) -> Result<Vec<TransportResidual>> {
        let (noise, sol, flows) = self.trajectory(0)?;
        let s = *self.t_indices.last().unwrap_or(&sol.grid.steps());
        self.fields
            .diffusion
            .iter()
            .map(|v| bracket_transport_check(&sol, &flows, &self.fields, &self.sg, &noise, v, s, TransportRule::Exponential))
            .collect()
    }
}

/// Failure share above which a run is rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Runs every sample of `config` over `workers` threads.
pub fn run_monte_carlo(config: &ExperimentConfig, workers: usize) -> Result<DiagnosticsReport> {
    let exp = Experiment::new(config)?;
    let n = config.samples;
    let tau = config.rank_tau.get();
    let mut report = DiagnosticsReport {
        schema_version: crate::config::SCHEMA_VERSION,
        config_hash: config.hash()?,
        seed: config.seed,
        samples_requested: n,
        samples_completed: 0,
        rank_tau: tau,
        profile: Some(exp.profile.clone()),
        brackets: None,
        transport: Vec::new(),
        samples: Vec::new(),
        failures: Vec::new(),
        aggregates: Vec::new(),
    };
    if n == 0 {
        return Ok(report);
    }
    report.brackets = Some(exp.bracket_summary()?);
    report.transport = exp.transport().unwrap_or_default();
    let results = par::map_indexed(n, workers, |i| exp.run_sample(i));
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => report.samples.push(s),
            Err(e) => report.failures.push(SampleFailure {
                index: i,
                seed: exp.sample_seed(i),
                error: e.to_string(),
            }),
        }
    }
    report.samples_completed = report.samples.len();
    if report.failures.len() as f64 > MAX_FAILURE_FRACTION * n as f64 {
        return Err(Error::RunFailed {
            failed: report.failures.len(),
            total: n,
        });
    }
    for (slot, &ti) in exp.t_indices.iter().enumerate() {
        let per: Vec<&TimeDiagnostics> = report.samples.iter().map(|s| &s.times[slot]).collect();
        let lmin: Vec<f64> = per.iter().map(|d| d.lambda_min).collect();
        let ratio: Vec<f64> = per
            .iter()
            .map(|d| if d.lambda_max > 0.0 { d.lambda_min / d.lambda_max } else { 0.0 })
            .collect();
        let good = per.iter().filter(|d| d.lambda_max > 0.0 && d.lambda_min > tau * d.lambda_max).count();
        let states: Vec<Vec<f64>> = per.iter().map(|d| d.projected_state.clone()).collect();
        let kde = if states.len() >= 2 { kde_estimate(&states, KDE_POINTS)? } else { Vec::new() };
        report.aggregates.push(TimeAggregate {
            t: exp.config.grid()?.t(ti),
            lambda_min: Quantiles::of(&lmin),
            condition_ratio: Quantiles::of(&ratio),
            nondegenerate_fraction: if per.is_empty() { 0.0 } else { good as f64 / per.len() as f64 },
            kde,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_needs_two_samples() {
        assert!(kde_estimate(&[vec![1.0]], 16).is_err());
    }

    #[test]
    fn identical_samples_use_floor() {
        let s = vec![vec![2.0]; 10];
        let k = kde_estimate(&s, 64).unwrap();
        assert!(k[0].bandwidth_floor_applied);
        assert!(k[0].density.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn quantiles_are_ordered() {
        let q = Quantiles::of(&[3.0, 1.0, 2.0, 5.0, 4.0]).unwrap();
        assert_eq!(q.min, 1.0);
        assert_eq!(q.median, 3.0);
        assert_eq!(q.max, 5.0);
        assert!(q.q05 <= q.q25 && q.q75 <= q.q95);
    }
}
