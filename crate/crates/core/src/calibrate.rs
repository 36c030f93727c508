//! Diffusivity calibration: analytic starting point, then coordinate-descent
//! refinement against simulated sensor features.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{
    attenuation_q, multizone_initial_guess, AnalyticError, GuessBounds, HarmonicBoundary, Slice, SlicePosition,
    Target,
};
use crate::flow::{simulate, FlowError, SimOptions};
use crate::model::{reference_outline, DikeModel, ModelError, SoilZone, DOMAIN_X};
use crate::signal::{extract_features, parse_sensor_csv, write_sensor_csv, HarmonicFeature, SignalError};
use crate::units::{FluidProperties, TimeSeries, Unit};
use crate::{wrap_centered, TIDAL_PERIOD_S};

/// Elevation separating the upper and lower slices of the layered model [m].
pub const SLICE_SPLIT_Y: f64 = -3.5;

/// Sliding window for the land-side level [s].
pub const DAY_S: f64 = 86_400.0;

/// Default training window [s].
pub const TRAINING_WINDOW_S: f64 = 48.0 * 3600.0;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("series spans {span} s, shorter than the {window} s window")]
    TooShort { span: f64, window: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("tolerance not met within {} forward runs; best objective {}", .0.runs, .0.objective)]
    BudgetExhausted(Box<CalibrationResult>),
    #[error("simulation failed for parameters {params:?}: {source}")]
    Simulation { params: Vec<f64>, source: FlowError },
    #[error("no target for sensor `{0}`")]
    MissingSensor(String),
    #[error("{file}: {source}")]
    SensorFile { file: PathBuf, source: SignalError },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the window is placed around each output time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    Centered,
    /// Window ending at the output time.
    Trailing,
}

/// `q` times the sliding mean of `tide` over `window`.
///
/// The mean is the time average of the linear interpolant, so irregular
/// sampling is handled. Windows are truncated at the series ends.
pub fn land_boundary(tide: &TimeSeries, q: f64, window: f64) -> Result<TimeSeries, CalibrateError> {
    land_boundary_with(tide, q, window, Averaging::Centered)
}

pub fn land_boundary_with(
    tide: &TimeSeries,
    q: f64,
    window: f64,
    mode: Averaging,
) -> Result<TimeSeries, CalibrateError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(CalibrateError::Invalid(format!("q = {q} outside [0, 1]")));
    }
    if !(window > 0.0) {
        return Err(CalibrateError::Invalid("window must be positive".into()));
    }
    if tide.span() < window || tide.len() < 2 {
        return Err(CalibrateError::TooShort { span: tide.span(), window });
    }
    let (ts, vs) = (tide.timestamps(), tide.values());
    // cumulative trapezoid integral at each sample
    let mut cum = vec![0.0; ts.len()];
    for k in 1..ts.len() {
        cum[k] = cum[k - 1] + 0.5 * (vs[k] + vs[k - 1]) * (ts[k] - ts[k - 1]);
    }
    let integral_to = |t: f64| -> f64 {
        let k = ts.partition_point(|&s| s <= t).clamp(1, ts.len() - 1) - 1;
        let v = tide.value_at(t).unwrap_or(vs[k]);
        cum[k] + 0.5 * (vs[k] + v) * (t - ts[k])
    };
    let (start, end) = (ts[0], ts[ts.len() - 1]);
    let out = ts
        .iter()
        .map(|&t| {
            let (a, b) = match mode {
                Averaging::Centered => (t - 0.5 * window, t + 0.5 * window),
                Averaging::Trailing => (t - window, t),
            };
            let (a, b) = (a.max(start), b.min(end));
            if b - a <= 0.0 {
                return q * tide.value_at(t).unwrap_or(0.0);
            }
            q * (integral_to(b) - integral_to(a)) / (b - a)
        })
        .collect();
    Ok(tide.with_values(out))
}

/// Attenuation of the slow land-side oscillation with the diffusivity
/// rescaled from the reference viscosity to the current one.
pub fn seasonal_q(d: f64, x: f64, t_slow: f64, mu_now: f64, mu_ref: f64) -> Result<f64, CalibrateError> {
    if !(mu_now > 0.0 && mu_ref > 0.0) {
        return Err(CalibrateError::Invalid("viscosities must be positive".into()));
    }
    Ok(attenuation_q(x, d * mu_ref / mu_now, t_slow)?)
}

/// Which model family the free parameters describe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// `[dμ1, dμ2, dμ3, dμ4, L1, L2]`: two slices split at `split_y`, each
    /// with a sea-side zone of length `L1` measured from `inlet_x` and a
    /// land-side zone of length `L2`. The domain ends at `inlet_x + L1 + L2`.
    Layered { split_y: f64, inlet_x: f64 },
    /// `[dμ]` applied to every zone of the template.
    Homogeneous,
}

impl Parameterization {
    pub fn layered() -> Self {
        Self::Layered { split_y: SLICE_SPLIT_Y, inlet_x: DOMAIN_X.0 }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Layered { .. } => 6,
            Self::Homogeneous => 1,
        }
    }

    fn is_log(&self, i: usize) -> bool {
        match self {
            Self::Layered { .. } => i < 4,
            Self::Homogeneous => true,
        }
    }
}

/// Box constraints in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// [Pa·m²]
    pub d_mu: (f64, f64),
    pub l1: (f64, f64),
    pub l2: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Self { d_mu: (1e-6, 1e-1), l1: (40.0, 110.0), l2: (5.0, 40.0) }
    }
}

impl Bounds {
    fn range(&self, p: Parameterization, i: usize) -> (f64, f64) {
        match (p, i) {
            (Parameterization::Layered { .. }, 4) => self.l1,
            (Parameterization::Layered { .. }, 5) => self.l2,
            _ => self.d_mu,
        }
    }
}

/// Builds the layered cross-section for `[dμ1..dμ4, L1, L2]`, copying the
/// fluid, sensors and soil retention of `template`.
pub fn layered_model(
    template: &DikeModel,
    params: &[f64],
    split_y: f64,
    inlet_x: f64,
) -> Result<DikeModel, CalibrateError> {
    let [d1, d2, d3, d4, l1, l2] = params else {
        return Err(CalibrateError::Invalid(format!("expected 6 parameters, got {}", params.len())));
    };
    let x_iface = inlet_x + l1;
    let x_end = x_iface + l2;
    let (polygon, boundaries) = reference_outline(x_end);
    let (lo, hi) = polygon.bounding_box();
    let base = template.zones.first().ok_or_else(|| CalibrateError::Invalid("template has no zones".into()))?;
    let zone = |x0: f64, x1: f64, y0: f64, y1: f64, d_mu: f64| SoilZone {
        region: polygon.clip_box(x0, x1, y0, y1),
        d_mu,
        ..base.clone()
    };
    let zones = vec![
        zone(lo[0], x_iface, split_y, hi[1], *d1),
        zone(x_iface, hi[0], split_y, hi[1], *d2),
        zone(lo[0], x_iface, lo[1], split_y, *d3),
        zone(x_iface, hi[0], lo[1], split_y, *d4),
    ];
    let model = DikeModel {
        polygon,
        zones,
        boundaries,
        sensors: template.sensors.clone(),
        fluid: template.fluid.clone(),
    };
    model.validate()?;
    Ok(model)
}

fn homogeneous_model(template: &DikeModel, d_mu: f64) -> DikeModel {
    let mut m = template.clone();
    for z in &mut m.zones {
        z.d_mu = d_mu;
    }
    m
}

/// Target features keyed by sensor id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorTarget {
    pub id: String,
    pub feature: HarmonicFeature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Maximum forward runs, including the confirmation run.
    pub budget: usize,
    /// Relative amplitude tolerance.
    pub amplitude_tol: f64,
    /// [s]
    pub delay_tol: f64,
    /// Initial step in log space for diffusivities.
    pub log_step: f64,
    /// Initial step for lengths [m].
    pub length_step: f64,
    /// Trust radius, in units of the initial steps, below which the search
    /// restarts around the best point.
    pub min_radius: f64,
    /// Skip the analytic starting point and start from the bounds' midpoint.
    pub midpoint_start: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            budget: 200,
            amplitude_tol: 0.05,
            delay_tol: 180.0,
            log_step: 1.0,
            length_step: 8.0,
            min_radius: 1e-3,
            midpoint_start: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationProblem {
    pub template: DikeModel,
    pub parameterization: Parameterization,
    pub targets: Vec<SensorTarget>,
    pub bounds: Bounds,
    /// Sea level; the simulation starts at its first sample.
    pub tide: TimeSeries,
    pub land: TimeSeries,
    /// Features are measured over `(t_start, t_end)`.
    pub window: (f64, f64),
    pub sim: SimOptions,
    pub period: f64,
}

impl CalibrationProblem {
    pub fn validate(&self) -> Result<(), CalibrateError> {
        if self.targets.is_empty() {
            return Err(CalibrateError::Invalid("no targets".into()));
        }
        if 2 * self.targets.len() < self.parameterization.len() {
            return Err(CalibrateError::Invalid(format!(
                "{} scalar targets for {} parameters",
                2 * self.targets.len(),
                self.parameterization.len()
            )));
        }
        for t in &self.targets {
            if self.template.sensor(&t.id).is_none() {
                return Err(CalibrateError::MissingSensor(t.id.clone()));
            }
        }
        let b = &self.bounds;
        for (name, r) in [("d_mu", b.d_mu), ("L1", b.l1), ("L2", b.l2)] {
            if !(r.0 > 0.0 && r.1 > r.0 && r.1.is_finite()) {
                return Err(CalibrateError::Invalid(format!("bounds for {name}: {r:?}")));
            }
        }
        let start = self.tide.start().unwrap_or(f64::INFINITY);
        if !(self.window.0 >= start && self.window.1 > self.window.0 + self.period) {
            return Err(CalibrateError::Invalid(format!("window {:?} not inside the tide record", self.window)));
        }
        Ok(())
    }

    pub fn model_for(&self, params: &[f64]) -> Result<DikeModel, CalibrateError> {
        match self.parameterization {
            Parameterization::Layered { split_y, inlet_x } => layered_model(&self.template, params, split_y, inlet_x),
            Parameterization::Homogeneous => Ok(homogeneous_model(&self.template, params[0])),
        }
    }

    /// One forward run; features per target, in target order.
    pub fn features(&self, params: &[f64]) -> Result<Vec<HarmonicFeature>, CalibrateError> {
        let model = self.model_for(params)?;
        let t0 = self.tide.start().unwrap_or(self.window.0);
        let res = simulate(&model, &self.tide, &self.land, (t0, self.window.1), &self.sim)
            .map_err(|source| CalibrateError::Simulation { params: params.to_vec(), source })?;
        let tide = self.tide.window(self.window.0, self.window.1);
        self.targets
            .iter()
            .map(|t| {
                let s = res.probe(&t.id).ok_or_else(|| CalibrateError::MissingSensor(t.id.clone()))?;
                Ok(extract_features(&s.window(self.window.0, self.window.1), &tide, &model.fluid, self.period)?.mean)
            })
            .collect()
    }

    fn residuals(&self, achieved: &[HarmonicFeature]) -> Vec<SensorResidual> {
        self.targets
            .iter()
            .zip(achieved)
            .map(|(t, a)| SensorResidual {
                id: t.id.clone(),
                target: t.feature,
                achieved: *a,
                amplitude_error: (a.relative_amplitude - t.feature.relative_amplitude) / t.feature.relative_amplitude,
                delay_error: wrap_centered(a.delay - t.feature.delay, self.period),
            })
            .collect()
    }

    fn objective(&self, r: &[SensorResidual]) -> f64 {
        self.residual_vector(r).iter().map(|v| v * v).sum()
    }

    /// `Δamp/amp` and `Δdelay/T` per sensor.
    fn residual_vector(&self, r: &[SensorResidual]) -> Vec<f64> {
        r.iter().flat_map(|r| [r.amplitude_error, r.delay_error / self.period]).collect()
    }

    /// Geometric midpoint of the bounds for diffusivities, arithmetic for lengths.
    fn midpoint(&self) -> Vec<f64> {
        let p = self.parameterization;
        (0..p.len())
            .map(|i| {
                let (lo, hi) = self.bounds.range(p, i);
                if p.is_log(i) {
                    (lo * hi).sqrt()
                } else {
                    0.5 * (lo + hi)
                }
            })
            .collect()
    }

    fn mu(&self) -> f64 {
        self.template.fluid.viscosity.at(self.sim.temperature_c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorResidual {
    pub id: String,
    pub target: HarmonicFeature,
    pub achieved: HarmonicFeature,
    /// `(achieved − target)/target` of the relative amplitude.
    pub amplitude_error: f64,
    /// Achieved minus target delay, wrapped [s].
    pub delay_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub run: usize,
    pub params: Vec<f64>,
    /// `None` when features could not be extracted.
    pub objective: Option<f64>,
    /// Best objective so far.
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub parameterization: Parameterization,
    /// Diffusivities as dμ [Pa·m²], then lengths [m].
    pub fitted: Vec<f64>,
    pub initial_guess: Vec<f64>,
    /// `analytic` or `midpoint`.
    pub guess_source: String,
    pub residuals: Vec<SensorResidual>,
    pub objective: f64,
    /// Forward runs spent, including the confirmation run.
    pub runs: usize,
    /// Run index at which the tolerance was first met.
    pub runs_to_tolerance: Option<usize>,
    pub converged: bool,
    pub log: Vec<LogEntry>,
}

impl CalibrationResult {
    pub fn within(&self, amplitude_tol: f64, delay_tol: f64) -> bool {
        within(&self.residuals, amplitude_tol, delay_tol)
    }
}

fn within(r: &[SensorResidual], amplitude_tol: f64, delay_tol: f64) -> bool {
    r.iter().all(|r| r.amplitude_error.abs() <= amplitude_tol && r.delay_error.abs() <= delay_tol)
}

fn analytic_targets(problem: &CalibrationProblem, split_y: f64, inlet_x: f64) -> Vec<Target> {
    problem
        .targets
        .iter()
        .filter_map(|t| {
            let s = problem.template.sensor(&t.id)?;
            let slice = if s.y >= split_y { Slice::Upper } else { Slice::Lower };
            Some(Target {
                position: SlicePosition { slice, distance: s.x - inlet_x },
                relative_amplitude: t.feature.relative_amplitude,
                delay: t.feature.delay,
            })
        })
        .collect()
}

/// Starting point: layered fits come from the multizone superposition,
/// homogeneous ones from inverting the semi-infinite delay at the first
/// sensor. Falls back to the geometric midpoint of the bounds.
pub fn initial_guess(problem: &CalibrationProblem) -> (Vec<f64>, &'static str) {
    let b = &problem.bounds;
    let mu = problem.mu();
    let clamp = |v: f64, r: (f64, f64)| v.clamp(r.0, r.1);
    let bc = HarmonicBoundary::from_period(1.0, problem.period);
    match problem.parameterization {
        Parameterization::Layered { split_y, inlet_x } => {
            let targets = analytic_targets(problem, split_y, inlet_x);
            let gb = GuessBounds { d: (b.d_mu.0 / mu, b.d_mu.1 / mu), l1: b.l1, l2: b.l2 };
            let fit = match multizone_initial_guess(&targets, &bc, &gb) {
                Ok(f) => f,
                Err(AnalyticError::NoConvergence(f)) => *f,
                Err(e) => {
                    log::warn!("analytic guess unavailable ({e}); starting from the midpoint");
                    return (problem.midpoint(), "midpoint");
                }
            };
            let l = fit.layout;
            let mut g: Vec<f64> = l.d.iter().map(|d| clamp(d * mu, b.d_mu)).collect();
            g.push(clamp(l.l1, b.l1));
            g.push(clamp(l.l2, b.l2));
            (g, "analytic")
        }
        Parameterization::Homogeneous => {
            let first = problem.targets.first().and_then(|t| Some((problem.template.sensor(&t.id)?, t.feature)));
            let inlet = problem.template.polygon.bounding_box().0[0];
            match first {
                Some((s, f)) if f.delay > 0.0 && s.x > inlet => {
                    let d = (s.x - inlet).powi(2) / (2.0 * bc.omega * f.delay * f.delay);
                    (vec![clamp(d * mu, b.d_mu)], "analytic")
                }
                _ => (problem.midpoint(), "midpoint"),
            }
        }
    }
}

/// Scaled search coordinates: `ln(dμ)/log_step` for diffusivities and
/// `L/length_step` for lengths, so a unit displacement is one initial step.
struct Search<'a> {
    problem: &'a CalibrationProblem,
    opts: RefineOptions,
    scale: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    log: Vec<LogEntry>,
    runs: usize,
    best: (Vec<f64>, f64, Vec<SensorResidual>),
    runs_to_tolerance: Option<usize>,
}

/// One evaluated point of the interpolation set.
#[derive(Clone)]
struct Sample {
    z: Vec<f64>,
    r: Vec<f64>,
}

impl Sample {
    fn f(&self) -> f64 {
        self.r.iter().map(|v| v * v).sum()
    }
}

impl<'a> Search<'a> {
    fn new(problem: &'a CalibrationProblem, opts: RefineOptions) -> Self {
        let p = problem.parameterization;
        let mut scale = Vec::new();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for i in 0..p.len() {
            let (a, b) = problem.bounds.range(p, i);
            let (s, a, b) = if p.is_log(i) { (opts.log_step, a.ln(), b.ln()) } else { (opts.length_step, a, b) };
            scale.push(s);
            lo.push(a / s);
            hi.push(b / s);
        }
        Self {
            problem,
            opts,
            scale,
            lo,
            hi,
            log: Vec::new(),
            runs: 0,
            best: (Vec::new(), f64::INFINITY, Vec::new()),
            runs_to_tolerance: None,
        }
    }

    fn to_scaled(&self, x: &[f64]) -> Vec<f64> {
        let p = self.problem.parameterization;
        x.iter()
            .enumerate()
            .map(|(i, v)| if p.is_log(i) { v.ln() } else { *v } / self.scale[i])
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (a, b))| v.clamp(*a, *b))
            .collect()
    }

    fn to_physical(&self, z: &[f64]) -> Vec<f64> {
        let p = self.problem.parameterization;
        z.iter()
            .enumerate()
            .map(|(i, v)| {
                let u = v * self.scale[i];
                if p.is_log(i) {
                    u.exp()
                } else {
                    u
                }
            })
            .collect()
    }

    fn room(&self) -> usize {
        // one run stays in reserve for the confirmation
        self.opts.budget.saturating_sub(self.runs + 1)
    }

    /// Evaluates the points concurrently; `None` marks points without
    /// features or with an invalid layout.
    fn evaluate(&mut self, points: Vec<Vec<f64>>) -> Result<Vec<Option<Sample>>, CalibrateError> {
        let outcomes: Vec<Result<Option<Vec<SensorResidual>>, CalibrateError>> = points
            .par_iter()
            .map(|z| {
                let x = self.to_physical(z);
                match self.problem.features(&x) {
                    Ok(f) => Ok(Some(self.problem.residuals(&f))),
                    Err(CalibrateError::Signal(e)) => {
                        log::debug!("no features for {x:?}: {e}");
                        Ok(None)
                    }
                    Err(CalibrateError::Model(e)) => {
                        log::debug!("invalid layout {x:?}: {e}");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut out = Vec::with_capacity(points.len());
        for (z, res) in points.into_iter().zip(outcomes) {
            let res = res?;
            self.runs += 1;
            let f = res.as_ref().map(|r| self.problem.objective(r));
            let sample = res.as_ref().map(|r| Sample { z: z.clone(), r: self.problem.residual_vector(r) });
            if let (Some(f), Some(r)) = (f, res) {
                if f < self.best.1 {
                    if self.runs_to_tolerance.is_none() && within(&r, self.opts.amplitude_tol, self.opts.delay_tol) {
                        self.runs_to_tolerance = Some(self.runs);
                    }
                    self.best = (z.clone(), f, r);
                }
            }
            self.log.push(LogEntry { run: self.runs, params: self.to_physical(&z), objective: f, best: self.best.1 });
            out.push(sample);
        }
        Ok(out)
    }

    fn done(&self) -> bool {
        self.runs_to_tolerance.is_some() || self.room() == 0
    }

    /// Point displaced by `h` along coordinate `i`, flipped or shortened to
    /// stay inside the bounds.
    fn displaced(&self, z: &[f64], i: usize, h: f64) -> Vec<f64> {
        let mut y = z.to_vec();
        let up = z[i] + h <= self.hi[i] || z[i] - h < self.lo[i] && self.hi[i] - z[i] >= z[i] - self.lo[i];
        y[i] = if up { (z[i] + h).min(self.hi[i]) } else { (z[i] - h).max(self.lo[i]) };
        y
    }

    /// Interpolation set around `center`: one displaced point per coordinate.
    /// Infeasible points are retried on the other side and then closer in.
    fn build_set(&mut self, center: &Sample, radius: f64) -> Result<Option<Vec<Sample>>, CalibrateError> {
        let n = center.z.len();
        let mut points: Vec<Vec<f64>> = (0..n).map(|i| self.displaced(&center.z, i, radius)).collect();
        let mut set: Vec<Option<Sample>> = vec![None; n];
        for attempt in 0..3 {
            let todo: Vec<usize> = (0..n).filter(|&i| set[i].is_none()).collect();
            if todo.is_empty() {
                break;
            }
            if todo.len() > self.room() {
                return Ok(None);
            }
            let batch: Vec<Vec<f64>> = todo.iter().map(|&i| points[i].clone()).collect();
            for (&i, s) in todo.iter().zip(self.evaluate(batch)?) {
                set[i] = s;
                if set[i].is_none() {
                    let d = points[i][i] - center.z[i];
                    let h = if attempt == 0 { -d } else { 0.5 * d };
                    let mut y = center.z.clone();
                    y[i] = (center.z[i] + h).clamp(self.lo[i], self.hi[i]);
                    points[i] = y;
                }
            }
            if self.done() {
                return Ok(None);
            }
        }
        Ok(set.into_iter().collect())
    }

    /// Linear model `r(z) ≈ r0 + J (z − z0)` through the interpolation set.
    fn model(center: &Sample, set: &[Sample]) -> Option<Vec<Vec<f64>>> {
        let n = center.z.len();
        let m = center.r.len();
        let d: Vec<Vec<f64>> = set.iter().map(|s| sub(&s.z, &center.z)).collect();
        // solve D · Jᵀ = ΔR column by column
        let mut jac = vec![vec![0.0; n]; m];
        for k in 0..m {
            let rhs: Vec<f64> = set.iter().map(|s| s.r[k] - center.r[k]).collect();
            jac[k] = solve(d.clone(), rhs)?;
        }
        Some(jac)
    }

    /// Levenberg-Marquardt step inside the trust region and the bounds.
    fn step(&self, center: &Sample, jac: &[Vec<f64>], radius: f64) -> Vec<f64> {
        let n = center.z.len();
        let mut free = vec![true; n];
        let mut s = vec![0.0; n];
        for _ in 0..=n {
            let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
            if idx.is_empty() {
                break;
            }
            // residual after the fixed components
            let r0: Vec<f64> = (0..center.r.len())
                .map(|k| center.r[k] + (0..n).filter(|&i| !free[i]).map(|i| jac[k][i] * s[i]).sum::<f64>())
                .collect();
            let jtj: Vec<Vec<f64>> = idx
                .iter()
                .map(|&a| idx.iter().map(|&b| jac.iter().map(|row| row[a] * row[b]).sum()).collect())
                .collect();
            let g: Vec<f64> = idx.iter().map(|&a| jac.iter().zip(&r0).map(|(row, r)| row[a] * r).sum()).collect();
            let fixed_norm2: f64 = (0..n).filter(|&i| !free[i]).map(|i| s[i] * s[i]).sum();
            let budget = (radius * radius - fixed_norm2).max(0.0).sqrt();
            let lm = |lambda: f64| -> Option<Vec<f64>> {
                let mut a = jtj.clone();
                for (i, row) in a.iter_mut().enumerate() {
                    row[i] += lambda;
                }
                solve(a, g.iter().map(|v| -v).collect())
            };
            let trace: f64 = (0..idx.len()).map(|i| jtj[i][i]).sum::<f64>().max(1e-300);
            let mut sub_step = match lm(1e-12 * trace) {
                Some(v) if norm(&v) <= budget => v,
                _ => {
                    let (mut lo, mut hi) = (0.0f64, trace.max(1.0));
                    while lm(hi).is_none_or(|v| norm(&v) > budget) && hi < 1e300 {
                        hi *= 10.0;
                    }
                    for _ in 0..60 {
                        let mid = if lo == 0.0 { hi * 1e-6 } else { (lo * hi).sqrt() };
                        match lm(mid) {
                            Some(v) if norm(&v) <= budget => hi = mid,
                            _ => lo = mid,
                        }
                        if hi / lo.max(1e-300) < 1.01 {
                            break;
                        }
                    }
                    lm(hi).unwrap_or_else(|| vec![0.0; idx.len()])
                }
            };
            let nrm = norm(&sub_step);
            if nrm > budget && nrm > 0.0 {
                sub_step.iter_mut().for_each(|v| *v *= budget / nrm);
            }
            let mut clipped = false;
            for (j, &i) in idx.iter().enumerate() {
                s[i] = sub_step[j];
                let z = center.z[i] + s[i];
                if z < self.lo[i] || z > self.hi[i] {
                    s[i] = z.clamp(self.lo[i], self.hi[i]) - center.z[i];
                    free[i] = false;
                    clipped = true;
                }
            }
            if !clipped {
                break;
            }
        }
        s
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if !(a[p][c].abs() > 1e-13 * scale) {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| a[c][k] * b[k]).sum();
        b[c] = (b[c] - s) / a[c][c];
    }
    Some(b)
}

/// |det| of the rows, via elimination.
fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for c in 0..n {
        let Some(p) = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())) else {
            return 0.0;
        };
        if a[p][c] == 0.0 {
            return 0.0;
        }
        a.swap(c, p);
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    d.abs()
}

/// Index of the point to drop so that `candidates` minus one stays well
/// poised around `center`, preferring points far outside the radius.
fn drop_index(center: &[f64], candidates: &[Sample], radius: f64) -> usize {
    let rows: Vec<Vec<f64>> = candidates.iter().map(|s| sub(&s.z, center).iter().map(|v| v / radius).collect()).collect();
    (0..candidates.len())
        .map(|k| {
            let rest: Vec<Vec<f64>> = rows.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, r)| r.clone()).collect();
            let dist = norm(&rows[k]);
            (k, det(rest) * dist.max(1.0).powi(4))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(k, _)| k)
}

/// Analytic starting point, then bounded derivative-free least squares on
/// the residual vector `(Δamp/amp, Δdelay/T)` per sensor, then a
/// confirmation run.
///
/// The refinement keeps a linear interpolation model of the residuals
/// through `n + 1` evaluated points and takes trust-region Gauss-Newton
/// steps on it. When the trust region collapses without meeting the
/// tolerance, it restarts around the best point with a fresh interpolation
/// set, until the budget is spent.
pub fn calibrate(problem: &CalibrationProblem, opts: &RefineOptions) -> Result<CalibrationResult, CalibrateError> {
    problem.validate()?;
    if opts.budget < 20 {
        return Err(CalibrateError::Invalid(format!("budget {} below the minimum of 20", opts.budget)));
    }
    if !(opts.log_step > 0.0 && opts.length_step > 0.0 && opts.min_radius > 0.0 && opts.min_radius < 1.0) {
        return Err(CalibrateError::Invalid("steps must be positive and the minimum radius in (0, 1)".into()));
    }
    let p = problem.parameterization;
    let (guess, source) = if opts.midpoint_start { (problem.midpoint(), "midpoint") } else { initial_guess(problem) };
    log::info!("starting point ({source}): {guess:?}");
    let mut search = Search::new(problem, *opts);
    let z0 = search.to_scaled(&guess);
    let first = search.evaluate(vec![z0])?.pop().flatten();

    let mut restart = 0;
    if let Some(mut center) = first {
        'outer: while !search.done() {
            let mut radius = 0.5f64.powi(restart);
            if radius < opts.min_radius {
                restart = 0;
                radius = 1.0;
            }
            let Some(mut set) = search.build_set(&center, radius)? else {
                break;
            };
            if let Some(k) = set.iter().position(|s| s.f() < center.f()) {
                std::mem::swap(&mut center, &mut set[k]);
            }
            loop {
                if search.done() {
                    break 'outer;
                }
                if radius < opts.min_radius {
                    log::info!("trust region collapsed after {} runs, objective {:.3e}; restarting", search.runs, center.f());
                    restart += 1;
                    continue 'outer;
                }
                let Some(jac) = Search::model(&center, &set) else {
                    // degenerate set: rebuild around the centre
                    restart += 1;
                    continue 'outer;
                };
                let s = search.step(&center, &jac, radius);
                let ns = norm(&s);
                let model_r: Vec<f64> =
                    (0..center.r.len()).map(|k| center.r[k] + jac[k].iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()).collect();
                let predicted = center.f() - model_r.iter().map(|v| v * v).sum::<f64>();
                if ns < 1e-3 * radius || !(predicted > 0.0) {
                    radius *= 0.5;
                    continue;
                }
                let y: Vec<f64> = center.z.iter().zip(&s).map(|(a, b)| a + b).collect();
                let Some(new) = search.evaluate(vec![y])?.pop().flatten() else {
                    radius = 0.5 * ns.min(radius);
                    continue;
                };
                let ratio = (center.f() - new.f()) / predicted;
                if new.f() < center.f() {
                    let mut candidates = set.clone();
                    candidates.push(center.clone());
                    let k = drop_index(&new.z, &candidates, radius);
                    candidates.remove(k);
                    set = candidates;
                    center = new;
                } else {
                    let mut candidates = set.clone();
                    candidates.push(new);
                    let k = drop_index(&center.z, &candidates, radius);
                    candidates.remove(k);
                    set = candidates;
                }
                radius = if ratio > 0.7 {
                    (2.0 * ns).max(radius).min(4.0)
                } else if ratio > 0.1 {
                    radius.max(ns).min(4.0) * 0.9
                } else {
                    0.5 * ns.min(radius)
                };
                log::debug!("run {}: objective {:.3e}, radius {radius:.3e}", search.runs, center.f());
            }
        }
    }
    if search.best.0.is_empty() {
        return Err(CalibrateError::Invalid(format!("no features at the starting point {guess:?}")));
    }

    let fitted = search.to_physical(&search.best.0);
    let confirmed = problem.features(&fitted)?;
    search.runs += 1;
    let residuals = problem.residuals(&confirmed);
    let result = CalibrationResult {
        parameterization: p,
        fitted,
        initial_guess: guess,
        guess_source: source.into(),
        objective: problem.objective(&residuals),
        converged: within(&residuals, opts.amplitude_tol, opts.delay_tol),
        residuals,
        runs: search.runs,
        runs_to_tolerance: search.runs_to_tolerance,
        log: search.log,
    };
    log::info!("refinement stopped after {} runs, objective {:.3e}", result.runs, result.objective);
    if result.converged {
        Ok(result)
    } else {
        Err(CalibrateError::BudgetExhausted(Box::new(result)))
    }
}

/// Simulated probe series with Gaussian noise of standard deviation
/// `noise_pa`, deterministic for a given seed.
pub fn synthesize(
    model: &DikeModel,
    tide: &TimeSeries,
    land: &TimeSeries,
    t_span: (f64, f64),
    sim: &SimOptions,
    noise_pa: f64,
    seed: u64,
) -> Result<Vec<(String, TimeSeries)>, CalibrateError> {
    if !(noise_pa >= 0.0 && noise_pa.is_finite()) {
        return Err(CalibrateError::Invalid(format!("noise {noise_pa} must be non-negative")));
    }
    let res = simulate(model, tide, land, t_span, sim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_pa).map_err(|e| CalibrateError::Invalid(e.to_string()))?;
    Ok(res
        .probes
        .into_iter()
        .map(|(id, s)| {
            let noisy: Vec<f64> = s.values().iter().map(|v| v + normal.sample(&mut rng)).collect();
            (id, s.with_values(noisy))
        })
        .collect())
}

/// Writes `<id>.csv` per series into `dir`.
pub fn write_sensor_dir(dir: &Path, series: &[(String, TimeSeries)]) -> Result<Vec<PathBuf>, CalibrateError> {
    std::fs::create_dir_all(dir)?;
    series
        .iter()
        .map(|(id, s)| {
            let path = dir.join(format!("{id}.csv"));
            std::fs::write(&path, write_sensor_csv(s))?;
            Ok(path)
        })
        .collect()
}

/// Synthesizes sensor files for `model`; see [`synthesize`].
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic_sensors(
    model: &DikeModel,
    tide: &TimeSeries,
    land: &TimeSeries,
    t_span: (f64, f64),
    sim: &SimOptions,
    noise_pa: f64,
    seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>, CalibrateError> {
    write_sensor_dir(dir, &synthesize(model, tide, land, t_span, sim, noise_pa, seed)?)
}

/// Reads every `*.csv` in `dir` as `(file stem, series)`, sorted by name.
pub fn read_sensor_dir(dir: &Path) -> Result<Vec<(String, TimeSeries)>, CalibrateError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let s = parse_sensor_csv(&std::fs::read(&p)?)
                .map_err(|source| CalibrateError::SensorFile { file: p.clone(), source })?;
            Ok((id, s))
        })
        .collect()
}

/// Features of each sensor series over `window` against `tide`.
pub fn targets_from_series(
    series: &[(String, TimeSeries)],
    tide: &TimeSeries,
    window: (f64, f64),
    fluid: &FluidProperties,
    period: f64,
) -> Result<Vec<SensorTarget>, CalibrateError> {
    let tide = tide.window(window.0, window.1);
    series
        .iter()
        .map(|(id, s)| {
            let f = extract_features(&s.window(window.0, window.1), &tide, fluid, period)?;
            Ok(SensorTarget { id: id.clone(), feature: f.mean })
        })
        .collect()
}

/// Truth of the synthetic twin: `[dμ1..dμ4]` [Pa·m²], `L1`, `L2` [m].
pub const TWIN_TRUTH: [f64; 6] = [0.1e-3, 0.01e-3, 0.9e-3, 0.01e-3, 82.0, 13.0];

/// Harmonic tide of amplitude `amplitude_m` with a constant land level,
/// covering five spin-up periods plus the training window.
pub fn twin_forcing(amplitude_m: f64, t0: f64) -> (TimeSeries, TimeSeries, (f64, f64)) {
    let start = t0 + 5.0 * TIDAL_PERIOD_S;
    let window = (start, start + TRAINING_WINDOW_S);
    let tide = TimeSeries::sample(t0, window.1, 300.0, Unit::CmWater, move |t| {
        100.0 * amplitude_m * (2.0 * std::f64::consts::PI * (t - t0) / TIDAL_PERIOD_S).sin()
    });
    let land = TimeSeries::new(vec![t0, window.1], vec![0.0, 0.0], Unit::CmWater).expect("t1 > t0");
    (tide, land, window)
}
