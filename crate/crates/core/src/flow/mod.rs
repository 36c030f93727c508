//! Transient variably saturated flow over a dike cross-section.
//!
//! Cell-centred finite volumes on a structured grid. The unknown is pore
//! pressure `p` [Pa]; fluxes are driven by the potential `p + ρg·y`. Saturated
//! conductivity enters as `K_S/μ = d·S` per zone. Time stepping is implicit,
//! first order for the first step and variable-step BDF2 afterwards.

mod band;
mod mesh;
mod snapshot;
mod vg;

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

pub use band::{BandLu, BandMatrix};
pub use mesh::{BoundaryFace, Cell, FaceDir, GridSpec, InteriorFace, Mesh};
pub use snapshot::{read_vtk, write_vtk, Snapshot};
pub use vg::{vg_capacity, vg_effective_saturation, vg_kr, vg_kr_air_entry, vg_relative_permeability};

use crate::model::{BoundaryKind, DikeModel, ModelError, VanGenuchtenParams};
use crate::signal::{extract_features, HarmonicFeature, SignalError};
use crate::units::{FluidProperties, TimeSeries, Unit, UnitError};
use crate::TIDAL_PERIOD_S;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mesh: {0}")]
    Mesh(String),
    #[error("{which} level series does not cover t = {t}")]
    ForcingGap { which: &'static str, t: f64 },
    #[error("forcing series unit: {0}")]
    ForcingUnit(#[from] UnitError),
    #[error("Newton iteration diverged at step {step} (t = {t})")]
    NewtonDivergence { step: usize, t: f64 },
    #[error("singular system at step {step}")]
    Singular { step: usize },
    #[error("invalid options: {0}")]
    Options(String),
    #[error("feature extraction: {0}")]
    Signal(#[from] SignalError),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Richards,
    Saturated,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "richards" => Ok(Mode::Richards),
            "saturated" => Ok(Mode::Saturated),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// `p = -ρg·y` below `y = 0`, zero above.
    Hydrostatic,
    Zero,
    Field(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Output and nominal step size [s].
    pub dt: f64,
    pub mode: Mode,
    pub grid: GridSpec,
    /// Water temperature used to pick the viscosity.
    pub temperature_c: f64,
    pub initial: InitialCondition,
    /// Keep a pressure snapshot every this many output steps.
    pub snapshot_every: Option<usize>,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
    /// Air-entry suction [m] regularizing `k_r` at saturation in Richards
    /// mode; zero keeps the plain Mualem form.
    pub air_entry: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            dt: 600.0,
            mode: Mode::Saturated,
            grid: GridSpec::default(),
            temperature_c: 18.0,
            initial: InitialCondition::Hydrostatic,
            snapshot_every: None,
            newton_tol: 1e-8,
            max_newton: 25,
            max_halvings: 6,
            air_entry: 0.02,
        }
    }
}

/// Per-cell state derived from pressure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub p: f64,
    pub theta_e: f64,
    pub k_r: f64,
    pub capacity: f64,
}

/// Storage change versus boundary inflow over one saturated step [m²/s].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassBalance {
    pub t: f64,
    pub storage_rate: f64,
    pub boundary_inflow: f64,
    /// Sum of absolute boundary face fluxes, the normalizer.
    pub flux_scale: f64,
}

impl MassBalance {
    pub fn relative_error(&self) -> f64 {
        (self.storage_rate - self.boundary_inflow).abs() / self.flux_scale.max(1e-300)
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    /// Probe series (Pa) per sensor id, in model order.
    pub probes: Vec<(String, TimeSeries)>,
    pub snapshots: Vec<Snapshot>,
    pub mass_balance: Vec<MassBalance>,
    pub warnings: Vec<String>,
    pub final_pressure: Vec<f64>,
}

impl SimResult {
    pub fn probe(&self, id: &str) -> Option<&TimeSeries> {
        self.probes.iter().find(|(k, _)| k == id).map(|(_, s)| s)
    }
}

/// Sea or land level in metres from a pressure-unit series.
#[derive(Debug, Clone)]
struct Level {
    pa: TimeSeries,
    rho_g: f64,
    which: &'static str,
}

impl Level {
    fn new(series: &TimeSeries, fluid: &FluidProperties, which: &'static str) -> Result<Self, FlowError> {
        Ok(Self { pa: series.convert(Unit::Pa, fluid)?, rho_g: fluid.rho_g(), which })
    }

    fn at(&self, t: f64) -> Result<f64, FlowError> {
        self.pa
            .value_at(t)
            .map(|v| v / self.rho_g)
            .ok_or(FlowError::ForcingGap { which: self.which, t })
    }
}

/// Sea and land levels, in any pressure unit (`cm` for water levels).
#[derive(Debug, Clone, Copy)]
pub struct Forcing<'a> {
    pub tide: &'a TimeSeries,
    pub land: &'a TimeSeries,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FaceCondition {
    Dirichlet(f64),
    NoFlux,
}

struct FactorCache {
    map: HashMap<(Vec<u64>, u64), BandLu>,
    order: VecDeque<(Vec<u64>, u64)>,
    capacity: usize,
}

impl FactorCache {
    fn new(capacity: usize) -> Self {
        Self { map: HashMap::new(), order: VecDeque::new(), capacity }
    }

    fn get_or_insert(
        &mut self,
        key: (Vec<u64>, u64),
        build: impl FnOnce() -> Option<BandLu>,
    ) -> Option<&BandLu> {
        if !self.map.contains_key(&key) {
            let lu = build()?;
            if self.order.len() >= self.capacity {
                if let Some(old) = self.order.pop_front() {
                    self.map.remove(&old);
                }
            }
            self.order.push_back(key.clone());
            self.map.insert(key.clone(), lu);
        } else if let Some(pos) = self.order.iter().position(|k| *k == key) {
            let k = self.order.remove(pos).expect("present");
            self.order.push_back(k);
        }
        self.map.get(&key)
    }
}

/// Time-stepping state that can be advanced incrementally.
pub struct Simulator {
    mesh: Mesh,
    mode: Mode,
    rho_g: f64,
    fluid: FluidProperties,
    /// `d·S` per cell.
    /// Intrinsic mobility per interior and boundary face.
    mob_interior: Vec<f64>,
    mob_boundary: Vec<f64>,
    storage: Vec<f64>,
    vg: Vec<VanGenuchtenParams>,
    boundary_kinds: Vec<BoundaryKind>,
    p: Vec<f64>,
    p_prev: Option<Vec<f64>>,
    dt_prev: Option<f64>,
    t: f64,
    steps: usize,
    newton_tol: f64,
    max_newton: usize,
    max_halvings: usize,
    air_entry: f64,
    cache: FactorCache,
    mass_balance: Vec<MassBalance>,
    probes: Vec<(String, [f64; 2], Vec<(usize, f64)>, Option<usize>)>,
}

/// Resumable solver state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverState {
    pub t: f64,
    pub p: Vec<f64>,
    pub p_prev: Option<Vec<f64>>,
    pub dt_prev: Option<f64>,
}

impl Simulator {
    pub fn new(model: &DikeModel, opts: &SimOptions, t0: f64) -> Result<Self, FlowError> {
        model.validate()?;
        if !(opts.dt > 0.0 && opts.dt.is_finite()) {
            return Err(FlowError::Options("dt must be positive".into()));
        }
        let mesh = Mesh::build(model, opts.grid).map_err(FlowError::Mesh)?;
        for w in &mesh.warnings {
            log::warn!("{w}");
        }
        let mu = model.fluid.viscosity.at(opts.temperature_c);
        let zone_mob: Vec<[f64; 2]> = model
            .zones
            .iter()
            .map(|z| {
                let l = z.diffusivity(mu) * z.specific_storage;
                [l, l * z.anisotropy]
            })
            .collect();
        let face_mob = |dir: FaceDir, (lo, hi): (usize, usize)| -> f64 {
            let k = if dir == FaceDir::X { 0 } else { 1 };
            mesh.pieces[lo..hi].iter().map(|p| p.w * p.mobility(zone_mob[p.za][k], zone_mob[p.zb][k])).sum()
        };
        let mob_interior = mesh.interior.iter().map(|f| face_mob(f.dir, f.pieces)).collect();
        let mob_boundary = mesh.boundary.iter().map(|f| face_mob(f.dir, f.pieces)).collect();
        let storage = mesh.cells.iter().map(|c| model.zones[c.zone].specific_storage).collect();
        let rho_g = model.fluid.rho_g();
        let p = match &opts.initial {
            InitialCondition::Hydrostatic => {
                mesh.cells.iter().map(|c| if c.y <= 0.0 { -rho_g * c.y } else { 0.0 }).collect()
            }
            InitialCondition::Zero => vec![0.0; mesh.len()],
            InitialCondition::Field(f) => {
                if f.len() != mesh.len() {
                    return Err(FlowError::Options(format!(
                        "initial field has {} values for {} cells",
                        f.len(),
                        mesh.len()
                    )));
                }
                f.clone()
            }
        };
        let probes = model
            .sensors
            .iter()
            .map(|s| {
                let (dist, edge) = model.polygon.distance_to_boundary([s.x, s.y]);
                let on_edge = (dist < 1e-9 && model.boundaries[edge] != BoundaryKind::Wall).then_some(edge);
                (s.id.clone(), [s.x, s.y], mesh.probe_weights(s.x, s.y), on_edge)
            })
            .collect();
        Ok(Self {
            vg: model.zones.iter().map(|z| z.vg).collect(),
            boundary_kinds: model.boundaries.clone(),
            fluid: model.fluid.clone(),
            mesh,
            mode: opts.mode,
            rho_g,
            mob_interior,
            mob_boundary,
            storage,
            p,
            p_prev: None,
            dt_prev: None,
            t: t0,
            steps: 0,
            newton_tol: opts.newton_tol,
            max_newton: opts.max_newton,
            max_halvings: opts.max_halvings,
            air_entry: opts.air_entry,
            cache: FactorCache::new(64),
            mass_balance: Vec::new(),
            probes,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn pressure(&self) -> &[f64] {
        &self.p
    }

    pub fn state(&self) -> SolverState {
        SolverState { t: self.t, p: self.p.clone(), p_prev: self.p_prev.clone(), dt_prev: self.dt_prev }
    }

    pub fn restore(&mut self, s: SolverState) -> Result<(), FlowError> {
        if s.p.len() != self.mesh.len() || s.p_prev.as_ref().is_some_and(|v| v.len() != self.mesh.len()) {
            return Err(FlowError::Options("state does not match the mesh".into()));
        }
        self.t = s.t;
        self.p = s.p;
        self.p_prev = s.p_prev;
        self.dt_prev = s.dt_prev;
        Ok(())
    }

    pub fn take_mass_balance(&mut self) -> Vec<MassBalance> {
        std::mem::take(&mut self.mass_balance)
    }

    pub fn cell_states(&self) -> Vec<CellState> {
        self.mesh
            .cells
            .iter()
            .zip(&self.p)
            .map(|(c, &p)| {
                let vg = &self.vg[c.zone];
                let theta_e = vg_effective_saturation(p, vg, &self.fluid);
                CellState {
                    p,
                    theta_e,
                    k_r: match self.mode {
                        Mode::Richards => vg_kr_air_entry(p, vg, &self.fluid, self.air_entry),
                        Mode::Saturated => vg_relative_permeability(theta_e, vg),
                    },
                    capacity: vg_capacity(p, vg, &self.fluid),
                }
            })
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot::from_cells(&self.mesh, &self.p, self.t)
    }

    /// Probe pressures at the current time.
    pub fn probe_values(&self, forcing: &Forcing) -> Result<Vec<(String, f64)>, FlowError> {
        let sea = Level::new(forcing.tide, &self.fluid, "tide")?;
        let land = Level::new(forcing.land, &self.fluid, "land")?;
        self.probe_values_with(sea.at(self.t)?, land.at(self.t)?)
    }

    fn probe_values_with(&self, h_sea: f64, h_land: f64) -> Result<Vec<(String, f64)>, FlowError> {
        Ok(self
            .probes
            .iter()
            .map(|(id, pos, w, edge)| {
                let v = match edge {
                    Some(e) => {
                        let h = if self.boundary_kinds[*e] == BoundaryKind::Sea { h_sea } else { h_land };
                        if pos[1] <= h {
                            self.rho_g * (h - pos[1])
                        } else {
                            0.0
                        }
                    }
                    None => w.iter().map(|(k, wt)| wt * self.p[*k]).sum(),
                };
                (id.clone(), v)
            })
            .collect())
    }

    fn conditions(&self, h_sea: f64, h_land: f64) -> Vec<FaceCondition> {
        self.mesh
            .boundary
            .iter()
            .map(|f| {
                let h = match f.kind {
                    BoundaryKind::Wall => return FaceCondition::NoFlux,
                    BoundaryKind::Sea => h_sea,
                    BoundaryKind::Land => h_land,
                };
                if f.y <= h {
                    FaceCondition::Dirichlet(self.rho_g * (h - f.y))
                } else if self.mode == Mode::Richards
                    && self.p[f.cell] + self.rho_g * (self.mesh.cells[f.cell].y - f.y) > 0.0
                {
                    // seepage only while the cell pressure, carried hydrostatically
                    // to the face, is positive, so the face can only drain
                    FaceCondition::Dirichlet(0.0)
                } else {
                    FaceCondition::NoFlux
                }
            })
            .collect()
    }

    fn bdf(&self, dt: f64) -> (f64, f64, f64) {
        match (self.p_prev.is_some(), self.dt_prev) {
            (true, Some(prev)) => {
                let w = dt / prev;
                ((1.0 + 2.0 * w) / (1.0 + w), -(1.0 + w), w * w / (1.0 + w))
            }
            _ => (1.0, -1.0, 0.0),
        }
    }

    fn history(&self, a1: f64, a2: f64) -> Vec<f64> {
        match &self.p_prev {
            Some(prev) if a2 != 0.0 => self.p.iter().zip(prev).map(|(p, q)| a1 * p + a2 * q).collect(),
            _ => self.p.iter().map(|p| a1 * p).collect(),
        }
    }

    fn commit(&mut self, p_new: Vec<f64>, dt: f64) {
        let old = std::mem::replace(&mut self.p, p_new);
        self.p_prev = Some(old);
        self.dt_prev = Some(dt);
        self.t += dt;
        self.steps += 1;
    }

    fn saturated_step(&mut self, dt: f64, cond: &[FaceCondition]) -> Result<(), FlowError> {
        let (a0, a1, a2) = self.bdf(dt);
        let hist = self.history(a1, a2);
        let n = self.mesh.len();
        let vol: Vec<f64> = self.mesh.cells.iter().map(|c| c.vol).collect();
        let rho_g = self.rho_g;
        let mut rhs: Vec<f64> = (0..n).map(|i| -vol[i] * self.storage[i] * hist[i] / dt).collect();
        for (f, m) in self.mesh.interior.iter().zip(&self.mob_interior) {
            let t = f.trans * m;
            let g = t * rho_g * (self.mesh.cells[f.b].y - self.mesh.cells[f.a].y);
            rhs[f.a] += g;
            rhs[f.b] -= g;
        }
        let mut bits = vec![0u64; cond.len().div_ceil(64)];
        for (k, (f, c)) in self.mesh.boundary.iter().zip(cond).enumerate() {
            if let FaceCondition::Dirichlet(pb) = *c {
                bits[k / 64] |= 1 << (k % 64);
                let t = f.trans * self.mob_boundary[k];
                rhs[f.cell] += t * (pb + rho_g * (f.y - self.mesh.cells[f.cell].y));
            }
        }
        let key = (bits, (a0 / dt).to_bits());
        let step = self.steps;
        let mut cache = std::mem::replace(&mut self.cache, FactorCache::new(0));
        let solved = {
            let mesh = &self.mesh;
            let this = &*self;
            let build = || {
                let bw = mesh.bandwidth;
                let mut m = BandMatrix::zeros(n, bw, bw);
                for i in 0..n {
                    m.add(i, i, vol[i] * this.storage[i] * a0 / dt);
                }
                for (f, mob) in mesh.interior.iter().zip(&this.mob_interior) {
                    let t = f.trans * mob;
                    m.add(f.a, f.a, t);
                    m.add(f.b, f.b, t);
                    m.add(f.a, f.b, -t);
                    m.add(f.b, f.a, -t);
                }
                for ((f, c), mob) in mesh.boundary.iter().zip(cond).zip(&this.mob_boundary) {
                    if matches!(c, FaceCondition::Dirichlet(_)) {
                        m.add(f.cell, f.cell, f.trans * mob);
                    }
                }
                m.factor().ok()
            };
            cache.get_or_insert(key, build).map(|lu| {
                let mut x = rhs;
                lu.solve_in_place(&mut x);
                x
            })
        };
        self.cache = cache;
        let p_new = solved.ok_or(FlowError::Singular { step })?;

        let (mut inflow, mut scale) = (0.0, 0.0);
        for ((f, c), mob) in self.mesh.boundary.iter().zip(cond).zip(&self.mob_boundary) {
            if let FaceCondition::Dirichlet(pb) = *c {
                let t = f.trans * mob;
                let q = t * (pb + rho_g * f.y - p_new[f.cell] - rho_g * self.mesh.cells[f.cell].y);
                inflow += q;
                scale += q.abs();
            }
        }
        let storage_rate: f64 =
            (0..n).map(|i| vol[i] * self.storage[i] * (a0 * p_new[i] + hist[i]) / dt).sum();
        self.mass_balance.push(MassBalance {
            t: self.t + dt,
            storage_rate,
            boundary_inflow: inflow,
            flux_scale: scale.max(storage_rate.abs()),
        });
        if self.mass_balance.len() > 100_000 {
            self.mass_balance.drain(..50_000);
        }
        self.commit(p_new, dt);
        Ok(())
    }

    /// Moisture content `(θs-θr)·θe` per cell.
    fn moisture(&self, p: &[f64]) -> Vec<f64> {
        self.mesh
            .cells
            .iter()
            .zip(p)
            .map(|(c, &q)| {
                let vg = &self.vg[c.zone];
                (vg.theta_s - vg.theta_r) * vg_effective_saturation(q, vg, &self.fluid)
            })
            .collect()
    }

    /// Per cell: `[θ, C, θe, dθe/dp]` and `[k_r, dk_r/dp]`, the latter by
    /// central differences.
    fn richards_props(&self, p: &[f64]) -> (Vec<[f64; 4]>, Vec<[f64; 2]>) {
        let fl = &self.fluid;
        let mut w = Vec::with_capacity(p.len());
        let mut kr = Vec::with_capacity(p.len());
        for (i, c) in self.mesh.cells.iter().enumerate() {
            let vg = &self.vg[c.zone];
            let pi = p[i];
            let range = vg.theta_s - vg.theta_r;
            if pi >= 0.0 {
                w.push([range, 0.0, 1.0, 0.0]);
            } else {
                let te = vg_effective_saturation(pi, vg, fl);
                let cap = vg_capacity(pi, vg, fl);
                w.push([range * te, cap, te, cap / range]);
            }
            let delta = (1e-4 * pi.abs()).max(1.0);
            if pi >= delta {
                kr.push([1.0, 0.0]);
            } else {
                let kf = |q: f64| vg_kr_air_entry(q, vg, fl, self.air_entry);
                kr.push([kf(pi), (kf(pi + delta) - kf(pi - delta)) / (2.0 * delta)]);
            }
        }
        (w, kr)
    }

    /// Residual of the mixed-form equations and, if requested, its Jacobian.
    /// Moisture enters as a content difference, the elastic part as
    /// `θe·S·∂p/∂t`.
    fn richards_assemble(&self, p: &[f64], step: &RichardsStep, cond: &[FaceCondition], jac: Option<&mut BandMatrix>) -> Vec<f64> {
        let n = self.mesh.len();
        let rho_g = self.rho_g;
        let (a0, dt) = (step.a0, step.dt);
        let (w, kr) = self.richards_props(p);
        let mut res = vec![0.0; n];
        let mut jac = jac;
        if let Some(m) = jac.as_deref_mut() {
            m.clear();
        }
        for i in 0..n {
            let [theta, cap, te, dte] = w[i];
            let s = self.storage[i];
            let d = a0 * p[i] + step.hist[i];
            let vol = self.mesh.cells[i].vol;
            res[i] = vol * (a0 * theta + step.whist[i] + s * te * d) / dt;
            if let Some(m) = jac.as_deref_mut() {
                m.add(i, i, vol * (a0 * cap + s * (dte * d + te * a0)) / dt);
            }
        }
        for (f, &lh) in self.mesh.interior.iter().zip(&self.mob_interior) {
            let (a, b) = (f.a, f.b);
            let dphi = p[b] - p[a] + rho_g * (self.mesh.cells[b].y - self.mesh.cells[a].y);
            // intrinsic mobility from the face pieces, k_r taken upstream
            let up_b = dphi > 0.0;
            let (krf, dkr_a, dkr_b) = if up_b { (kr[b][0], 0.0, kr[b][1]) } else { (kr[a][0], kr[a][1], 0.0) };
            let h = lh * krf;
            let flux = f.trans * h * dphi;
            res[a] -= flux;
            res[b] += flux;
            if let Some(m) = jac.as_deref_mut() {
                let dfa = f.trans * (lh * dkr_a * dphi - h);
                let dfb = f.trans * (lh * dkr_b * dphi + h);
                m.add(a, a, -dfa);
                m.add(a, b, -dfb);
                m.add(b, a, dfa);
                m.add(b, b, dfb);
            }
        }
        for ((f, c), mob) in self.mesh.boundary.iter().zip(cond).zip(&self.mob_boundary) {
            if let FaceCondition::Dirichlet(pb) = *c {
                let t = f.trans * mob;
                let i = f.cell;
                res[i] -= t * (pb + rho_g * f.y - p[i] - rho_g * self.mesh.cells[i].y);
                if let Some(m) = jac.as_deref_mut() {
                    m.add(i, i, t);
                }
            }
        }
        res
    }

    fn richards_setup(&self, dt: f64) -> RichardsStep {
        let (a0, a1, a2) = self.bdf(dt);
        let hist = self.history(a1, a2);
        let mut whist: Vec<f64> = self.moisture(&self.p).iter().map(|w| a1 * w).collect();
        if a2 != 0.0 {
            if let Some(prev) = &self.p_prev {
                for (h, w) in whist.iter_mut().zip(self.moisture(prev)) {
                    *h += a2 * w;
                }
            }
        }
        RichardsStep { dt, a0, hist, whist }
    }

    /// Newton iteration; each update is chopped per cell so effective
    /// saturation moves by at most 0.2.
    fn richards_step(&mut self, dt: f64, cond: &[FaceCondition]) -> Result<(), ()> {
        let step = self.richards_setup(dt);
        let n = self.mesh.len();
        let bw = self.mesh.bandwidth;
        let mut p = self.p.clone();
        let mut jac = BandMatrix::zeros(n, bw, bw);
        let mut res = self.richards_assemble(&p, &step, cond, Some(&mut jac));
        for _ in 0..self.max_newton {
            let Ok(lu) = jac.clone().factor() else {
                return Err(());
            };
            let mut delta: Vec<f64> = res.iter().map(|r| -r).collect();
            lu.solve_in_place(&mut delta);
            if delta.iter().any(|d| !d.is_finite()) {
                return Err(());
            }
            // per-cell chop: at most 0.2 of effective saturation per iteration
            for (k, c) in self.mesh.cells.iter().enumerate() {
                let (vg, fl) = (&self.vg[c.zone], &self.fluid);
                if p[k] >= 0.0 && p[k] + delta[k] >= 0.0 {
                    continue;
                }
                let te0 = vg_effective_saturation(p[k], vg, fl);
                for _ in 0..20 {
                    if (vg_effective_saturation(p[k] + delta[k], vg, fl) - te0).abs() <= 0.2 {
                        break;
                    }
                    delta[k] *= 0.5;
                }
            }
            let dmax = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            for (v, d) in p.iter_mut().zip(&delta) {
                *v += d;
            }
            let pmax = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            res = self.richards_assemble(&p, &step, cond, Some(&mut jac));
            if dmax <= self.newton_tol * pmax.max(1.0) {
                self.commit(p, dt);
                return Ok(());
            }
        }
        Err(())
    }

    /// Advances by `dt` with boundary levels taken at the end of the step,
    /// halving the step on Newton failure.
    pub fn advance(&mut self, dt: f64, forcing: &Forcing) -> Result<(), FlowError> {
        let sea = Level::new(forcing.tide, &self.fluid, "tide")?;
        let land = Level::new(forcing.land, &self.fluid, "land")?;
        self.advance_levels(dt, &sea, &land)
    }

    fn advance_levels(&mut self, dt: f64, sea: &Level, land: &Level) -> Result<(), FlowError> {
        let t_end = self.t + dt;
        let mut sub = dt;
        let mut halvings = 0;
        while self.t < t_end - 1e-9 * dt {
            let h = sub.min(t_end - self.t);
            let t_next = self.t + h;
            let cond = self.conditions(sea.at(t_next)?, land.at(t_next)?);
            match self.mode {
                Mode::Saturated => self.saturated_step(h, &cond)?,
                Mode::Richards => {
                    if self.richards_step(h, &cond).is_err() {
                        halvings += 1;
                        if halvings > self.max_halvings {
                            return Err(FlowError::NewtonDivergence { step: self.steps, t: t_next });
                        }
                        sub *= 0.5;
                        log::debug!("halving step to {sub} s at t = {t_next}");
                        continue;
                    }
                    if sub < dt {
                        sub = (sub * 2.0).min(dt);
                    }
                }
            }
        }
        // land exactly on the output time
        self.t = t_end;
        Ok(())
    }

    /// Runs to `t1` sampling probes every `dt` (starting with the current
    /// time) and calling `on_sample` for each output time.
    pub fn run(
        &mut self,
        t1: f64,
        dt: f64,
        forcing: &Forcing,
        mut on_sample: impl FnMut(&Simulator, f64, &[(String, f64)]),
    ) -> Result<(), FlowError> {
        let sea = Level::new(forcing.tide, &self.fluid, "tide")?;
        let land = Level::new(forcing.land, &self.fluid, "land")?;
        let t0 = self.t;
        let steps = ((t1 - t0) / dt + 1e-9).floor() as usize;
        let v = self.probe_values_with(sea.at(t0)?, land.at(t0)?)?;
        on_sample(self, t0, &v);
        for k in 1..=steps {
            self.advance_levels(dt, &sea, &land)?;
            self.t = t0 + k as f64 * dt;
            let v = self.probe_values_with(sea.at(self.t)?, land.at(self.t)?)?;
            on_sample(self, self.t, &v);
        }
        Ok(())
    }
}

struct RichardsStep {
    dt: f64,
    a0: f64,
    hist: Vec<f64>,
    whist: Vec<f64>,
}

/// Runs a simulation over `t_span`, sampling every `opts.dt`.
pub fn simulate(
    model: &DikeModel,
    tide: &TimeSeries,
    land: &TimeSeries,
    t_span: (f64, f64),
    opts: &SimOptions,
) -> Result<SimResult, FlowError> {
    if !(t_span.1 > t_span.0) {
        return Err(FlowError::Options("empty time span".into()));
    }
    let mut sim = Simulator::new(model, opts, t_span.0)?;
    let forcing = Forcing { tide, land };
    let ids: Vec<String> = model.sensors.iter().map(|s| s.id.clone()).collect();
    let mut times = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); ids.len()];
    let mut snapshots = Vec::new();
    let mut count = 0usize;
    sim.run(t_span.1, opts.dt, &forcing, |s, t, v| {
        times.push(t);
        for (k, (_, val)) in v.iter().enumerate() {
            values[k].push(*val);
        }
        if let Some(every) = opts.snapshot_every {
            if every > 0 && count.is_multiple_of(every) {
                snapshots.push(s.snapshot());
            }
        }
        count += 1;
    })?;
    let probes = ids
        .into_iter()
        .zip(values)
        .map(|(id, v)| TimeSeries::new(times.clone(), v, Unit::Pa).map(|s| (id, s)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| FlowError::Options(e.to_string()))?;
    Ok(SimResult {
        probes,
        snapshots,
        mass_balance: sim.take_mass_balance(),
        warnings: sim.mesh.warnings.clone(),
        final_pressure: sim.p.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct HarmonicRunOptions {
    pub sim: SimOptions,
    pub t_span: (f64, f64),
    pub spinup_periods: f64,
    pub period: f64,
}

impl HarmonicRunOptions {
    /// Spin-up plus `measured_periods` of tidal forcing starting at `t0`.
    pub fn new(sim: SimOptions, t0: f64, measured_periods: f64) -> Self {
        let spinup = 5.0;
        Self {
            sim,
            t_span: (t0, t0 + (spinup + measured_periods) * TIDAL_PERIOD_S),
            spinup_periods: spinup,
            period: TIDAL_PERIOD_S,
        }
    }
}

/// Simulates, discards the spin-up and extracts features per sensor.
pub fn steady_harmonic_features(
    model: &DikeModel,
    tide: &TimeSeries,
    land: &TimeSeries,
    opts: &HarmonicRunOptions,
) -> Result<Vec<(String, HarmonicFeature)>, FlowError> {
    let res = simulate(model, tide, land, opts.t_span, &opts.sim)?;
    let start = opts.t_span.0 + opts.spinup_periods * opts.period;
    let tide_win = tide.window(start, opts.t_span.1);
    res.probes
        .iter()
        .map(|(id, s)| {
            let f = extract_features(&s.window(start, opts.t_span.1), &tide_win, &model.fluid, opts.period)?;
            Ok((id.clone(), f.mean))
        })
        .collect()
}

/// Harmonic sea level `mean + amplitude·sin(2πt/period)` in cm.
pub fn harmonic_tide(t0: f64, t1: f64, step: f64, amplitude_m: f64, period: f64, mean_m: f64) -> TimeSeries {
    TimeSeries::sample(t0, t1, step, Unit::CmWater, move |t| {
        100.0 * (mean_m + amplitude_m * (2.0 * std::f64::consts::PI * t / period).sin())
    })
}

/// Constant level in cm.
pub fn constant_level(t0: f64, t1: f64, level_m: f64) -> TimeSeries {
    TimeSeries::new(vec![t0, t1], vec![100.0 * level_m; 2], Unit::CmWater).expect("t1 > t0")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{finite_aquifer_response, HarmonicBoundary};
    use crate::model::{Sensor, SoilZone};
    use crate::units::FluidProperties;

    const T: f64 = TIDAL_PERIOD_S;

    fn fluid() -> FluidProperties {
        FluidProperties::with_constant_viscosity(1e-3)
    }

    fn strip(d: f64) -> DikeModel {
        DikeModel::strip(120.0, -10.0, -2.0, d * 1e-3, fluid())
            .with_sensors(vec![Sensor::new("P40", 40.0, -6.0), Sensor::new("SEA", 120.0, -6.0)])
    }

    fn max_hydrostatic_error(sim: &Simulator, below: f64) -> f64 {
        let rg = fluid().rho_g();
        sim.mesh()
            .cells
            .iter()
            .zip(sim.pressure())
            .filter(|(c, _)| c.y <= below)
            .map(|(c, p)| (p + rg * c.y).abs())
            .fold(0.0, f64::max)
    }

    fn still_water(m: &DikeModel, mode: Mode, initial: InitialCondition) -> Simulator {
        let tide = constant_level(0.0, 5.0 * T, 0.0);
        let opts = SimOptions { mode, dt: 3600.0, initial, ..Default::default() };
        let mut sim = Simulator::new(m, &opts, 0.0).unwrap();
        let f = Forcing { tide: &tide, land: &tide };
        for _ in 0..62 {
            sim.advance(3600.0, &f).unwrap();
        }
        sim
    }

    #[test]
    fn equilibrium_is_preserved() {
        let m = DikeModel::reference(1e-3, fluid());
        let tol = 1e-6 * fluid().rho_g() * 10.0;
        let sat = still_water(&m, Mode::Saturated, InitialCondition::Hydrostatic);
        assert!(max_hydrostatic_error(&sat, 0.0) < tol);
        // with suction above the water table the hydrostatic field is an
        // exact Richards equilibrium
        let rg = fluid().rho_g();
        let mesh = Mesh::build(&m, GridSpec::default()).unwrap();
        let field = mesh.cells.iter().map(|c| -rg * c.y).collect();
        let ric = still_water(&m, Mode::Richards, InitialCondition::Field(field));
        let e = max_hydrostatic_error(&ric, f64::INFINITY);
        assert!(e < tol, "{e}");
        // from p = 0 above y = 0 the dike body is still draining slowly
        let ric = still_water(&m, Mode::Richards, InitialCondition::Hydrostatic);
        let e = max_hydrostatic_error(&ric, -0.5);
        assert!(e < 50.0 * tol, "{e}");
    }

    #[test]
    fn strip_matches_analytic() {
        let d = 1.0;
        let m = strip(d);
        let tide = harmonic_tide(0.0, 8.0 * T, 60.0, 1.0, T, 0.0);
        let land = constant_level(0.0, 8.0 * T, 0.0);
        let opts = HarmonicRunOptions::new(SimOptions { dt: 300.0, ..Default::default() }, 0.0, 3.0);
        let f = steady_harmonic_features(&m, &tide, &land, &opts).unwrap();
        let bc = HarmonicBoundary::tidal();
        let exact = finite_aquifer_response(40.0, d, 120.0, &bc).unwrap();
        let (_, p40) = &f[0];
        assert!((p40.relative_amplitude - exact.amplitude).abs() < 0.02 * exact.amplitude, "{p40:?} vs {exact:?}");
        assert!(crate::wrap_centered(p40.delay - exact.delay, T).abs() < 120.0, "{p40:?} vs {exact:?}");
        let (_, sea) = &f[1];
        assert!((sea.relative_amplitude - 1.0).abs() < 1e-5, "{sea:?}");
        assert!(crate::wrap_centered(sea.delay, T).abs() < 1.0);
    }

    #[test]
    fn saturated_mass_balance() {
        let m = DikeModel::reference(1e-3, fluid());
        let tide = harmonic_tide(0.0, T, 60.0, 1.3, T, 0.0);
        let land = constant_level(0.0, T, 0.0);
        let opts = SimOptions { dt: 900.0, ..Default::default() };
        let r = simulate(&m, &tide, &land, (0.0, T), &opts).unwrap();
        assert!(!r.mass_balance.is_empty());
        for mb in &r.mass_balance {
            assert!(mb.relative_error() < 1e-8, "{mb:?}");
        }
    }

    #[test]
    fn viscosity_scaling_is_exact() {
        let mk = |mu: f64, dmu: f64| {
            let mut m = DikeModel::strip(60.0, -6.0, -2.0, dmu, FluidProperties::with_constant_viscosity(mu));
            m.sensors = vec![Sensor::new("P", 20.0, -4.0)];
            m
        };
        let tide = harmonic_tide(0.0, T, 300.0, 1.0, T, 0.0);
        let land = constant_level(0.0, T, 0.0);
        let opts = SimOptions { dt: 1200.0, grid: GridSpec { dx: 2.0, dy: 0.5 }, ..Default::default() };
        let a = simulate(&mk(1e-3, 1e-3), &tide, &land, (0.0, T), &opts).unwrap();
        let b = simulate(&mk(5e-4, 5e-4), &tide, &land, (0.0, T), &opts).unwrap();
        for (x, y) in a.probes[0].1.values().iter().zip(b.probes[0].1.values()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
        // halving μ at fixed dμ is the same as doubling dμ
        let c = simulate(&mk(5e-4, 1e-3), &tide, &land, (0.0, T), &opts).unwrap();
        let d = simulate(&mk(1e-3, 2e-3), &tide, &land, (0.0, T), &opts).unwrap();
        for (x, y) in c.probes[0].1.values().iter().zip(d.probes[0].1.values()) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn richards_matches_saturated_when_submerged() {
        // whole strip below the lowest sea level
        let m = DikeModel::strip(60.0, -8.0, -3.0, 1e-3, fluid()).with_sensors(vec![Sensor::new("P", 20.0, -5.0)]);
        let tide = harmonic_tide(0.0, T, 300.0, 1.0, T, 0.0);
        let land = constant_level(0.0, T, 0.0);
        let run = |mode| {
            let opts = SimOptions { dt: 1200.0, mode, grid: GridSpec { dx: 2.0, dy: 0.5 }, ..Default::default() };
            simulate(&m, &tide, &land, (0.0, T), &opts).unwrap()
        };
        let (a, b) = (run(Mode::Saturated), run(Mode::Richards));
        for (x, y) in a.probes[0].1.values().iter().zip(b.probes[0].1.values()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} {y}");
        }
    }

    #[test]
    fn zone_assignment_and_warning() {
        let mut m = DikeModel::strip(20.0, -4.0, -2.0, 1e-3, fluid());
        let left = crate::Polygon::rectangle(0.0, -4.0, 1.0, -2.0);
        let right = crate::Polygon::rectangle(1.0, -4.0, 20.0, -2.0);
        m.zones = vec![SoilZone::new(left, 1e-3), SoilZone::new(right, 2e-3)];
        let mesh = Mesh::build(&m, GridSpec::default()).unwrap();
        assert!(mesh.warnings.iter().any(|w| w.contains("zone 0")));
        assert!(mesh.cells.iter().filter(|c| c.x < 1.0).all(|c| c.zone == 0));
        assert!(mesh.cells.iter().filter(|c| c.x > 1.0).all(|c| c.zone == 1));
    }

    #[test]
    fn richards_jacobian_matches_differences() {
        let m = DikeModel::reference(1e-3, fluid());
        let opts = SimOptions { mode: Mode::Richards, grid: GridSpec { dx: 6.0, dy: 1.0 }, ..Default::default() };
        let mut sim = Simulator::new(&m, &opts, 0.0).unwrap();
        // a rough unsaturated field with a perched mound; no face sits at an
        // exact upstream tie
        let rg = fluid().rho_g();
        sim.p = sim.mesh.cells.iter().map(|c| -rg * c.y + 300.0 * (0.3 * c.x).sin() + 40.0 * (0.7 * c.y).sin()).collect();
        let cond = sim.conditions(0.4, 0.0);
        let step = sim.richards_setup(600.0);
        let n = sim.mesh.len();
        let bw = sim.mesh.bandwidth;
        let mut jac = BandMatrix::zeros(n, bw, bw);
        let p = sim.p.clone();
        let r0 = sim.richards_assemble(&p, &step, &cond, Some(&mut jac));
        for k in (0..n).step_by(7) {
            let h = 1e-5 * p[k].abs().max(100.0);
            let mut q = p.clone();
            q[k] += h;
            let rp = sim.richards_assemble(&q, &step, &cond, None);
            q[k] -= 2.0 * h;
            let rm = sim.richards_assemble(&q, &step, &cond, None);
            for i in 0..n {
                let fd = (rp[i] - rm[i]) / (2.0 * h);
                let an = jac.get(i, k);
                let scale = jac.get(i, i).abs().max(jac.get(k, k).abs());
                assert!((fd - an).abs() <= 1e-3 * scale, "d r{i}/d p{k}: {an} vs {fd} (r = {})", r0[i]);
            }
        }
    }

    #[test]
    fn forcing_gap_reported() {
        let m = strip(1.0);
        let tide = harmonic_tide(0.0, 1000.0, 60.0, 1.0, T, 0.0);
        let land = constant_level(0.0, 1e6, 0.0);
        let err = simulate(&m, &tide, &land, (0.0, 5000.0), &SimOptions::default()).unwrap_err();
        assert!(matches!(err, FlowError::ForcingGap { which: "tide", .. }));
    }
}
