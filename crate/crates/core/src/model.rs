//! Dike cross-section model: geometry, soil zones, boundary tags and sensors.
//!
//! Zones store the product of saturated diffusivity and water viscosity
//! (`d_mu`, Pa·m²), so zone data is independent of water temperature. The
//! runtime diffusivity is `d = d_mu / μ(T)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Polygon;
use crate::units::{FluidError, FluidProperties, ViscosityRule, ViscosityStep};

/// Default specific storage of saturated soil [1/Pa].
pub const DEFAULT_SPECIFIC_STORAGE: f64 = 1e-5;

/// Sea-side toe of the reference cross-section.
pub const TOE: [f64; 2] = [0.0, -0.7];
/// Crest height above the toe [m].
pub const CREST_HEIGHT: f64 = 9.0;
/// Base width of the dike body [m].
pub const BASE_WIDTH: f64 = 60.0;
/// Horizontal extent of the computational domain [m].
pub const DOMAIN_X: (f64, f64) = (-30.0, 90.0);
/// Bottom of the permeable layer (top of the impermeable clay) [m].
pub const DOMAIN_BASE_Y: f64 = -10.0;
/// Horizontal run of each dike slope [m] (1:3 slopes).
pub const SLOPE_RUN: f64 = 27.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid van Genuchten parameters: {0}")]
    VanGenuchten(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid zone {index}: {reason}")]
    Zone { index: usize, reason: String },
    #[error("boundary edge {0} does not exist")]
    BoundaryEdge(usize),
    #[error("sensor `{0}` lies outside the cross-section")]
    SensorOutside(String),
    #[error("duplicate sensor id `{0}`")]
    DuplicateSensor(String),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error("config: {0}")]
    Config(String),
}

/// Van Genuchten retention parameters; `m = 1 - 1/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VanGenuchtenParams {
    /// Inverse air-entry head [1/m].
    pub a: f64,
    pub n: f64,
    /// Pore connectivity.
    pub l: f64,
    pub theta_s: f64,
    pub theta_r: f64,
}

impl VanGenuchtenParams {
    pub fn sand() -> Self {
        Self { a: 8.0, n: 1.5, l: 0.5, theta_s: 0.43, theta_r: 0.045 }
    }

    #[inline]
    pub fn m(&self) -> f64 {
        1.0 - 1.0 / self.n
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: &str| Err(ModelError::VanGenuchten(s.into()));
        if !(self.a > 0.0 && self.a.is_finite()) {
            return bad("a must be positive");
        }
        if !(self.n > 1.0 && self.n.is_finite()) {
            return bad("n must exceed 1");
        }
        if !self.l.is_finite() {
            return bad("l must be finite");
        }
        if !(self.theta_r < self.theta_s && self.theta_s <= 1.0 && self.theta_r >= 0.0) {
            return bad("need 0 <= theta_r < theta_s <= 1");
        }
        Ok(())
    }
}

impl Default for VanGenuchtenParams {
    fn default() -> Self {
        Self::sand()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoilZone {
    pub region: Polygon,
    /// Saturated diffusivity × viscosity [Pa·m²].
    pub d_mu: f64,
    pub vg: VanGenuchtenParams,
    /// [1/Pa]
    pub specific_storage: f64,
    /// Vertical over horizontal conductivity ratio.
    pub anisotropy: f64,
}

impl SoilZone {
    pub fn new(region: Polygon, d_mu: f64) -> Self {
        Self {
            region,
            d_mu,
            vg: VanGenuchtenParams::sand(),
            specific_storage: DEFAULT_SPECIFIC_STORAGE,
            anisotropy: 1.0,
        }
    }

    /// Runtime diffusivity [m²/s] for viscosity `mu`.
    pub fn diffusivity(&self, mu: f64) -> f64 {
        self.d_mu / mu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Sea,
    Land,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sensor {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

impl Sensor {
    pub fn new(id: &str, x: f64, y: f64) -> Self {
        Self { id: id.to_string(), x, y }
    }
}

/// Cross-section model. Elevation `y = 0` is the sea reference level.
#[derive(Debug, Clone, PartialEq)]
pub struct DikeModel {
    pub polygon: Polygon,
    pub zones: Vec<SoilZone>,
    /// One tag per polygon edge.
    pub boundaries: Vec<BoundaryKind>,
    pub sensors: Vec<Sensor>,
    pub fluid: FluidProperties,
}

/// Pore-pressure sensors below the phreatic surface in the reference section.
pub fn reference_sensors() -> Vec<Sensor> {
    vec![Sensor::new("E4", 50.0, -5.5), Sensor::new("E3", 50.0, -1.5), Sensor::new("G2", 62.0, -1.35)]
}

/// Outline of the reference section ending at `x_end`, plus its edge tags.
/// Beyond the default extent the land-side ground surface continues flat.
///
/// Edge order: bottom, land (right vertical), then the top surface from land
/// to sea, and the sea-side vertical last.
pub fn reference_outline(x_end: f64) -> (Polygon, Vec<BoundaryKind>) {
    let x0 = DOMAIN_X.0;
    let x1_full = DOMAIN_X.1.max(x_end);
    let x1 = x_end;
    let yb = DOMAIN_BASE_Y;
    let toe_y = TOE[1];
    let crest_y = toe_y + CREST_HEIGHT;
    // top surface from sea to land, then clipped at x1
    let surface = [
        [x0, toe_y],
        [TOE[0], toe_y],
        [TOE[0] + SLOPE_RUN, crest_y],
        [TOE[0] + BASE_WIDTH - SLOPE_RUN, crest_y],
        [TOE[0] + BASE_WIDTH, toe_y],
        [x1_full, toe_y],
    ];
    // tags for the surface segments, sea to land
    let surface_tags = [
        BoundaryKind::Sea,
        BoundaryKind::Sea,
        BoundaryKind::Wall,
        BoundaryKind::Wall,
        BoundaryKind::Wall,
    ];
    let mut top = Vec::new();
    let mut tags = Vec::new();
    for i in 0..surface.len() - 1 {
        let (a, b) = (surface[i], surface[i + 1]);
        if a[0] >= x1 {
            break;
        }
        top.push(a);
        tags.push(surface_tags[i]);
        if b[0] >= x1 {
            let t = (x1 - a[0]) / (b[0] - a[0]);
            top.push([x1, a[1] + t * (b[1] - a[1])]);
            break;
        }
    }
    // Counter-clockwise: bottom-left, bottom-right, up the land side, back along the top.
    let mut vertices = vec![[x0, yb], [x1, yb]];
    let mut edge_tags = vec![BoundaryKind::Wall, BoundaryKind::Land];
    let n_top = top.len();
    for k in (0..n_top).rev() {
        vertices.push(top[k]);
        if k > 0 {
            edge_tags.push(tags[k - 1]);
        }
    }
    // closing edge: top-left back to bottom-left
    edge_tags.push(BoundaryKind::Sea);
    (Polygon::new(vertices), edge_tags)
}

impl DikeModel {
    /// Homogeneous reference cross-section with a single zone.
    pub fn reference(d_mu: f64, fluid: FluidProperties) -> Self {
        let (polygon, boundaries) = reference_outline(DOMAIN_X.1);
        Self {
            zones: vec![SoilZone::new(polygon.clone(), d_mu)],
            polygon,
            boundaries,
            sensors: reference_sensors(),
            fluid,
        }
    }

    /// Rectangular strip with the sea on the right and land on the left,
    /// all other edges walls.
    pub fn strip(length: f64, y0: f64, y1: f64, d_mu: f64, fluid: FluidProperties) -> Self {
        let polygon = Polygon::rectangle(0.0, y0, length, y1);
        Self {
            zones: vec![SoilZone::new(polygon.clone(), d_mu)],
            polygon,
            boundaries: vec![BoundaryKind::Wall, BoundaryKind::Sea, BoundaryKind::Wall, BoundaryKind::Land],
            sensors: Vec::new(),
            fluid,
        }
    }

    pub fn with_sensors(mut self, sensors: Vec<Sensor>) -> Self {
        self.sensors = sensors;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.fluid.validate()?;
        if !self.polygon.is_simple() {
            return Err(ModelError::Geometry("cross-section must be a simple polygon".into()));
        }
        if self.boundaries.len() != self.polygon.len() {
            return Err(ModelError::Geometry(format!(
                "{} boundary tags for {} edges",
                self.boundaries.len(),
                self.polygon.len()
            )));
        }
        if self.zones.is_empty() {
            return Err(ModelError::Geometry("no soil zones".into()));
        }
        let mut zone_area = 0.0;
        for (index, z) in self.zones.iter().enumerate() {
            let fail = |reason: &str| ModelError::Zone { index, reason: reason.into() };
            if !(z.d_mu > 0.0 && z.d_mu.is_finite()) {
                return Err(fail("d_mu must be positive"));
            }
            if !(z.specific_storage > 0.0) {
                return Err(fail("specific storage must be positive"));
            }
            if !(z.anisotropy > 0.0) {
                return Err(fail("anisotropy ratio must be positive"));
            }
            z.vg.validate().map_err(|e| fail(&e.to_string()))?;
            if !z.region.is_simple() {
                return Err(fail("region must be a simple polygon"));
            }
            if !z.region.vertices.iter().all(|&v| self.polygon.contains(v)) {
                return Err(fail("region extends outside the cross-section"));
            }
            zone_area += z.region.area();
        }
        let total = self.polygon.area();
        if (zone_area - total).abs() > 1e-6 * total {
            return Err(ModelError::Geometry(format!(
                "zones cover {zone_area:.6} m² of a {total:.6} m² section (overlap or gap)"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.sensors {
            if !seen.insert(s.id.as_str()) {
                return Err(ModelError::DuplicateSensor(s.id.clone()));
            }
            if !self.polygon.contains([s.x, s.y]) {
                return Err(ModelError::SensorOutside(s.id.clone()));
            }
        }
        Ok(())
    }

    /// Index of the zone containing `p`, falling back to the nearest zone.
    pub fn zone_at(&self, p: [f64; 2]) -> usize {
        if let Some(i) = self.zones.iter().position(|z| z.region.contains(p)) {
            return i;
        }
        self.zones
            .iter()
            .enumerate()
            .map(|(i, z)| (z.region.distance_to_boundary(p).0, i))
            .fold((f64::INFINITY, 0), |b, c| if c.0 < b.0 { c } else { b })
            .1
    }

    pub fn sensor(&self, id: &str) -> Option<&Sensor> {
        self.sensors.iter().find(|s| s.id == id)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        let m = cfg.into_model()?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelConfig::from_model(self)).expect("serializable")
    }
}

// ---- JSON configuration ---------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub geometry: GeometryConfig,
    pub zones: Vec<ZoneConfig>,
    #[serde(default)]
    pub boundaries: BTreeMap<String, BoundaryKind>,
    #[serde(default)]
    pub sensors: Vec<Sensor>,
    #[serde(default)]
    pub fluid: FluidConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneConfig {
    pub polygon: Vec<[f64; 2]>,
    #[serde(rename = "d_mu_Pa_m2")]
    pub d_mu: f64,
    #[serde(default)]
    pub vg: VgConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specific_storage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anisotropy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VgConfig {
    pub a: f64,
    pub n: f64,
    pub l: f64,
    #[serde(default = "default_theta_s")]
    pub theta_s: f64,
    #[serde(default = "default_theta_r")]
    pub theta_r: f64,
}

fn default_theta_s() -> f64 {
    VanGenuchtenParams::sand().theta_s
}

fn default_theta_r() -> f64 {
    VanGenuchtenParams::sand().theta_r
}

impl Default for VgConfig {
    fn default() -> Self {
        let s = VanGenuchtenParams::sand();
        Self { a: s.a, n: s.n, l: s.l, theta_s: s.theta_s, theta_r: s.theta_r }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_g")]
    pub g: f64,
    #[serde(default)]
    pub viscosity_rule: ViscosityConfig,
}

fn default_rho() -> f64 {
    1000.0
}

fn default_g() -> f64 {
    9.81
}

impl Default for FluidConfig {
    fn default() -> Self {
        Self { rho: default_rho(), g: default_g(), viscosity_rule: ViscosityConfig::default() }
    }
}

/// `"standard"`, `{"constant": mu}` or `{"steps": [{"min_temperature_c": T|null, "viscosity": mu}, ...]}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ViscosityConfig {
    Named(String),
    Constant { constant: f64 },
    Steps { steps: Vec<StepConfig> },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    /// `null` marks the catch-all coldest row.
    pub min_temperature_c: Option<f64>,
    pub viscosity: f64,
}

impl Default for ViscosityConfig {
    fn default() -> Self {
        ViscosityConfig::Named("standard".into())
    }
}

impl ViscosityConfig {
    fn into_rule(self) -> Result<ViscosityRule, ModelError> {
        match self {
            ViscosityConfig::Named(name) if name == "standard" => Ok(ViscosityRule::standard()),
            ViscosityConfig::Named(name) => Err(ModelError::Config(format!("unknown viscosity rule `{name}`"))),
            ViscosityConfig::Constant { constant } => Ok(ViscosityRule::Constant(constant)),
            ViscosityConfig::Steps { steps } => Ok(ViscosityRule::Steps(
                steps
                    .into_iter()
                    .map(|s| ViscosityStep {
                        min_temperature_c: s.min_temperature_c.unwrap_or(f64::NEG_INFINITY),
                        viscosity: s.viscosity,
                    })
                    .collect(),
            )),
        }
    }

    fn from_rule(rule: &ViscosityRule) -> Self {
        if *rule == ViscosityRule::standard() {
            return ViscosityConfig::Named("standard".into());
        }
        match rule {
            ViscosityRule::Constant(mu) => ViscosityConfig::Constant { constant: *mu },
            ViscosityRule::Steps(steps) => ViscosityConfig::Steps {
                steps: steps
                    .iter()
                    .map(|s| StepConfig {
                        min_temperature_c: s.min_temperature_c.is_finite().then_some(s.min_temperature_c),
                        viscosity: s.viscosity,
                    })
                    .collect(),
            },
        }
    }
}

impl ModelConfig {
    pub fn into_model(self) -> Result<DikeModel, ModelError> {
        let polygon = Polygon::new(self.geometry.polygon);
        let n_edges = polygon.len();
        // unlisted edges are walls
        let mut boundaries = vec![BoundaryKind::Wall; n_edges];
        for (key, kind) in self.boundaries {
            let idx: usize = key
                .trim()
                .parse()
                .map_err(|_| ModelError::Config(format!("boundary key `{key}` is not an edge index")))?;
            if idx >= n_edges {
                return Err(ModelError::BoundaryEdge(idx));
            }
            boundaries[idx] = kind;
        }
        let zones = self
            .zones
            .into_iter()
            .map(|z| SoilZone {
                region: Polygon::new(z.polygon),
                d_mu: z.d_mu,
                vg: VanGenuchtenParams {
                    a: z.vg.a,
                    n: z.vg.n,
                    l: z.vg.l,
                    theta_s: z.vg.theta_s,
                    theta_r: z.vg.theta_r,
                },
                specific_storage: z.specific_storage.unwrap_or(DEFAULT_SPECIFIC_STORAGE),
                anisotropy: z.anisotropy.unwrap_or(1.0),
            })
            .collect();
        let fluid = FluidProperties {
            density: self.fluid.rho,
            gravity: self.fluid.g,
            viscosity: self.fluid.viscosity_rule.into_rule()?,
        };
        Ok(DikeModel { polygon, zones, boundaries, sensors: self.sensors, fluid })
    }

    pub fn from_model(m: &DikeModel) -> Self {
        ModelConfig {
            geometry: GeometryConfig { polygon: m.polygon.vertices.clone() },
            zones: m
                .zones
                .iter()
                .map(|z| ZoneConfig {
                    polygon: z.region.vertices.clone(),
                    d_mu: z.d_mu,
                    vg: VgConfig {
                        a: z.vg.a,
                        n: z.vg.n,
                        l: z.vg.l,
                        theta_s: z.vg.theta_s,
                        theta_r: z.vg.theta_r,
                    },
                    specific_storage: (z.specific_storage != DEFAULT_SPECIFIC_STORAGE).then_some(z.specific_storage),
                    anisotropy: (z.anisotropy != 1.0).then_some(z.anisotropy),
                })
                .collect(),
            boundaries: m
                .boundaries
                .iter()
                .enumerate()
                .filter(|(_, b)| **b != BoundaryKind::Wall)
                .map(|(i, b)| (i.to_string(), *b))
                .collect(),
            sensors: m.sensors.clone(),
            fluid: FluidConfig {
                rho: m.fluid.density,
                g: m.fluid.gravity,
                viscosity_rule: ViscosityConfig::from_rule(&m.fluid.viscosity),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_section_is_valid() {
        let m = DikeModel::reference(1e-3, FluidProperties::default());
        m.validate().unwrap();
        let (lo, hi) = m.polygon.bounding_box();
        assert_eq!(lo, [-30.0, DOMAIN_BASE_Y]);
        assert_eq!(hi, [90.0, 8.3]);
        assert_eq!(m.boundaries.len(), m.polygon.len());
        assert_eq!(m.boundaries.iter().filter(|b| **b == BoundaryKind::Land).count(), 1);
        // crest, toe heights
        assert!((m.polygon.top_at(30.0).unwrap() - 8.3).abs() < 1e-12);
        assert!((m.polygon.top_at(-10.0).unwrap() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn truncated_outline() {
        let (p, tags) = reference_outline(65.0);
        assert!(p.is_simple());
        assert_eq!(p.len(), tags.len());
        assert_eq!(p.bounding_box().1[0], 65.0);
        let (p2, tags2) = reference_outline(40.0);
        assert!(p2.is_simple());
        assert_eq!(p2.len(), tags2.len());
        assert!((p2.top_at(40.0).unwrap() - (8.3 - 7.0 / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip() {
        let m = DikeModel::reference(1e-3, FluidProperties::default());
        let back = DikeModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"geometry":{"polygon":[[0,0],[1,0],[1,1]]},"zones":[],"colour":"red"}"#;
        assert!(matches!(DikeModel::from_json(text), Err(ModelError::Config(_))));
    }

    #[test]
    fn invalid_models() {
        let mut m = DikeModel::reference(1e-3, FluidProperties::default());
        m.sensors.push(Sensor::new("X", 200.0, 0.0));
        assert!(matches!(m.validate(), Err(ModelError::SensorOutside(_))));

        let mut m = DikeModel::reference(1e-3, FluidProperties::default());
        let extra = m.zones[0].clone();
        m.zones.push(extra);
        assert!(matches!(m.validate(), Err(ModelError::Geometry(_))));

        let mut m = DikeModel::reference(1e-3, FluidProperties::default());
        m.zones[0].vg.n = 0.9;
        assert!(matches!(m.validate(), Err(ModelError::Zone { .. })));
    }

    #[test]
    fn parses_minimal_config() {
        let text = r#"{
          "geometry": {"polygon": [[0,-10],[120,-10],[120,-2],[0,-2]]},
          "zones": [{"polygon": [[0,-10],[120,-10],[120,-2],[0,-2]], "d_mu_Pa_m2": 0.001,
                     "vg": {"a": 8, "n": 1.5, "l": 0.5}}],
          "boundaries": {"1": "sea", "3": "land"},
          "sensors": [{"id": "P1", "x": 40, "y": -6}],
          "fluid": {"rho": 1000, "g": 9.81, "viscosity_rule": {"constant": 0.001}}
        }"#;
        let m = DikeModel::from_json(text).unwrap();
        assert_eq!(m.boundaries, vec![BoundaryKind::Wall, BoundaryKind::Sea, BoundaryKind::Wall, BoundaryKind::Land]);
        assert_eq!(m.zones[0].vg.theta_s, 0.43);
        assert_eq!(m.fluid.viscosity, ViscosityRule::Constant(0.001));
    }
}
