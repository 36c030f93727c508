//! Physical units, water properties and sampled time series.
//!
//! Everything inside the crate works in SI (Pa, m, s). Units only matter at
//! the I/O boundary, which is why [`TimeSeries`] carries its unit along.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Representative January sea temperature used for seasonal viscosity ratios.
pub const JANUARY_TEMPERATURE_C: f64 = 3.0;
/// Representative July sea temperature used for seasonal viscosity ratios.
pub const JULY_TEMPERATURE_C: f64 = 18.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitError {
    #[error("cannot convert {from} to {to}")]
    Incompatible { from: Unit, to: Unit },
    #[error("unknown unit `{0}`")]
    Unknown(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("timestamps and values differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("timestamps not strictly increasing at index {0}")]
    NonMonotonic(usize),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("density and gravity must be positive")]
    NonPositive,
    #[error("viscosity rule invalid: {0}")]
    Viscosity(String),
}

/// Unit of a sampled signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Unit {
    /// Centimetres of water column.
    #[serde(rename = "cm")]
    CmWater,
    #[serde(rename = "mbar")]
    Mbar,
    #[serde(rename = "Pa")]
    Pa,
    #[serde(rename = "1")]
    Dimensionless,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::CmWater => "cm",
            Unit::Mbar => "mbar",
            Unit::Pa => "Pa",
            Unit::Dimensionless => "1",
        }
    }

    /// Parses the sensor-file spelling (`cm`, `mbar`, `Pa`).
    pub fn parse(s: &str) -> Result<Self, UnitError> {
        match s {
            "cm" => Ok(Unit::CmWater),
            "mbar" => Ok(Unit::Mbar),
            "Pa" => Ok(Unit::Pa),
            other => Err(UnitError::Unknown(other.to_string())),
        }
    }

    pub fn is_pressure(self) -> bool {
        !matches!(self, Unit::Dimensionless)
    }
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of a stepped viscosity rule: applies for `T >= min_temperature_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscosityStep {
    pub min_temperature_c: f64,
    pub viscosity: f64,
}

/// Dynamic viscosity of water as a function of temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViscosityRule {
    /// Rows ordered by decreasing threshold; the last row catches everything colder.
    Steps(Vec<ViscosityStep>),
    Constant(f64),
}

impl ViscosityRule {
    /// 20/10/0 °C water viscosities with buckets split at 15 °C and 5 °C.
    pub fn standard() -> Self {
        ViscosityRule::Steps(vec![
            ViscosityStep { min_temperature_c: 15.0, viscosity: 1.004e-3 },
            ViscosityStep { min_temperature_c: 5.0, viscosity: 1.307e-3 },
            ViscosityStep { min_temperature_c: f64::NEG_INFINITY, viscosity: 1.797e-3 },
        ])
    }

    pub fn validate(&self) -> Result<(), FluidError> {
        match self {
            ViscosityRule::Constant(mu) => {
                if !(*mu > 0.0 && mu.is_finite()) {
                    return Err(FluidError::Viscosity(format!("non-positive viscosity {mu}")));
                }
            }
            ViscosityRule::Steps(steps) => {
                if steps.is_empty() {
                    return Err(FluidError::Viscosity("empty step list".into()));
                }
                for s in steps {
                    if !(s.viscosity > 0.0 && s.viscosity.is_finite()) {
                        return Err(FluidError::Viscosity(format!(
                            "non-positive viscosity {}",
                            s.viscosity
                        )));
                    }
                }
                for w in steps.windows(2) {
                    if w[1].min_temperature_c >= w[0].min_temperature_c {
                        return Err(FluidError::Viscosity(
                            "thresholds must be strictly decreasing".into(),
                        ));
                    }
                    // colder water is never less viscous
                    if w[1].viscosity < w[0].viscosity {
                        return Err(FluidError::Viscosity(
                            "viscosity must not increase with temperature".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn at(&self, temperature_c: f64) -> f64 {
        match self {
            ViscosityRule::Constant(mu) => *mu,
            ViscosityRule::Steps(steps) => steps
                .iter()
                .find(|s| temperature_c >= s.min_temperature_c)
                .unwrap_or_else(|| steps.last().expect("validated non-empty"))
                .viscosity,
        }
    }
}

/// Water density, gravity and the viscosity rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidProperties {
    pub density: f64,
    pub gravity: f64,
    pub viscosity: ViscosityRule,
}

impl Default for FluidProperties {
    fn default() -> Self {
        Self { density: 1000.0, gravity: 9.81, viscosity: ViscosityRule::standard() }
    }
}

impl FluidProperties {
    pub fn with_constant_viscosity(mu: f64) -> Self {
        Self { viscosity: ViscosityRule::Constant(mu), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), FluidError> {
        if !(self.density > 0.0 && self.gravity > 0.0) {
            return Err(FluidError::NonPositive);
        }
        self.viscosity.validate()
    }

    /// ρ·g in Pa per metre of water column.
    #[inline]
    pub fn rho_g(&self) -> f64 {
        self.density * self.gravity
    }
}

pub fn viscosity_of_temperature(temperature_c: f64, fluid: &FluidProperties) -> f64 {
    fluid.viscosity.at(temperature_c)
}

/// Water level in cm to the equivalent hydrostatic pressure in mbar.
pub fn convert_level_to_pressure(level_cm: f64, fluid: &FluidProperties) -> f64 {
    fluid.rho_g() * (level_cm / 100.0) / 100.0
}

/// μ(January) / μ(July).
pub fn viscosity_seasonal_ratio(fluid: &FluidProperties) -> f64 {
    fluid.viscosity.at(JANUARY_TEMPERATURE_C) / fluid.viscosity.at(JULY_TEMPERATURE_C)
}

fn to_pa(value: f64, unit: Unit, fluid: &FluidProperties) -> f64 {
    match unit {
        Unit::CmWater => fluid.rho_g() * value / 100.0,
        Unit::Mbar => value * 100.0,
        Unit::Pa | Unit::Dimensionless => value,
    }
}

fn from_pa(value: f64, unit: Unit, fluid: &FluidProperties) -> f64 {
    match unit {
        Unit::CmWater => value * 100.0 / fluid.rho_g(),
        Unit::Mbar => value / 100.0,
        Unit::Pa | Unit::Dimensionless => value,
    }
}

pub fn convert_value(
    value: f64,
    from: Unit,
    to: Unit,
    fluid: &FluidProperties,
) -> Result<f64, UnitError> {
    if from == to {
        return Ok(value);
    }
    if !(from.is_pressure() && to.is_pressure()) {
        return Err(UnitError::Incompatible { from, to });
    }
    Ok(from_pa(to_pa(value, from, fluid), to, fluid))
}

/// Scalar signal sampled at strictly increasing times (seconds since epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    timestamps: Vec<f64>,
    values: Vec<f64>,
    unit: Unit,
}

impl TimeSeries {
    pub fn new(timestamps: Vec<f64>, values: Vec<f64>, unit: Unit) -> Result<Self, SeriesError> {
        if timestamps.len() != values.len() {
            return Err(SeriesError::LengthMismatch(timestamps.len(), values.len()));
        }
        for (i, (t, v)) in timestamps.iter().zip(&values).enumerate() {
            if !t.is_finite() || !v.is_finite() {
                return Err(SeriesError::NonFinite(i));
            }
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(SeriesError::NonMonotonic(i + 1));
        }
        Ok(Self { timestamps, values, unit })
    }

    /// Samples `f` on `t0, t0 + step, ...` up to and including `t1`.
    pub fn sample(t0: f64, t1: f64, step: f64, unit: Unit, f: impl Fn(f64) -> f64) -> Self {
        assert!(step > 0.0 && t1 >= t0);
        let n = ((t1 - t0) / step + 1e-9).floor() as usize + 1;
        let timestamps: Vec<f64> = (0..n).map(|k| t0 + k as f64 * step).collect();
        let values = timestamps.iter().map(|&t| f(t)).collect();
        Self { timestamps, values, unit }
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn start(&self) -> Option<f64> {
        self.timestamps.first().copied()
    }

    pub fn end(&self) -> Option<f64> {
        self.timestamps.last().copied()
    }

    pub fn span(&self) -> f64 {
        match (self.start(), self.end()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.timestamps.iter().copied().zip(self.values.iter().copied())
    }

    /// Linear interpolation; `None` outside the sampled range.
    pub fn value_at(&self, t: f64) -> Option<f64> {
        let ts = &self.timestamps;
        if ts.is_empty() || t < ts[0] || t > *ts.last().unwrap() {
            return None;
        }
        let k = ts.partition_point(|&s| s <= t);
        if k == 0 {
            return Some(self.values[0]);
        }
        if k >= ts.len() {
            return Some(*self.values.last().unwrap());
        }
        let (t0, t1) = (ts[k - 1], ts[k]);
        let w = (t - t0) / (t1 - t0);
        Some(self.values[k - 1] * (1.0 - w) + self.values[k] * w)
    }

    /// Samples with `t0 <= t <= t1`.
    pub fn window(&self, t0: f64, t1: f64) -> Self {
        let lo = self.timestamps.partition_point(|&t| t < t0);
        let hi = self.timestamps.partition_point(|&t| t <= t1);
        Self {
            timestamps: self.timestamps[lo..hi].to_vec(),
            values: self.values[lo..hi].to_vec(),
            unit: self.unit,
        }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.timestamps.len());
        Self { timestamps: self.timestamps.clone(), values, unit: self.unit }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            timestamps: self.timestamps.iter().map(|t| t + dt).collect(),
            values: self.values.clone(),
            unit: self.unit,
        }
    }

    pub fn convert(&self, to: Unit, fluid: &FluidProperties) -> Result<Self, UnitError> {
        let values = self
            .values
            .iter()
            .map(|&v| convert_value(v, self.unit, to, fluid))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { timestamps: self.timestamps.clone(), values, unit: to })
    }

    /// Appends samples strictly after the current end.
    pub fn extend(&mut self, samples: impl IntoIterator<Item = (f64, f64)>) -> Result<(), SeriesError> {
        for (t, v) in samples {
            if !t.is_finite() || !v.is_finite() {
                return Err(SeriesError::NonFinite(self.len()));
            }
            if let Some(end) = self.end() {
                if t <= end {
                    return Err(SeriesError::NonMonotonic(self.len()));
                }
            }
            self.timestamps.push(t);
            self.values.push(v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn viscosity_rows_and_buckets() {
        let f = FluidProperties::default();
        assert_eq!(viscosity_of_temperature(20.0, &f), 1.004e-3);
        assert_eq!(viscosity_of_temperature(0.0, &f), 1.797e-3);
        assert_eq!(viscosity_of_temperature(12.0, &f), 1.307e-3);
        assert_eq!(viscosity_of_temperature(15.0, &f), 1.004e-3);
        assert_eq!(viscosity_of_temperature(4.999, &f), 1.797e-3);
        assert_eq!(viscosity_of_temperature(-40.0, &f), 1.797e-3);
    }

    #[test]
    fn viscosity_non_increasing() {
        let f = FluidProperties::default();
        let mut prev = f64::INFINITY;
        for k in -100..400 {
            let mu = viscosity_of_temperature(k as f64 * 0.1, &f);
            assert!(mu > 0.0 && mu <= prev);
            prev = mu;
        }
    }

    #[test]
    fn level_to_pressure() {
        let f = FluidProperties::default();
        assert!((convert_level_to_pressure(258.0, &f) - 253.1).abs() < 0.5);
        assert_eq!(convert_level_to_pressure(0.0, &f), 0.0);
        assert_relative_eq!(convert_level_to_pressure(100.0, &f), 98.1, max_relative = 1e-12);
    }

    #[test]
    fn seasonal_ratio() {
        let f = FluidProperties::default();
        assert_relative_eq!(viscosity_seasonal_ratio(&f), 1.797 / 1.004, max_relative = 1e-12);
        assert_eq!(viscosity_seasonal_ratio(&FluidProperties::with_constant_viscosity(1e-3)), 1.0);
        let custom = FluidProperties {
            viscosity: ViscosityRule::Steps(vec![
                ViscosityStep { min_temperature_c: 10.0, viscosity: 1e-3 },
                ViscosityStep { min_temperature_c: f64::NEG_INFINITY, viscosity: 2e-3 },
            ]),
            ..FluidProperties::default()
        };
        custom.validate().unwrap();
        assert_relative_eq!(viscosity_seasonal_ratio(&custom), 2.0);
    }

    #[test]
    fn rejects_bad_rules() {
        let rising = ViscosityRule::Steps(vec![
            ViscosityStep { min_temperature_c: 10.0, viscosity: 2e-3 },
            ViscosityStep { min_temperature_c: 0.0, viscosity: 1e-3 },
        ]);
        assert!(rising.validate().is_err());
        assert!(ViscosityRule::Constant(0.0).validate().is_err());
        let f = FluidProperties { density: -1.0, ..FluidProperties::default() };
        assert!(f.validate().is_err());
    }

    #[test]
    fn diffusivity_rescales_with_temperature() {
        // fixed d·μ: d(T1)/d(T0) = μ(T0)/μ(T1)
        let f = FluidProperties::default();
        let d_mu = 1e-3;
        let d20 = d_mu / viscosity_of_temperature(20.0, &f);
        let d0 = d_mu / viscosity_of_temperature(0.0, &f);
        assert_relative_eq!(d20 / d0, 1.797e-3 / 1.004e-3, max_relative = 1e-14);
    }

    #[test]
    fn dimensionless_does_not_convert() {
        let f = FluidProperties::default();
        assert!(convert_value(1.0, Unit::Dimensionless, Unit::Pa, &f).is_err());
        assert_eq!(convert_value(3.0, Unit::Dimensionless, Unit::Dimensionless, &f).unwrap(), 3.0);
    }

    #[test]
    fn series_invariants() {
        assert!(matches!(
            TimeSeries::new(vec![0.0, 1.0], vec![1.0], Unit::Pa),
            Err(SeriesError::LengthMismatch(2, 1))
        ));
        assert!(matches!(
            TimeSeries::new(vec![0.0, 1.0, 1.0], vec![1.0; 3], Unit::Pa),
            Err(SeriesError::NonMonotonic(2))
        ));
        let s = TimeSeries::new(vec![0.0, 10.0], vec![0.0, 1.0], Unit::Pa).unwrap();
        assert_eq!(s.value_at(5.0), Some(0.5));
        assert_eq!(s.value_at(11.0), None);
        assert_eq!(TimeSeries::sample(0.0, 48.0 * 3600.0, 600.0, Unit::Pa, |_| 0.0).len(), 289);
    }

    fn pressure_unit() -> impl Strategy<Value = Unit> {
        prop_oneof![Just(Unit::CmWater), Just(Unit::Mbar), Just(Unit::Pa)]
    }

    proptest! {
        #[test]
        fn unit_round_trip(v in -1e7f64..1e7, a in pressure_unit(), b in pressure_unit()) {
            let f = FluidProperties::default();
            let there = convert_value(v, a, b, &f).unwrap();
            let back = convert_value(there, b, a, &f).unwrap();
            prop_assert!((back - v).abs() <= 1e-9 * v.abs().max(1e-300));
        }
    }
}
