//! Tidal pore-pressure modelling for earthen dikes.
//!
//! The crate bundles a transient variably saturated flow solver for a dike
//! cross-section, closed-form one-dimensional tidal solutions, sensor signal
//! feature extraction, diffusivity calibration, a point-level Drucker-Prager
//! evaluator and a directory-watching live mode.

pub mod analytic;
pub mod calibrate;
pub mod flow;
pub mod geometry;
pub mod live;
pub mod model;
pub mod signal;
pub mod stability;
pub mod units;

pub use geometry::Polygon;
pub use model::{BoundaryKind, DikeModel, Sensor, SoilZone, VanGenuchtenParams};
pub use units::{FluidProperties, TimeSeries, Unit};

/// Default tidal period: 12 h 25 min [s].
pub const TIDAL_PERIOD_S: f64 = 44_700.0;

/// Wraps a time offset into `[0, period)`.
pub fn wrap_period(t: f64, period: f64) -> f64 {
    let w = t.rem_euclid(period);
    if w >= period {
        0.0
    } else {
        w
    }
}

/// Wraps a time offset into `[-period/2, period/2)`.
pub fn wrap_centered(t: f64, period: f64) -> f64 {
    let w = wrap_period(t + 0.5 * period, period) - 0.5 * period;
    if w >= 0.5 * period {
        w - period
    } else {
        w
    }
}
