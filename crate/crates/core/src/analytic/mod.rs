//! Closed-form tidal propagation in a one-dimensional saturated aquifer.
//!
//! Two geometries are covered: a semi-infinite aquifer driven at `x = 0`, and
//! a finite aquifer of length `L` with a fixed (zero) end at `x = 0` and the
//! tidal boundary at `x = L`. The finite solution is evaluated through the
//! complex phasor `P(x) = A·sinh(kx)/sinh(kL)` with `k = sqrt(iω/d)`, so that
//! `p(x, t) = Im[P(x)·e^{iωt}]`.

mod multizone;

pub use multizone::{
    multizone_forward, multizone_initial_guess, multizone_residuals, GuessBounds, MultiZoneFit,
    MultiZoneLayout, Slice, SlicePosition, Target, MULTIZONE_TOLERANCE,
};

use num_complex::Complex64;
use thiserror::Error;

use crate::{wrap_period, TIDAL_PERIOD_S};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("position {x} outside [0, {length}]")]
    OutOfDomain { x: f64, length: f64 },
    #[error("{got} targets given, the system needs {expected}")]
    TargetCount { expected: usize, got: usize },
    #[error("no multi-start converged; best residual norm {}", .0.residual_norm)]
    NoConvergence(Box<MultiZoneFit>),
}

/// `p(t) = A·sin(ωt + φ)` imposed at the driving boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicBoundary {
    /// [Pa]
    pub amplitude: f64,
    /// [rad/s]
    pub omega: f64,
    /// [rad]
    pub phase: f64,
}

impl HarmonicBoundary {
    pub fn new(amplitude: f64, omega: f64) -> Self {
        Self { amplitude, omega, phase: 0.0 }
    }

    pub fn from_period(amplitude: f64, period_s: f64) -> Self {
        Self::new(amplitude, 2.0 * std::f64::consts::PI / period_s)
    }

    /// Unit amplitude at the default tidal period.
    pub fn tidal() -> Self {
        Self::from_period(1.0, TIDAL_PERIOD_S)
    }

    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega
    }

    pub fn phasor(&self) -> Complex64 {
        Complex64::from_polar(self.amplitude, self.phase)
    }

    fn validate(&self) -> Result<(), AnalyticError> {
        if !(self.omega > 0.0) {
            return Err(AnalyticError::NonPositive("omega"));
        }
        if !(self.amplitude >= 0.0) {
            return Err(AnalyticError::NonPositive("amplitude"));
        }
        Ok(())
    }

    /// Amplitude and delay (wrapped to one period) of a response phasor.
    pub fn response(&self, p: Complex64) -> HarmonicResponse {
        let amplitude = p.norm();
        let delay = if amplitude > 0.0 {
            wrap_period(-(p.arg() - self.phase) / self.omega, self.period())
        } else {
            0.0
        };
        HarmonicResponse { amplitude, delay }
    }
}

/// Steady oscillation at a point: amplitude [Pa] and lag behind the boundary [s].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicResponse {
    pub amplitude: f64,
    pub delay: f64,
}

fn check_d(d: f64) -> Result<(), AnalyticError> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(AnalyticError::NonPositive("diffusivity"))
    }
}

/// Wave number `sqrt(iω/d)`, principal branch (positive real part).
pub fn wave_number(omega: f64, d: f64) -> Complex64 {
    let a = (omega / (2.0 * d)).sqrt();
    Complex64::new(a, a)
}

/// `sinh(k·x)/sinh(k·len)` for `0 <= x <= len`, without overflow.
pub(crate) fn sinh_ratio(k: Complex64, x: f64, len: f64) -> Complex64 {
    if x <= 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let num = Complex64::new(1.0, 0.0) - (-2.0 * k * x).exp();
    let den = Complex64::new(1.0, 0.0) - (-2.0 * k * len).exp();
    (k * (x - len)).exp() * num / den
}

/// `1/sinh(z)` and `coth(z)` for `Re z > 0`, without overflow.
pub(crate) fn csch_coth(z: Complex64) -> (Complex64, Complex64) {
    let e = (-2.0 * z).exp();
    let one = Complex64::new(1.0, 0.0);
    let den = one - e;
    (2.0 * (-z).exp() / den, (one + e) / den)
}

pub fn semi_infinite_response(
    x: f64,
    d: f64,
    bc: &HarmonicBoundary,
) -> Result<HarmonicResponse, AnalyticError> {
    check_d(d)?;
    bc.validate()?;
    if x < 0.0 {
        return Err(AnalyticError::OutOfDomain { x, length: f64::INFINITY });
    }
    let amplitude = bc.amplitude * (-x * (bc.omega / (2.0 * d)).sqrt()).exp();
    let delay = wrap_period(x * (1.0 / (2.0 * d * bc.omega)).sqrt(), bc.period());
    Ok(HarmonicResponse { amplitude, delay })
}

fn finite_phasor(x: f64, d: f64, length: f64, bc: &HarmonicBoundary) -> Result<Complex64, AnalyticError> {
    check_d(d)?;
    bc.validate()?;
    if !(length > 0.0) {
        return Err(AnalyticError::NonPositive("length"));
    }
    if !(0.0..=length).contains(&x) {
        return Err(AnalyticError::OutOfDomain { x, length });
    }
    Ok(bc.phasor() * sinh_ratio(wave_number(bc.omega, d), x, length))
}

/// Pressure [Pa] at `(x, t)` in the finite aquifer.
pub fn finite_aquifer_pressure(
    x: f64,
    t: f64,
    d: f64,
    length: f64,
    bc: &HarmonicBoundary,
) -> Result<f64, AnalyticError> {
    let p = finite_phasor(x, d, length, bc)?;
    Ok((p * Complex64::from_polar(1.0, bc.omega * t)).im)
}

pub fn finite_aquifer_response(
    x: f64,
    d: f64,
    length: f64,
    bc: &HarmonicBoundary,
) -> Result<HarmonicResponse, AnalyticError> {
    Ok(bc.response(finite_phasor(x, d, length, bc)?))
}

/// Attenuation of slow water-table oscillations of period `t_slow` after
/// travelling `x` metres: `exp(-x·sqrt(π/(T·d)))`.
pub fn attenuation_q(x: f64, d: f64, t_slow: f64) -> Result<f64, AnalyticError> {
    check_d(d)?;
    if !(t_slow > 0.0) {
        return Err(AnalyticError::NonPositive("slow period"));
    }
    if x < 0.0 {
        return Err(AnalyticError::OutOfDomain { x, length: f64::INFINITY });
    }
    Ok((-x * (std::f64::consts::PI / (t_slow * d)).sqrt()).exp())
}

/// Alternative closed forms of the finite-aquifer amplitude and delay in the
/// shape they are often quoted: no square root over the cosh−cos ratio and
/// `sqrt(ω/d)`, `sqrt(ω/4d)` as arguments. They are kept for comparison only.
/// `amplitude(x, d/2) == exact(x, d)²` and `delay(x, d/2) == exact delay(x, d)`.
pub mod quoted {
    use super::*;

    pub fn amplitude(x: f64, d: f64, length: f64, bc: &HarmonicBoundary) -> f64 {
        let s = (bc.omega / d).sqrt();
        bc.amplitude * ((x * s).cosh() - (x * s).cos()) / ((length * s).cosh() - (length * s).cos())
    }

    pub fn delay(x: f64, d: f64, length: f64, bc: &HarmonicBoundary) -> f64 {
        let s = (bc.omega / (4.0 * d)).sqrt();
        let (p, m) = (s * (x + length), s * (x - length));
        let expr1 = -p.sinh() * m.sin() + m.sinh() * p.sin();
        let expr2 = p.cosh() * m.cos() - m.cosh() * p.cos();
        let angle = if expr2 > 0.0 {
            (expr1 / expr2).atan()
        } else {
            std::f64::consts::PI + (expr1 / expr2).atan()
        };
        wrap_period(angle / bc.omega, bc.period())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tidal() -> HarmonicBoundary {
        HarmonicBoundary::tidal()
    }

    /// Amplitude and delay read off by sampling `p(x, t)` at 1 s over one period.
    fn sampled(x: f64, d: f64, length: f64, bc: &HarmonicBoundary) -> (f64, f64) {
        let period = bc.period();
        let n = period.round() as usize;
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut lo = f64::INFINITY;
        for i in 0..n {
            let t = i as f64;
            let p = finite_aquifer_pressure(x, t, d, length, bc).unwrap();
            if p > best.0 {
                best = (p, t);
            }
            lo = lo.min(p);
        }
        let amp = 0.5 * (best.0 - lo);
        // boundary maximum at T/4 (+ phase shift)
        let t_bc = wrap_period((0.5 * std::f64::consts::PI - bc.phase) / bc.omega, period);
        (amp, wrap_period(best.1 - t_bc, period))
    }

    #[test]
    fn semi_infinite_examples() {
        let bc = tidal();
        let r0 = semi_infinite_response(0.0, 1.0, &bc).unwrap();
        assert_eq!((r0.amplitude, r0.delay), (1.0, 0.0));
        let r = semi_infinite_response(80.0, 1.0, &bc).unwrap();
        assert!((r.amplitude - 0.511).abs() < 1e-3);
        assert!((r.delay - 4771.0).abs() < 1.0);
        assert!(semi_infinite_response(1.0, 0.0, &bc).is_err());
        assert!(semi_infinite_response(1.0, 1.0, &HarmonicBoundary::new(1.0, 0.0)).is_err());
    }

    #[test]
    fn semi_infinite_log_linear() {
        let bc = tidal();
        for &d in &[0.1, 1.0, 10.0] {
            let slope = -(bc.omega / (2.0 * d)).sqrt();
            let lag = (1.0 / (2.0 * d * bc.omega)).sqrt();
            let mut prev = f64::INFINITY;
            for k in 0..50 {
                let x = k as f64 * 2.0;
                let r = semi_infinite_response(x, d, &bc).unwrap();
                assert!(r.amplitude < prev);
                prev = r.amplitude;
                assert_relative_eq!(r.amplitude.ln(), slope * x, epsilon = 1e-12);
                if x * lag < bc.period() {
                    assert_relative_eq!(r.delay, x * lag, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn finite_boundaries() {
        let bc = tidal();
        let (d, l) = (1.0, 120.0);
        assert_eq!(finite_aquifer_pressure(0.0, 1234.0, d, l, &bc).unwrap(), 0.0);
        let t = 0.25 * bc.period();
        assert_relative_eq!(finite_aquifer_pressure(l, t, d, l, &bc).unwrap(), 1.0, epsilon = 1e-12);
        let end = finite_aquifer_response(l, d, l, &bc).unwrap();
        assert_relative_eq!(end.amplitude, 1.0, epsilon = 1e-12);
        assert!(end.delay < 1e-6 || (bc.period() - end.delay) < 1e-6);
        let fixed = finite_aquifer_response(0.0, d, l, &bc).unwrap();
        assert_eq!((fixed.amplitude, fixed.delay), (0.0, 0.0));
        assert!(finite_aquifer_response(121.0, d, l, &bc).is_err());
        assert!(finite_aquifer_response(-1.0, d, l, &bc).is_err());
    }

    #[test]
    fn finite_midpoint_linear_limit() {
        let bc = tidal();
        let (amp, _) = sampled(60.0, 1000.0, 120.0, &bc);
        assert!((amp - 0.5).abs() < 0.5 * 0.005);
    }

    #[test]
    fn response_matches_sampled_pressure() {
        let bc = tidal();
        let r = finite_aquifer_response(40.0, 1.0, 120.0, &bc).unwrap();
        let (amp, delay) = sampled(40.0, 1.0, 120.0, &bc);
        assert!((r.amplitude - amp).abs() < 1e-3 * amp);
        assert!((r.delay - delay).abs() <= 1.0);
    }

    #[test]
    fn response_matches_sampled_random_triples() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let bc = HarmonicBoundary { amplitude: 2.5, omega: tidal().omega, phase: 0.3 };
        for _ in 0..20 {
            let length = rng.random_range(20.0..200.0);
            let x = rng.random_range(0.05..1.0) * length;
            let d = 10f64.powf(rng.random_range(-1.0..3.0));
            let r = finite_aquifer_response(x, d, length, &bc).unwrap();
            let (amp, delay) = sampled(x, d, length, &bc);
            if amp < 1e-9 {
                continue;
            }
            assert!((r.amplitude - amp).abs() < 1e-3 * amp, "x={x} d={d} L={length}");
            let dd = crate::wrap_centered(r.delay - delay, bc.period());
            assert!(dd.abs() <= 1.0, "delay {} vs {}", r.delay, delay);
        }
    }

    #[test]
    fn finite_tends_to_semi_infinite() {
        let bc = tidal();
        for &d in &[0.1, 1.0, 10.0] {
            let scale = (2.0 * d / bc.omega).sqrt();
            let length = 10.0 * scale;
            for &depth in &[0.0, 0.5 * scale, scale, 2.0 * scale] {
                let fin = finite_aquifer_response(length - depth, d, length, &bc).unwrap();
                let semi = semi_infinite_response(depth, d, &bc).unwrap();
                assert!((fin.amplitude - semi.amplitude).abs() < 0.01 * semi.amplitude);
            }
        }
    }

    #[test]
    fn linear_profile_for_permeable_soil() {
        let bc = tidal();
        for &d in &[10.0, 100.0, 1000.0] {
            for k in 0..=120 {
                let x = k as f64;
                let r = finite_aquifer_response(x, d, 120.0, &bc).unwrap();
                assert!((r.amplitude - x / 120.0).abs() < 0.01);
            }
        }
    }

    #[test]
    fn delay_decreases_with_diffusivity() {
        let bc = tidal();
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let d = 10f64.powf(-1.0 + k as f64 * 0.1);
            let r = finite_aquifer_response(40.0, d, 120.0, &bc).unwrap();
            assert!(r.delay < prev, "d={d}");
            prev = r.delay;
        }
    }

    #[test]
    fn no_overflow_for_tiny_diffusivity() {
        let bc = tidal();
        let r = finite_aquifer_response(100.0, 1e-7, 120.0, &bc).unwrap();
        assert!(r.amplitude.is_finite() && r.amplitude < 1e-100);
        let p = finite_aquifer_pressure(119.9, 100.0, 1e-7, 120.0, &bc).unwrap();
        assert!(p.is_finite());
    }

    #[test]
    fn dissipation_coefficients() {
        let q_aug = attenuation_q(95.0, 0.1, 48.0 * 3600.0).unwrap();
        let q_jan = attenuation_q(95.0, 0.1 / 1.8, 48.0 * 3600.0).unwrap();
        assert!((q_aug - 0.278).abs() < 1e-3);
        assert!((q_jan - 0.179).abs() < 1e-3);
        assert_eq!(attenuation_q(0.0, 0.1, 1.0).unwrap(), 1.0);
        assert!(attenuation_q(1.0, 0.0, 1.0).is_err());
        assert!(attenuation_q(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn quoted_forms_relation() {
        let bc = tidal();
        for &(x, d) in &[(40.0, 1.0), (80.0, 0.3), (10.0, 5.0)] {
            let exact = finite_aquifer_response(x, d, 120.0, &bc).unwrap();
            assert_relative_eq!(quoted::amplitude(x, d / 2.0, 120.0, &bc), exact.amplitude.powi(2), max_relative = 1e-9);
            assert!((quoted::delay(x, d / 2.0, 120.0, &bc) - exact.delay).abs() < 1e-6);
            // as quoted, the amplitude differs from the steady harmonic
            assert!((quoted::amplitude(x, d, 120.0, &bc) - exact.amplitude).abs() > 1e-3);
        }
    }
}
