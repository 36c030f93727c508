//! Two-slice, two-zone superposition model used for calibration starting points.
//!
//! Each horizontal slice runs from the sea inlet (`s = 0`, tidal pressure) over
//! zone a (length `L1`) and zone b (length `L2`) to a fixed land end where the
//! oscillation vanishes. The upper slice carries `d1`, `d2`, the lower one `d3`,
//! `d4`. The complex interface pressures are unknowns closed by continuity of
//! the Darcy flux `d·∂p/∂s` across the interface.

use num_complex::Complex64;
use rayon::prelude::*;

use super::{csch_coth, wave_number, AnalyticError, HarmonicBoundary, HarmonicResponse};
use crate::{wrap_centered, wrap_period};

/// Residual norm below which a start counts as converged.
pub const MULTIZONE_TOLERANCE: f64 = 1e-8;

const STARTS: usize = 32;
const MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slice {
    Upper,
    Lower,
}

/// Position of a sensor in the layered 1D frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePosition {
    pub slice: Slice,
    /// Horizontal distance from the sea inlet [m].
    pub distance: f64,
}

/// Observed relative amplitude and delay at one sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub position: SlicePosition,
    pub relative_amplitude: f64,
    /// [s]
    pub delay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiZoneLayout {
    /// `[d1, d2, d3, d4]` [m²/s]
    pub d: [f64; 4],
    pub l1: f64,
    pub l2: f64,
    /// Interface pressure amplitudes [Pa], upper then lower.
    pub interface_amplitude: [f64; 2],
    /// Interface phases [rad], same convention as [`HarmonicBoundary::phase`].
    pub interface_phase: [f64; 2],
}

impl MultiZoneLayout {
    /// Layout with interface values closed by flux continuity.
    pub fn consistent(d: [f64; 4], l1: f64, l2: f64, bc: &HarmonicBoundary) -> Self {
        let mut out = Self { d, l1, l2, interface_amplitude: [0.0; 2], interface_phase: [0.0; 2] };
        for (i, slice) in [Slice::Upper, Slice::Lower].into_iter().enumerate() {
            let z = out.interface_closed_form(slice, bc);
            out.interface_amplitude[i] = z.norm();
            out.interface_phase[i] = z.arg();
        }
        out
    }

    pub fn validate(&self) -> Result<(), AnalyticError> {
        if self.d.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(AnalyticError::NonPositive("zone diffusivity"));
        }
        if !(self.l1 > 0.0) {
            return Err(AnalyticError::NonPositive("L1"));
        }
        if !(self.l2 > 0.0) {
            return Err(AnalyticError::NonPositive("L2"));
        }
        if self.interface_amplitude.iter().any(|a| !(*a >= 0.0)) {
            return Err(AnalyticError::NonPositive("interface amplitude"));
        }
        Ok(())
    }

    fn zone_d(&self, slice: Slice) -> (f64, f64) {
        match slice {
            Slice::Upper => (self.d[0], self.d[1]),
            Slice::Lower => (self.d[2], self.d[3]),
        }
    }

    fn interface(&self, slice: Slice) -> Complex64 {
        let i = slice as usize;
        Complex64::from_polar(self.interface_amplitude[i], self.interface_phase[i])
    }

    fn interface_closed_form(&self, slice: Slice, bc: &HarmonicBoundary) -> Complex64 {
        let (da, db) = self.zone_d(slice);
        let (ka, kb) = (wave_number(bc.omega, da), wave_number(bc.omega, db));
        let (csch_a, coth_a) = csch_coth(ka * self.l1);
        let (_, coth_b) = csch_coth(kb * self.l2);
        let (fa, fb) = (da * ka, db * kb);
        bc.phasor() * fa * csch_a / (fa * coth_a + fb * coth_b)
    }

    /// Complex pressure amplitude at `pos`; zero beyond the land end.
    pub fn phasor(&self, pos: SlicePosition, bc: &HarmonicBoundary) -> Complex64 {
        let (da, db) = self.zone_d(pos.slice);
        let z = self.interface(pos.slice);
        let s = pos.distance;
        if s <= self.l1 {
            let k = wave_number(bc.omega, da);
            bc.phasor() * super::sinh_ratio(k, self.l1 - s, self.l1) + z * super::sinh_ratio(k, s, self.l1)
        } else if s <= self.l1 + self.l2 {
            let k = wave_number(bc.omega, db);
            z * super::sinh_ratio(k, self.l1 + self.l2 - s, self.l2)
        } else {
            Complex64::new(0.0, 0.0)
        }
    }

    /// Flux mismatch `d_a·P_a'(L1) − d_b·P_b'(L1)` and its scale.
    fn flux_mismatch(&self, slice: Slice, bc: &HarmonicBoundary) -> (Complex64, f64) {
        let (da, db) = self.zone_d(slice);
        let (ka, kb) = (wave_number(bc.omega, da), wave_number(bc.omega, db));
        let z = self.interface(slice);
        let (csch_a, coth_a) = csch_coth(ka * self.l1);
        let (_, coth_b) = csch_coth(kb * self.l2);
        let grad_a = ka * (z * coth_a - bc.phasor() * csch_a);
        let grad_b = -kb * z * coth_b;
        let scale = (da * ka.norm() + db * kb.norm()) * bc.amplitude.max(f64::MIN_POSITIVE);
        (da * grad_a - db * grad_b, scale)
    }
}

/// Forward evaluation of the layered model at the given positions.
pub fn multizone_forward(
    layout: &MultiZoneLayout,
    bc: &HarmonicBoundary,
    positions: &[SlicePosition],
) -> Vec<HarmonicResponse> {
    positions.iter().map(|p| bc.response(layout.phasor(*p, bc))).collect()
}

/// The 10 normalized residuals: upper and lower continuity (real, imaginary),
/// then relative amplitude and delay/period for each of the three targets.
pub fn multizone_residuals(
    layout: &MultiZoneLayout,
    bc: &HarmonicBoundary,
    targets: &[Target],
) -> Result<Vec<f64>, AnalyticError> {
    if targets.len() != 3 {
        return Err(AnalyticError::TargetCount { expected: 3, got: targets.len() });
    }
    layout.validate()?;
    bc.validate()?;
    Ok(residuals_unchecked(layout, bc, targets))
}

fn residuals_unchecked(layout: &MultiZoneLayout, bc: &HarmonicBoundary, targets: &[Target]) -> Vec<f64> {
    let mut r = Vec::with_capacity(4 + 2 * targets.len());
    for slice in [Slice::Upper, Slice::Lower] {
        let (m, scale) = layout.flux_mismatch(slice, bc);
        r.push(m.re / scale);
        r.push(m.im / scale);
    }
    let period = bc.period();
    for t in targets {
        let resp = bc.response(layout.phasor(t.position, bc));
        r.push(resp.amplitude / bc.amplitude - t.relative_amplitude);
        r.push(wrap_centered(resp.delay - wrap_period(t.delay, period), period) / period);
    }
    r
}

/// Box for the multi-start search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuessBounds {
    /// Diffusivity range shared by all zones [m²/s].
    pub d: (f64, f64),
    pub l1: (f64, f64),
    pub l2: (f64, f64),
}

impl Default for GuessBounds {
    fn default() -> Self {
        Self { d: (1e-3, 1e4), l1: (40.0, 110.0), l2: (2.0, 40.0) }
    }
}

impl GuessBounds {
    fn validate(&self) -> Result<(), AnalyticError> {
        let ok = |r: (f64, f64)| r.0 > 0.0 && r.1 > r.0 && r.1.is_finite();
        if ok(self.d) && ok(self.l1) && ok(self.l2) {
            Ok(())
        } else {
            Err(AnalyticError::NonPositive("bounds"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiZoneFit {
    pub layout: MultiZoneLayout,
    pub residual_norm: f64,
    pub converged: bool,
    /// Converged starts out of the total.
    pub converged_starts: usize,
}

// Unknown vector: ln d1..ln d4, L1, L2, Re/Im of both interface phasors.
fn unpack(u: &[f64; 10]) -> MultiZoneLayout {
    let z1 = Complex64::new(u[6], u[7]);
    let z2 = Complex64::new(u[8], u[9]);
    MultiZoneLayout {
        d: [u[0].exp(), u[1].exp(), u[2].exp(), u[3].exp()],
        l1: u[4],
        l2: u[5],
        interface_amplitude: [z1.norm(), z2.norm()],
        interface_phase: [z1.arg(), z2.arg()],
    }
}

fn pack(l: &MultiZoneLayout) -> [f64; 10] {
    let z1 = Complex64::from_polar(l.interface_amplitude[0], l.interface_phase[0]);
    let z2 = Complex64::from_polar(l.interface_amplitude[1], l.interface_phase[1]);
    [l.d[0].ln(), l.d[1].ln(), l.d[2].ln(), l.d[3].ln(), l.l1, l.l2, z1.re, z1.im, z2.re, z2.im]
}

fn norm(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn halton(index: usize, base: usize) -> f64 {
    let (mut f, mut r, mut i) = (1.0, 0.0, index);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Solves `a·x = b` for a small dense system; `None` when singular.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[piv][k].abs() < 1e-300 {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in (k + 1)..n {
            let f = a[i][k] / a[k][k];
            if f != 0.0 {
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = ((k + 1)..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct Problem<'a> {
    bc: &'a HarmonicBoundary,
    targets: &'a [Target],
    lo: [f64; 10],
    hi: [f64; 10],
}

impl Problem<'_> {
    fn eval(&self, u: &[f64; 10]) -> Vec<f64> {
        residuals_unchecked(&unpack(u), self.bc, self.targets)
    }

    fn project(&self, u: &mut [f64; 10]) {
        for i in 0..6 {
            u[i] = u[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    fn jacobian(&self, u: &[f64; 10]) -> Vec<Vec<f64>> {
        let n = 10;
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let h = match j {
                0..=3 => 1e-6,
                4 | 5 => 1e-6 * u[j].abs().max(1.0),
                _ => 1e-7 * self.bc.amplitude.max(1e-12),
            };
            let (mut up, mut dn) = (*u, *u);
            up[j] += h;
            dn[j] -= h;
            let (rp, rm) = (self.eval(&up), self.eval(&dn));
            for i in 0..n {
                jac[i][j] = (rp[i] - rm[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// Newton step; falls back to Levenberg-Marquardt damping when singular.
    fn step(&self, jac: &[Vec<f64>], r: &[f64], lambda: f64) -> Option<Vec<f64>> {
        let n = r.len();
        if lambda == 0.0 {
            return dense_solve(jac.to_vec(), r.iter().map(|v| -v).collect());
        }
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                jtr[i] -= jac[k][i] * r[k];
                for j in 0..n {
                    jtj[i][j] += jac[k][i] * jac[k][j];
                }
            }
        }
        for i in 0..n {
            jtj[i][i] += lambda * jtj[i][i].max(1e-12);
        }
        dense_solve(jtj, jtr)
    }

    fn solve_from(&self, mut u: [f64; 10]) -> ([f64; 10], f64) {
        let mut r = self.eval(&u);
        let mut f = norm(&r);
        let mut lambda = 0.0;
        for _ in 0..MAX_ITER {
            if f < MULTIZONE_TOLERANCE {
                break;
            }
            let jac = self.jacobian(&u);
            let mut improved = false;
            for attempt in 0..6 {
                let Some(delta) = self.step(&jac, &r, lambda) else {
                    lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
                    continue;
                };
                let mut alpha = 1.0;
                for _ in 0..12 {
                    let mut trial = u;
                    for i in 0..10 {
                        trial[i] += alpha * delta[i];
                    }
                    self.project(&mut trial);
                    let rt = self.eval(&trial);
                    let ft = norm(&rt);
                    if ft.is_finite() && ft < f {
                        u = trial;
                        r = rt;
                        f = ft;
                        improved = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if improved {
                    lambda = if attempt == 0 { lambda * 0.1 } else { lambda };
                    if lambda < 1e-9 {
                        lambda = 0.0;
                    }
                    break;
                }
                lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
            }
            if !improved {
                break;
            }
        }
        (u, f)
    }
}

fn heterogeneity(l: &MultiZoneLayout) -> f64 {
    (l.d[0].ln() - l.d[1].ln()).abs() + (l.d[2].ln() - l.d[3].ln()).abs()
}

/// Multi-start damped Newton on [`multizone_residuals`].
///
/// Starts are Halton points in the box (log space for diffusivities); the
/// interface unknowns of each start are closed from continuity. Among
/// converged starts the least heterogeneous layout wins.
pub fn multizone_initial_guess(
    targets: &[Target],
    bc: &HarmonicBoundary,
    bounds: &GuessBounds,
) -> Result<MultiZoneFit, AnalyticError> {
    if targets.len() != 3 {
        return Err(AnalyticError::TargetCount { expected: 3, got: targets.len() });
    }
    bc.validate()?;
    bounds.validate()?;
    let (ld0, ld1) = (bounds.d.0.ln(), bounds.d.1.ln());
    let mut lo = [f64::NEG_INFINITY; 10];
    let mut hi = [f64::INFINITY; 10];
    for i in 0..4 {
        lo[i] = ld0;
        hi[i] = ld1;
    }
    (lo[4], hi[4]) = bounds.l1;
    (lo[5], hi[5]) = bounds.l2;
    let problem = Problem { bc, targets, lo, hi };
    const BASES: [usize; 6] = [2, 3, 5, 7, 11, 13];

    let results: Vec<([f64; 10], f64)> = (0..STARTS)
        .into_par_iter()
        .map(|s| {
            let h: Vec<f64> = BASES.iter().map(|b| halton(s + 1, *b)).collect();
            let d = [0, 1, 2, 3].map(|i| (ld0 + h[i] * (ld1 - ld0)).exp());
            let l1 = bounds.l1.0 + h[4] * (bounds.l1.1 - bounds.l1.0);
            let l2 = bounds.l2.0 + h[5] * (bounds.l2.1 - bounds.l2.0);
            let start = pack(&MultiZoneLayout::consistent(d, l1, l2, bc));
            problem.solve_from(start)
        })
        .collect();

    let converged: Vec<&([f64; 10], f64)> =
        results.iter().filter(|(_, f)| *f < MULTIZONE_TOLERANCE).collect();
    let pick = if converged.is_empty() {
        results.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("at least one start")
    } else {
        converged
            .iter()
            .copied()
            .min_by(|a, b| heterogeneity(&unpack(&a.0)).total_cmp(&heterogeneity(&unpack(&b.0))))
            .expect("non-empty")
    };
    let fit = MultiZoneFit {
        layout: unpack(&pick.0),
        residual_norm: pick.1,
        converged: !converged.is_empty(),
        converged_starts: converged.len(),
    };
    if fit.converged {
        Ok(fit)
    } else {
        Err(AnalyticError::NoConvergence(Box::new(fit)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::finite_aquifer_response;

    fn positions() -> [SlicePosition; 3] {
        [
            SlicePosition { slice: Slice::Lower, distance: 80.0 },
            SlicePosition { slice: Slice::Upper, distance: 80.0 },
            SlicePosition { slice: Slice::Upper, distance: 92.0 },
        ]
    }

    fn targets_from(layout: &MultiZoneLayout, bc: &HarmonicBoundary) -> Vec<Target> {
        let pos = positions();
        multizone_forward(layout, bc, &pos)
            .into_iter()
            .zip(pos)
            .map(|(r, p)| Target { position: p, relative_amplitude: r.amplitude / bc.amplitude, delay: r.delay })
            .collect()
    }

    #[test]
    fn homogeneous_reduction() {
        let bc = HarmonicBoundary::tidal();
        let (d, total) = (0.7, 100.0);
        let targets: Vec<Target> = positions()
            .into_iter()
            .map(|p| {
                let r = finite_aquifer_response(total - p.distance, d, total, &bc).unwrap();
                Target { position: p, relative_amplitude: r.amplitude, delay: r.delay }
            })
            .collect();
        for l1 in [30.0, 60.0, 85.0] {
            let layout = MultiZoneLayout::consistent([d; 4], l1, total - l1, &bc);
            let r = multizone_residuals(&layout, &bc, &targets).unwrap();
            assert!(norm(&r) <= 1e-8, "l1={l1}: {r:?}");
        }
    }

    #[test]
    fn self_consistent_targets() {
        let bc = HarmonicBoundary::tidal();
        let layout = MultiZoneLayout::consistent([50.0, 0.5, 400.0, 0.3], 80.0, 15.0, &bc);
        let targets = targets_from(&layout, &bc);
        let r = multizone_residuals(&layout, &bc, &targets).unwrap();
        assert!(r.iter().all(|v| v.abs() <= 1e-8), "{r:?}");
    }

    #[test]
    fn continuity_is_flux_balance() {
        let bc = HarmonicBoundary::tidal();
        let layout = MultiZoneLayout::consistent([2.0, 0.2, 5.0, 0.05], 70.0, 20.0, &bc);
        let h = 1e-4;
        for slice in [Slice::Upper, Slice::Lower] {
            let at = |s: f64| layout.phasor(SlicePosition { slice, distance: s }, &bc);
            let (da, db) = layout.zone_d(slice);
            let ga = (at(70.0) - at(70.0 - h)) / h;
            let gb = (at(70.0 + h) - at(70.0)) / h;
            let scale = (da * ga).norm();
            assert!((da * ga - db * gb).norm() < 1e-3 * scale);
            // pressure continuous
            assert!((at(70.0 - 1e-9) - at(70.0 + 1e-9)).norm() < 1e-6);
        }
    }

    #[test]
    fn perturbation_is_visible() {
        let bc = HarmonicBoundary::tidal();
        let layout = MultiZoneLayout::consistent([50.0, 0.5, 400.0, 0.3], 80.0, 15.0, &bc);
        let targets = targets_from(&layout, &bc);
        let mut bumped = layout;
        bumped.d[1] *= 1.1;
        let r = multizone_residuals(&bumped, &bc, &targets).unwrap();
        assert!(r.iter().any(|v| v.abs() > 1e-3), "{r:?}");
    }

    #[test]
    fn rejects_wrong_target_count() {
        let bc = HarmonicBoundary::tidal();
        let layout = MultiZoneLayout::consistent([1.0; 4], 80.0, 15.0, &bc);
        let t = targets_from(&layout, &bc);
        assert!(matches!(
            multizone_residuals(&layout, &bc, &t[..2]),
            Err(AnalyticError::TargetCount { expected: 3, got: 2 })
        ));
        assert!(multizone_initial_guess(&t[..1], &bc, &GuessBounds::default()).is_err());
    }

    #[test]
    fn recovers_synthetic_layout() {
        let bc = HarmonicBoundary::tidal();
        let truth = MultiZoneLayout::consistent([50.0, 0.5, 400.0, 0.3], 80.0, 15.0, &bc);
        let targets = targets_from(&truth, &bc);
        let bounds = GuessBounds { d: (1e-2, 1e4), l1: (60.0, 100.0), l2: (5.0, 30.0) };
        let fit = match multizone_initial_guess(&targets, &bc, &bounds) {
            Ok(f) => f,
            Err(AnalyticError::NoConvergence(f)) => *f,
            Err(e) => panic!("{e}"),
        };
        let got = multizone_forward(&fit.layout, &bc, &positions());
        for (g, t) in got.iter().zip(&targets) {
            assert!((g.amplitude - t.relative_amplitude).abs() <= 0.02 * t.relative_amplitude, "{fit:?}");
            assert!(wrap_centered(g.delay - t.delay, bc.period()).abs() <= 120.0, "{fit:?}");
        }
    }

    #[test]
    fn homogeneous_twin() {
        let bc = HarmonicBoundary::tidal();
        let truth = MultiZoneLayout::consistent([0.8; 4], 82.0, 13.0, &bc);
        let targets = targets_from(&truth, &bc);
        let fit = multizone_initial_guess(&targets, &bc, &GuessBounds::default()).unwrap();
        let d = fit.layout.d;
        assert!((d[0] / d[1] - 1.0).abs() < 0.05, "{fit:?}");
        assert!((d[2] / d[3] - 1.0).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn halton_is_low_discrepancy() {
        assert_eq!(halton(1, 2), 0.5);
        assert_eq!(halton(2, 2), 0.25);
        assert!((halton(1, 3) - 1.0 / 3.0).abs() < 1e-15);
    }
}
