//! Drucker-Prager screening of effective stress states.
//!
//! Plane strain, compression negative. Shear components are tensor (not
//! engineering) shears throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DikeModel;

#[derive(Debug, Error, PartialEq)]
pub enum StabilityError {
    #[error("invalid material: {0}")]
    Material(String),
    #[error("Poisson's ratio 0.5 is incompressible")]
    Incompressible,
    #[error("return map did not reach the yield surface (F = {0} Pa)")]
    NonConvergent(f64),
    #[error("point ({x}, {y}) lies outside the cross-section")]
    OutsideSection { x: f64, y: f64 },
}

/// Symmetric plane-strain tensor `(xx, yy, zz, xy)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tensor {
    pub xx: f64,
    pub yy: f64,
    pub zz: f64,
    pub xy: f64,
}

impl Tensor {
    pub const fn new(xx: f64, yy: f64, zz: f64, xy: f64) -> Self {
        Self { xx, yy, zz, xy }
    }

    pub fn isotropic(v: f64) -> Self {
        Self::new(v, v, v, 0.0)
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy + self.zz
    }

    pub fn deviator(&self) -> Self {
        let m = self.trace() / 3.0;
        Self::new(self.xx - m, self.yy - m, self.zz - m, self.xy)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(k * self.xx, k * self.yy, k * self.zz, k * self.xy)
    }

    pub fn add(&self, o: &Self) -> Self {
        Self::new(self.xx + o.xx, self.yy + o.yy, self.zz + o.zz, self.xy + o.xy)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-1.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.xx.abs().max(self.yy.abs()).max(self.zz.abs()).max(self.xy.abs())
    }
}

/// `(I1, I2, J2)` with `J2 = I1²/3 − I2`.
pub fn stress_invariants(s: &Tensor) -> (f64, f64, f64) {
    let i1 = s.trace();
    let i2 = s.xx * s.yy + s.zz * s.yy + s.xx * s.zz - s.xy * s.xy;
    // the deviator form is exact where I1²/3 − I2 cancels
    let d = s.deviator();
    let j2 = 0.5 * (d.xx * d.xx + d.yy * d.yy + d.zz * d.zz) + d.xy * d.xy;
    (i1, i2, j2)
}

/// Drucker-Prager `(α, F_DP)` inscribed in the Mohr-Coulomb surface.
pub fn dp_constants(c: f64, phi: f64) -> (f64, f64) {
    let t = phi.tan();
    let root = (9.0 + 12.0 * t * t).sqrt();
    (t / root, 3.0 * c / root)
}

/// `F = α·I1 + √J2 − F_DP`.
pub fn yield_function(s: &Tensor, c: f64, phi: f64) -> f64 {
    let (alpha, k) = dp_constants(c, phi);
    let (i1, _, j2) = stress_invariants(s);
    alpha * i1 + j2.max(0.0).sqrt() - k
}

fn lame(e: f64, nu: f64) -> Result<(f64, f64), StabilityError> {
    if (nu - 0.5).abs() < 1e-12 {
        return Err(StabilityError::Incompressible);
    }
    if !(e > 0.0) || !(-1.0..0.5).contains(&nu) {
        return Err(StabilityError::Material(format!("E = {e}, ν = {nu}")));
    }
    let g = e / (2.0 * (1.0 + nu));
    let k = e / (3.0 * (1.0 - 2.0 * nu));
    Ok((g, k))
}

/// Isotropic linear stress for a strain tensor; pass `zz = 0` for plane strain.
pub fn elastic_stress(eps: &Tensor, e: f64, nu: f64) -> Result<Tensor, StabilityError> {
    let (g, _) = lame(e, nu)?;
    let lam = 2.0 * g * nu / (1.0 - 2.0 * nu);
    let v = lam * eps.trace();
    Ok(Tensor::new(v + 2.0 * g * eps.xx, v + 2.0 * g * eps.yy, v + 2.0 * g * eps.zz, 2.0 * g * eps.xy))
}

fn compliance(sig: &Tensor, e: f64, nu: f64) -> Result<Tensor, StabilityError> {
    let (g, k) = lame(e, nu)?;
    let d = sig.deviator();
    let vol = sig.trace() / (9.0 * k);
    Ok(Tensor::new(
        d.xx / (2.0 * g) + vol,
        d.yy / (2.0 * g) + vol,
        d.zz / (2.0 * g) + vol,
        d.xy / (2.0 * g),
    ))
}

/// Closed-form associated return onto the Drucker-Prager cone.
///
/// Returns the corrected stress and the plastic strain increment. Trial
/// states beyond the apex are returned to the apex.
pub fn return_map(trial: &Tensor, c: f64, phi: f64, e: f64, nu: f64) -> Result<(Tensor, Tensor), StabilityError> {
    let (g, k) = lame(e, nu)?;
    let f = yield_function(trial, c, phi);
    if f <= 0.0 {
        return Ok((*trial, Tensor::default()));
    }
    let (alpha, kdp) = dp_constants(c, phi);
    let (i1, _, j2) = stress_invariants(trial);
    let q = j2.max(0.0).sqrt();
    let dl = f / (g + 9.0 * k * alpha * alpha);
    let corrected = if q - g * dl > 0.0 || alpha == 0.0 {
        let dev = trial.deviator();
        let shrink = if q > 0.0 { (q - g * dl) / q } else { 0.0 };
        let mean = (i1 - 9.0 * k * alpha * dl) / 3.0;
        dev.scale(shrink).add(&Tensor::isotropic(mean))
    } else {
        Tensor::isotropic(kdp / alpha / 3.0)
    };
    let residual = yield_function(&corrected, c, phi);
    if residual > 1.0 || !residual.is_finite() {
        return Err(StabilityError::NonConvergent(residual));
    }
    let d_eps = compliance(&trial.sub(&corrected), e, nu)?;
    Ok((corrected, d_eps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialPoint {
    /// Effective stress [Pa].
    pub stress: Tensor,
    pub plastic_strain: Tensor,
    pub young: f64,
    pub poisson: f64,
    pub cohesion: f64,
    /// Friction angle [rad].
    pub friction: f64,
    /// Saturated soil density [kg/m³].
    pub density: f64,
}

impl MaterialPoint {
    /// Sand parameters with zero initial stress.
    pub fn sand() -> Self {
        Self {
            stress: Tensor::default(),
            plastic_strain: Tensor::default(),
            young: 1e10,
            poisson: 0.3,
            cohesion: 0.0,
            friction: 30f64.to_radians(),
            density: 2000.0,
        }
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        if !(self.young > 0.0) {
            return Err(StabilityError::Material(format!("E must be positive, got {}", self.young)));
        }
        if !(0.0..0.5).contains(&self.poisson) {
            return Err(StabilityError::Material(format!("ν must be in [0, 0.5), got {}", self.poisson)));
        }
        if !(self.cohesion >= 0.0) {
            return Err(StabilityError::Material(format!("c must be non-negative, got {}", self.cohesion)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.friction) {
            return Err(StabilityError::Material(format!("φ must be in [0, π/2), got {}", self.friction)));
        }
        if !(self.density > 0.0) {
            return Err(StabilityError::Material("density must be positive".into()));
        }
        Ok(())
    }

    pub fn bulk_modulus(&self) -> f64 {
        self.young / (3.0 * (1.0 - 2.0 * self.poisson))
    }

    pub fn yield_value(&self) -> f64 {
        yield_function(&self.stress, self.cohesion, self.friction)
    }

    /// Adds an elastic trial increment for `d_strain` and returns to the
    /// yield surface, accumulating plastic strain.
    pub fn load(&mut self, d_strain: &Tensor) -> Result<(), StabilityError> {
        self.validate()?;
        let trial = self.stress.add(&elastic_stress(d_strain, self.young, self.poisson)?);
        let (s, dp) = return_map(&trial, self.cohesion, self.friction, self.young, self.poisson)?;
        self.stress = s;
        self.plastic_strain = self.plastic_strain.add(&dp);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityParams {
    pub cohesion: f64,
    pub friction: f64,
    pub density: f64,
    /// Earth-pressure coefficient; `None` uses `1 − sin φ`.
    pub k0: Option<f64>,
}

impl Default for StabilityParams {
    fn default() -> Self {
        Self { cohesion: 0.0, friction: 30f64.to_radians(), density: 2000.0, k0: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellStability {
    pub x: f64,
    pub y: f64,
    pub pressure: f64,
    pub yield_value: f64,
    pub flagged: bool,
}

/// Geostatic effective stress at `(x, y)` under pore pressure `p`.
///
/// The vertical total stress is the overburden from the section surface
/// above; `K₀` scales the effective vertical stress to the horizontal and
/// out-of-plane components.
pub fn geostatic_stress(model: &DikeModel, x: f64, y: f64, p: f64, params: &StabilityParams) -> Result<Tensor, StabilityError> {
    let top = model.polygon.top_at(x).ok_or(StabilityError::OutsideSection { x, y })?;
    let depth = (top - y).max(0.0);
    let sv = -params.density * model.fluid.gravity * depth + p;
    let k0 = params.k0.unwrap_or(1.0 - params.friction.sin());
    Ok(Tensor::new(k0 * sv, sv, k0 * sv, 0.0))
}

/// Yield value per point `(x, y, p)`.
pub fn stability_field(
    model: &DikeModel,
    points: &[(f64, f64, f64)],
    params: &StabilityParams,
) -> Result<Vec<CellStability>, StabilityError> {
    points
        .iter()
        .map(|&(x, y, p)| {
            let eff = geostatic_stress(model, x, y, p, params)?;
            let f = yield_function(&eff, params.cohesion, params.friction);
            Ok(CellStability { x, y, pressure: p, yield_value: f, flagged: f >= 0.0 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::FluidProperties;
    use proptest::prelude::*;

    const KPA: f64 = 1e3;

    fn phi30() -> f64 {
        30f64.to_radians()
    }

    #[test]
    fn invariants_examples() {
        let (i1, _, j2) = stress_invariants(&Tensor::isotropic(-100.0 * KPA));
        assert_eq!(i1, -300.0 * KPA);
        assert!(j2.abs() < 1e-6);
        let s = Tensor::new(-100.0, -200.0, -150.0, 50.0);
        let (i1, i2, j2) = stress_invariants(&s);
        assert_eq!(i1, -450.0);
        assert!((i2 - 62_500.0).abs() < 1e-9);
        assert!((j2 - 5_000.0).abs() < 1e-9);
        assert!((j2 - (i1 * i1 / 3.0 - i2)).abs() < 1e-9);
        let (i1, _, j2) = stress_invariants(&Tensor::new(0.0, 0.0, 0.0, 7.0));
        assert_eq!((i1, j2), (0.0, 49.0));
    }

    #[test]
    fn dp_examples() {
        // tan 30° = 1/√3, so α = (1/√3)/√13
        let (a, k) = dp_constants(0.0, phi30());
        assert!((a - 1.0 / (3f64.sqrt() * 13f64.sqrt())).abs() < 1e-12);
        assert!((a - 0.16013).abs() < 1e-5);
        assert_eq!(k, 0.0);
        let (a, k) = dp_constants(10.0 * KPA, 0.0);
        assert_eq!(a, 0.0);
        assert!((k - 10.0 * KPA).abs() < 1e-9);
        let (a, _) = dp_constants(0.0, 45f64.to_radians());
        assert!((a - 1.0 / 21f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn yield_examples() {
        let f = yield_function(&Tensor::isotropic(-100.0 * KPA), 0.0, phi30());
        assert!((f / KPA + 48.04).abs() < 0.01);
        let f = yield_function(&Tensor::new(-100.0, -200.0, -150.0, 50.0).scale(KPA), 0.0, phi30());
        // α·I1 + √J2 with I1 = −450 kPa and J2 = 5000 kPa²
        let hand = -450.0 / 39f64.sqrt() + 5000f64.sqrt();
        assert!((f / KPA - hand).abs() < 1e-9);
        assert!((f / KPA + 1.35).abs() < 0.01);
        assert!((yield_function(&Tensor::new(0.0, 0.0, 0.0, 3.0), 0.0, 0.3) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn elastic_examples() {
        let s = elastic_stress(&Tensor::new(1e-4, 0.0, 0.0, 0.0), 1e10, 0.3).unwrap();
        assert!((s.xx - 1.346_153_8e6).abs() < 1.0);
        assert!((s.yy - 0.576_923_1e6).abs() < 1.0);
        assert_eq!(s.yy, s.zz);
        let s = elastic_stress(&Tensor::new(0.0, 0.0, 0.0, 1e-4), 1e10, 0.3).unwrap();
        assert!((s.xy - 0.769_230_8e6).abs() < 1.0);
        assert_eq!(elastic_stress(&Tensor::default(), 1e10, 0.3).unwrap(), Tensor::default());
        assert_eq!(elastic_stress(&Tensor::default(), 1e10, 0.5), Err(StabilityError::Incompressible));
    }

    /// Bisection on the plastic multiplier along the associated flow
    /// direction, independent of the closed form.
    fn bisect_return(trial: &Tensor, c: f64, phi: f64, e: f64, nu: f64) -> Tensor {
        let (alpha, _) = dp_constants(c, phi);
        let (_, _, j2) = stress_invariants(trial);
        let n = trial.deviator().scale(0.5 / j2.sqrt()).add(&Tensor::isotropic(alpha));
        let dir = elastic_stress(&n, e, nu).unwrap();
        let at = |l: f64| trial.sub(&dir.scale(l));
        let (mut lo, mut hi) = (0.0, 1e-20);
        while yield_function(&at(hi), c, phi) > 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if yield_function(&at(mid), c, phi) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi))
    }

    #[test]
    fn return_examples() {
        let elastic = Tensor::new(-100.0, -200.0, -150.0, 50.0).scale(KPA);
        let (s, dp) = return_map(&elastic, 0.0, phi30(), 1e10, 0.3).unwrap();
        assert_eq!((s, dp), (elastic, Tensor::default()));

        let shear = Tensor::new(0.0, 0.0, 0.0, 100.0 * KPA);
        let (s, dp) = return_map(&shear, 0.0, phi30(), 1e10, 0.3).unwrap();
        assert!(yield_function(&s, 0.0, phi30()).abs() <= 1.0);
        let oracle = bisect_return(&shear, 0.0, phi30(), 1e10, 0.3);
        assert!(s.sub(&oracle).max_abs() < 1.0, "{s:?} vs {oracle:?}");
        assert!(s.trace() < 0.0, "dilatant flow compresses the mean stress");
        assert!(dp.trace() > 0.0);

        let c = 10.0 * KPA;
        let (alpha, kdp) = dp_constants(c, phi30());
        let apex_i1 = kdp / alpha;
        let beyond = Tensor::isotropic(apex_i1);
        let (s, _) = return_map(&beyond, c, phi30(), 1e10, 0.3).unwrap();
        let (i1, _, j2) = stress_invariants(&s);
        assert!((i1 - apex_i1).abs() < 1e-6 * apex_i1);
        assert!(j2 < 1e-12 * apex_i1 * apex_i1);
    }

    #[test]
    fn material_point_loading() {
        let mut mp = MaterialPoint::sand();
        mp.stress = Tensor::isotropic(-50.0 * KPA);
        mp.load(&Tensor::new(0.0, 0.0, 0.0, 1e-4)).unwrap();
        assert!(mp.yield_value() <= 1.0);
        assert!(mp.plastic_strain.max_abs() > 0.0);
        assert!((mp.bulk_modulus() - 1e10 / 1.2).abs() < 1.0);
        let mut bad = MaterialPoint::sand();
        bad.poisson = 0.5;
        assert!(bad.validate().is_err());
    }

    fn reference() -> DikeModel {
        DikeModel::reference(1e-3, FluidProperties::default())
    }

    #[test]
    fn dry_strong_dike_is_stable() {
        let m = reference();
        let pts: Vec<_> = (0..40).map(|k| (-25.0 + 2.9 * k as f64, -3.0, 0.0)).collect();
        let params = StabilityParams { cohesion: 1e6, ..Default::default() };
        assert!(stability_field(&m, &pts, &params).unwrap().iter().all(|c| c.yield_value < 0.0));
    }

    #[test]
    fn flags_grow_with_pressure() {
        let m = reference();
        let rg = m.fluid.rho_g();
        let base: Vec<_> = (0..30).flat_map(|i| (0..8).map(move |j| (-20.0 + 3.7 * i as f64, -9.0 + j as f64))).collect();
        let mut last = 0;
        for scale in [0.0, 0.5, 1.0, 1.5, 2.0, 3.0] {
            let pts: Vec<_> = base.iter().map(|&(x, y)| (x, y, scale * rg * (0.0 - y).max(0.0))).collect();
            let n = stability_field(&m, &pts, &StabilityParams::default()).unwrap().iter().filter(|c| c.flagged).count();
            assert!(n >= last);
            last = n;
        }
        assert!(last > 0);
    }

    #[test]
    fn hydrostatic_column_is_stable() {
        // surface at y = −0.7 on the sea side, water table at the surface
        let m = reference();
        let rg = m.fluid.rho_g();
        let pts: Vec<_> = (1..37).map(|k| (-20.0, -0.7 - 0.25 * k as f64)).map(|(x, y)| (x, y, rg * (-0.7 - y))).collect();
        for c in stability_field(&m, &pts, &StabilityParams::default()).unwrap() {
            assert!(c.yield_value < 0.0, "{c:?}");
        }
        assert!(stability_field(&m, &[(500.0, 0.0, 0.0)], &StabilityParams::default()).is_err());
    }

    fn tensor() -> impl Strategy<Value = Tensor> {
        let r = -1e6..1e6f64;
        (r.clone(), r.clone(), r.clone(), r).prop_map(|(a, b, c, d)| Tensor::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn j2_non_negative(s in tensor()) {
            let (_, _, j2) = stress_invariants(&s);
            prop_assert!(j2 >= -1e-9 * s.max_abs().powi(2));
        }

        #[test]
        fn yield_homogeneous(s in tensor(), c in 0.0..1e5f64, phi in 0.0..1.5f64, k in 0.01..100.0f64) {
            let f1 = yield_function(&s.scale(k), k * c, phi);
            let f0 = yield_function(&s, c, phi);
            prop_assert!((f1 - k * f0).abs() <= 1e-9 * (k * s.max_abs() + k * c + 1.0));
        }

        #[test]
        fn return_idempotent(s in tensor(), c in 0.0..1e5f64, phi in 0.0..1.4f64) {
            let (once, _) = return_map(&s, c, phi, 1e10, 0.3).unwrap();
            prop_assert!(yield_function(&once, c, phi) <= 1.0);
            let (twice, d) = return_map(&once, c, phi, 1e10, 0.3).unwrap();
            prop_assert!(twice.sub(&once).max_abs() <= 1.0);
            prop_assert!(d.max_abs() <= 1e-9);
        }

        #[test]
        fn elastic_linear(a in tensor(), b in tensor()) {
            let (a, b) = (a.scale(1e-10), b.scale(1e-10));
            let sum = elastic_stress(&a.add(&b), 1e10, 0.3).unwrap();
            let parts = elastic_stress(&a, 1e10, 0.3).unwrap().add(&elastic_stress(&b, 1e10, 0.3).unwrap());
            prop_assert!(sum.sub(&parts).max_abs() <= 1e-9 * sum.max_abs().max(1e-12));
        }

        #[test]
        fn alpha_increasing(p1 in 0.0..1.5f64, p2 in 0.0..1.5f64) {
            prop_assume!((p1 - p2).abs() > 1e-9);
            let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(dp_constants(0.0, lo).0 < dp_constants(0.0, hi).0);
        }
    }
}
