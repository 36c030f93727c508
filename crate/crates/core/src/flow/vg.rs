//! Van Genuchten retention and conductivity relations.
//!
//! Capacity is returned per pascal, i.e. the head-based expression divided by `ρg`.

use crate::model::VanGenuchtenParams;
use crate::units::FluidProperties;

pub fn vg_effective_saturation(p: f64, vg: &VanGenuchtenParams, fluid: &FluidProperties) -> f64 {
    if p >= 0.0 {
        return 1.0;
    }
    let u = (vg.a * (p / fluid.rho_g()).abs()).powf(vg.n);
    (1.0 + u).powf(-vg.m())
}

pub fn vg_relative_permeability(theta_e: f64, vg: &VanGenuchtenParams) -> f64 {
    if theta_e >= 1.0 {
        return 1.0;
    }
    if theta_e <= 0.0 {
        return 0.0;
    }
    let m = vg.m();
    let inner = 1.0 - (1.0 - theta_e.powf(1.0 / m)).powf(m);
    theta_e.powf(vg.l) * inner * inner
}

/// Specific moisture capacity dθ/dp [1/Pa].
pub fn vg_capacity(p: f64, vg: &VanGenuchtenParams, fluid: &FluidProperties) -> f64 {
    if p >= 0.0 {
        return 0.0;
    }
    let m = vg.m();
    let te = vg_effective_saturation(p, vg, fluid);
    let s = te.powf(1.0 / m);
    vg.a * m / (1.0 - m) * (vg.theta_s - vg.theta_r) * s * (1.0 - s).powf(m) / fluid.rho_g()
}

/// Relative permeability as a function of pressure.
pub fn vg_kr(p: f64, vg: &VanGenuchtenParams, fluid: &FluidProperties) -> f64 {
    vg_relative_permeability(vg_effective_saturation(p, vg, fluid), vg)
}

/// Relative permeability with an air-entry suction `h_e` [m]: `k_r = 1` for
/// suction below `h_e`, and the Mualem integral rescaled to reach 1 at `h_e`
/// otherwise. Removes the infinite slope at saturation for `n < 2`;
/// `h_e = 0` gives [`vg_kr`].
pub fn vg_kr_air_entry(p: f64, vg: &VanGenuchtenParams, fluid: &FluidProperties, h_e: f64) -> f64 {
    if h_e <= 0.0 {
        return vg_kr(p, vg, fluid);
    }
    let h = -p / fluid.rho_g();
    if h <= h_e {
        return 1.0;
    }
    let m = vg.m();
    let sc = (1.0 + (vg.a * h_e).powf(vg.n)).powf(-m);
    let te = vg_effective_saturation(p, vg, fluid);
    let f = |s: f64| 1.0 - (1.0 - s.powf(1.0 / m)).powf(m);
    let ratio = f(te) / f(sc);
    (te / sc).powf(vg.l) * ratio * ratio
}
