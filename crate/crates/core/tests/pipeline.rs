use tidecal::calibrate::{
    layered_model, synthesize, targets_from_series, twin_forcing, Bounds, CalibrationProblem, Parameterization,
    SLICE_SPLIT_Y, TWIN_TRUTH,
};
use tidecal::flow::{
    constant_level, harmonic_tide, steady_harmonic_features, GridSpec, HarmonicRunOptions, SimOptions,
};
use tidecal::model::DOMAIN_X;
use tidecal::signal::HarmonicFeature;
use tidecal::{DikeModel, FluidProperties, TIDAL_PERIOD_S as T};

fn reference_features(grid: GridSpec, spinup: f64) -> Vec<(String, HarmonicFeature)> {
    let m = DikeModel::reference(1e-3, FluidProperties::default());
    let sim = SimOptions { dt: 600.0, grid, ..Default::default() };
    let mut opts = HarmonicRunOptions::new(sim, 0.0, 2.0);
    opts.spinup_periods = spinup;
    opts.t_span.1 = (spinup + 2.0) * T;
    let tide = harmonic_tide(0.0, opts.t_span.1, 300.0, 1.29, T, 0.0);
    let land = constant_level(0.0, opts.t_span.1, 0.0);
    steady_harmonic_features(&m, &tide, &land, &opts).unwrap()
}

fn assert_close(a: &[(String, HarmonicFeature)], b: &[(String, HarmonicFeature)], amp: f64, delay: f64) {
    for ((id, fa), (_, fb)) in a.iter().zip(b) {
        let da = (fa.relative_amplitude / fb.relative_amplitude - 1.0).abs();
        let dd = (fa.delay - fb.delay).abs();
        assert!(da <= amp && dd <= delay, "{id}: {fa:?} vs {fb:?}");
    }
}

#[test]
fn features_independent_of_longer_spinup() {
    let short = reference_features(GridSpec::default(), 5.0);
    let long = reference_features(GridSpec::default(), 8.0);
    assert_eq!(short.len(), 3);
    assert_close(&short, &long, 2e-3, 30.0);
}

#[test]
fn features_converge_under_grid_refinement() {
    let coarse = reference_features(GridSpec { dx: 2.0, dy: 0.5 }, 5.0);
    let fine = reference_features(GridSpec::default(), 5.0);
    assert_close(&coarse, &fine, 0.02, 180.0);
}

#[test]
fn layered_features_vary_continuously_with_interface() {
    let template = DikeModel::reference(1e-3, FluidProperties::default());
    let truth = layered_model(&template, &TWIN_TRUTH, SLICE_SPLIT_Y, DOMAIN_X.0).unwrap();
    let sim = SimOptions { dt: 600.0, ..Default::default() };
    let (tide, land, window) = twin_forcing(1.29, 0.0);
    let series = synthesize(&truth, &tide, &land, (0.0, window.1), &sim, 0.0, 1).unwrap();
    let targets = targets_from_series(&series, &tide, window, &truth.fluid, T).unwrap();
    let problem = CalibrationProblem {
        template,
        parameterization: Parameterization::layered(),
        targets,
        bounds: Bounds::default(),
        tide,
        land,
        window,
        sim,
        period: T,
    };
    // both the interface and the land edge pass a cell centre at +0.5 m
    let at = |shift: f64| {
        let mut p = TWIN_TRUTH.to_vec();
        p[4] += shift;
        problem.features(&p).unwrap()
    };
    let (below, above) = (at(0.5 - 1e-4), at(0.5 + 1e-4));
    for (i, (a, b)) in below.iter().zip(&above).enumerate() {
        let da = (a.relative_amplitude / b.relative_amplitude - 1.0).abs();
        assert!(da <= 3e-4 && (a.delay - b.delay).abs() <= 2.0, "sensor {i}: {a:?} vs {b:?}");
    }
}
