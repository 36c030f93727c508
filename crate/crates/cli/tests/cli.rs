use std::path::Path;
use std::process::{Command, Output};

use tidecal::calibrate::twin_forcing;
use tidecal::model::Sensor;
use tidecal::signal::write_sensor_csv;
use tidecal::{DikeModel, FluidProperties, TimeSeries, Unit, TIDAL_PERIOD_S as T};

fn tidecal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tidecal")).args(args).env("TIDECAL_LOG", "warn").output().expect("run tidecal")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn strip_model(dir: &Path) -> std::path::PathBuf {
    let m = DikeModel::strip(120.0, -10.0, -2.0, 1e-3, FluidProperties::default())
        .with_sensors(vec![Sensor::new("P40", 40.0, -6.0)]);
    let path = dir.join("model.json");
    std::fs::write(&path, m.to_json()).unwrap();
    path
}

fn write_series(path: &Path, s: &TimeSeries) {
    std::fs::write(path, write_sensor_csv(s)).unwrap();
}

#[test]
fn analytic_profiles() {
    let o = tidecal(&["analytic", "--mode", "semi", "--d", "1", "--x", "0,80"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,amplitude_ratio,delay_min"));
    let row: Vec<f64> = lines.nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 80.0);
    assert!((row[1] - 0.511).abs() < 1e-3, "{row:?}");

    let o = tidecal(&["analytic", "--mode", "q", "--d", "0.1", "--x", "95", "--period-s", "172800"]);
    let text = stdout(&o);
    let q: f64 = text.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((q - 0.28).abs() < 0.005);

    let o = tidecal(&["analytic", "--mode", "finite", "--d", "1", "--x", "10"]);
    assert_eq!(o.status.code(), Some(2), "finite mode without --L");
}

#[test]
fn bad_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("watch.json");
    std::fs::write(&cfg, "{\"input_dir\": \"in\", \"bogus\": 1}").unwrap();
    assert_eq!(tidecal(&["watch", "--config", p(&cfg)]).status.code(), Some(2));
    assert_eq!(tidecal(&["watch", "--config", p(&dir.path().join("missing.json"))]).status.code(), Some(2));

    let text = format!(
        "{{\"input_dir\": \"{0}/in\", \"output_dir\": \"{0}/out\", \"model\": \"{0}/nope.json\", \"state\": \"{0}/s.json\", \"land\": {{\"q\": 0.2}}}}",
        p(dir.path())
    );
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(tidecal(&["watch", "--config", p(&cfg)]).status.code(), Some(2));

    let model = dir.path().join("model.json");
    std::fs::write(&model, "{\"geometry\": 3}").unwrap();
    let tide = dir.path().join("tide.csv");
    write_series(&tide, &TimeSeries::sample(0.0, T, 600.0, Unit::CmWater, |_| 0.0));
    let o = tidecal(&["simulate", "--model", p(&model), "--tide", p(&tide), "--land", p(&tide), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_features_and_stability() {
    let dir = tempfile::tempdir().unwrap();
    let model = strip_model(dir.path());
    let tide = dir.path().join("tide.csv");
    let land = dir.path().join("land.csv");
    write_series(&tide, &TimeSeries::sample(0.0, 4.0 * T, 300.0, Unit::CmWater, |t| 100.0 * (2.0 * std::f64::consts::PI * t / T).sin()));
    write_series(&land, &TimeSeries::new(vec![0.0, 4.0 * T], vec![0.0, 0.0], Unit::CmWater).unwrap());
    let out = dir.path().join("run");
    let o = tidecal(&[
        "simulate", "--model", p(&model), "--tide", p(&tide), "--land", p(&land), "--dt", "600", "--snapshots", "40", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let probe = out.join("P40.csv");
    assert!(probe.exists());
    assert!(out.join("snapshot_0000.vtk").exists());

    let o = tidecal(&["features", "--pressure", p(&probe), "--tide", p(&tide)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let a = v["relative_amplitude"].as_f64().unwrap();
    assert!(a > 0.0 && a < 1.0, "{v}");
    assert!(v["per_cycle"].as_array().is_some_and(|c| !c.is_empty()));

    let csv = dir.path().join("stability.csv");
    let o = tidecal(&[
        "stability", "--model", p(&model), "--pressure-snapshot", p(&out.join("snapshot_0000.vtk")), "--c", "5000", "--out", p(&csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("x,y,F_Pa,flagged\n"));
    assert!(text.lines().count() > 100);

    let o = tidecal(&["stability", "--model", p(&model), "--pressure-snapshot", p(&probe), "--out", p(&csv)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_then_calibrate_homogeneous() {
    let dir = tempfile::tempdir().unwrap();
    let model = strip_model(dir.path());
    let (tide_s, land_s, _) = twin_forcing(1.0, 0.0);
    let tide = dir.path().join("tide.csv");
    let land = dir.path().join("land.csv");
    write_series(&tide, &tide_s);
    write_series(&land, &land_s);
    let sensors = dir.path().join("sensors");
    let o = tidecal(&[
        "synth", "--model", p(&model), "--tide", p(&tide), "--land", p(&land), "--noise-mbar", "0.5", "--seed", "3", "--out", p(&sensors),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(sensors.join("P40.csv")).unwrap();

    let again = dir.path().join("again");
    tidecal(&[
        "synth", "--model", p(&model), "--tide", p(&tide), "--land", p(&land), "--noise-mbar", "0.5", "--seed", "3", "--out", p(&again),
    ]);
    assert_eq!(std::fs::read(again.join("P40.csv")).unwrap(), first);

    let result = dir.path().join("fit.json");
    let o = tidecal(&[
        "calibrate", "--model", p(&model), "--tide", p(&tide), "--land", p(&land), "--sensors", p(&sensors), "--homogeneous",
        "--budget", "20", "--out", p(&result),
    ]);
    let code = o.status.code();
    assert!(code == Some(0) || code == Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&result).unwrap()).unwrap();
    assert!(v["runs"].as_u64().unwrap() <= 20);
    let status = v["status"].as_str().unwrap();
    assert_eq!(code == Some(0), status == "converged", "{status}");
    if code == Some(0) {
        let d = v["fitted"][0].as_f64().unwrap();
        assert!((d / 1e-3 - 1.0).abs() < 0.2, "{d}");
    }

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = tidecal(&["calibrate", "--model", p(&model), "--tide", p(&tide), "--sensors", p(&empty), "--out", p(&result)]);
    assert_eq!(o.status.code(), Some(2));
}
