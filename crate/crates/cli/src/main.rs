use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tidecal::analytic::{attenuation_q, finite_aquifer_response, semi_infinite_response, HarmonicBoundary};
use tidecal::calibrate::{
    calibrate, read_sensor_dir, synthesize, targets_from_series, write_sensor_dir, Bounds, CalibrateError,
    CalibrationProblem, Parameterization, RefineOptions, TRAINING_WINDOW_S,
};
use tidecal::flow::{read_vtk, simulate, write_vtk, Mode, SimOptions};
use tidecal::live::{run_watch, WatchConfig};
use tidecal::signal::{extract_features_with, parse_time as parse_time_iso, parse_sensor_csv, write_sensor_csv, FeatureOptions};
use tidecal::stability::{stability_field, StabilityParams};
use tidecal::{DikeModel, TimeSeries, Unit, TIDAL_PERIOD_S};

/// Marks failures caused by bad input or configuration (exit code 2).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "tidecal", version, about = "Tidal pore pressure in earthen dikes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AnalyticMode {
    Semi,
    Finite,
    Q,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Richards,
    Saturated,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Richards => Mode::Richards,
            ModeArg::Saturated => Mode::Saturated,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form 1D responses as a CSV profile.
    Analytic {
        #[arg(long, value_enum)]
        mode: AnalyticMode,
        /// Diffusivity [m²/s].
        #[arg(long)]
        d: f64,
        /// Aquifer length for `finite` [m].
        #[arg(long = "L")]
        length: Option<f64>,
        /// Positions [m]; defaults to a sweep over the aquifer.
        #[arg(long, value_delimiter = ',')]
        x: Vec<f64>,
        /// Sweep spacing when `--x` is omitted [m].
        #[arg(long, default_value_t = 5.0)]
        dx: f64,
        /// Period [s]; for `q` the slow period.
        #[arg(long = "period-s", default_value_t = TIDAL_PERIOD_S)]
        period_s: f64,
        /// Driving amplitude [Pa].
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
    },
    /// Relative amplitude and delay of a pressure record against the tide.
    Features {
        #[arg(long)]
        pressure: PathBuf,
        #[arg(long)]
        tide: PathBuf,
        #[arg(long = "period-s", default_value_t = TIDAL_PERIOD_S)]
        period_s: f64,
        #[arg(long)]
        air: Option<PathBuf>,
        #[arg(long)]
        smooth: bool,
    },
    /// Transient flow run writing one probe CSV per sensor.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tide: PathBuf,
        #[arg(long)]
        land: PathBuf,
        /// Start time, ISO-8601 or epoch seconds; defaults to the tide start.
        #[arg(long)]
        t0: Option<String>,
        #[arg(long)]
        t1: Option<String>,
        #[arg(long, default_value_t = 600.0)]
        dt: f64,
        #[arg(long, value_enum, default_value = "saturated")]
        mode: ModeArg,
        #[arg(long, default_value_t = 18.0)]
        temperature: f64,
        /// Write a VTK snapshot every N output steps.
        #[arg(long)]
        snapshots: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drucker-Prager screening of a pressure snapshot.
    Stability {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "pressure-snapshot")]
        pressure_snapshot: PathBuf,
        /// Cohesion [Pa].
        #[arg(long, default_value_t = 0.0)]
        c: f64,
        /// Friction angle [degrees].
        #[arg(long, default_value_t = 30.0)]
        phi: f64,
        /// Soil density [kg/m³].
        #[arg(long, default_value_t = 2000.0)]
        density: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits zone diffusivities to sensor features.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tide: PathBuf,
        /// Directory of `<sensor id>.csv` records.
        #[arg(long)]
        sensors: PathBuf,
        #[arg(long, default_value_t = 200)]
        budget: usize,
        /// Land level CSV; defaults to the mean sea level.
        #[arg(long)]
        land: Option<PathBuf>,
        /// Fit one diffusivity for all zones instead of the layered model.
        #[arg(long)]
        homogeneous: bool,
        #[arg(long, default_value_t = 18.0)]
        temperature: f64,
        /// Start from the middle of the bounds instead of the analytic guess.
        #[arg(long)]
        midpoint: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated sensor records with Gaussian noise.
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tide: PathBuf,
        #[arg(long)]
        land: Option<PathBuf>,
        #[arg(long = "noise-mbar", default_value_t = 0.0)]
        noise_mbar: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 600.0)]
        dt: f64,
        #[arg(long, default_value_t = 18.0)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Watches a directory for sea-level files until interrupted.
    Watch {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<DikeModel> {
    DikeModel::from_json(&read(path)?).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn load_series(path: &Path) -> Result<TimeSeries> {
    let bytes = std::fs::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    parse_sensor_csv(&bytes).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn parse_time(s: &str) -> Result<f64> {
    if let Ok(v) = s.parse::<f64>() {
        return Ok(v);
    }
    parse_time_iso(s).ok_or_else(|| config_err(format!("time `{s}` is neither seconds nor ISO-8601")))
}

fn span_of(s: &TimeSeries) -> Result<(f64, f64)> {
    match (s.start(), s.end()) {
        (Some(a), Some(b)) if b > a => Ok((a, b)),
        _ => Err(config_err("tide record is empty")),
    }
}

fn analytic(
    mode: AnalyticMode,
    d: f64,
    length: Option<f64>,
    xs: Vec<f64>,
    dx: f64,
    period: f64,
    amplitude: f64,
) -> Result<String> {
    if !(dx > 0.0) {
        return Err(config_err("--dx must be positive"));
    }
    let extent = length.unwrap_or(120.0);
    let xs = if xs.is_empty() {
        let n = (extent / dx).floor() as usize;
        (0..=n).map(|k| k as f64 * dx).collect()
    } else {
        xs
    };
    let bc = HarmonicBoundary::from_period(amplitude, period);
    let mut out = String::new();
    match mode {
        AnalyticMode::Q => {
            out.push_str("x,q\n");
            for x in xs {
                let q = attenuation_q(x, d, period).map_err(|e| config_err(e.to_string()))?;
                writeln!(out, "{x},{q}")?;
            }
        }
        AnalyticMode::Semi | AnalyticMode::Finite => {
            out.push_str("x,amplitude_ratio,delay_min\n");
            for x in xs {
                let r = match mode {
                    AnalyticMode::Semi => semi_infinite_response(x, d, &bc),
                    _ => {
                        let l = length.ok_or_else(|| config_err("--L is required for finite mode"))?;
                        finite_aquifer_response(x, d, l, &bc)
                    }
                }
                .map_err(|e| config_err(e.to_string()))?;
                let ratio = if amplitude > 0.0 { r.amplitude / amplitude } else { 0.0 };
                writeln!(out, "{x},{ratio},{}", r.delay / 60.0)?;
            }
        }
    }
    Ok(out)
}

fn features(pressure: &Path, tide: &Path, period: f64, air: Option<&Path>, smooth: bool) -> Result<String> {
    let p = load_series(pressure)?;
    let h = load_series(tide)?;
    let air = air.map(load_series).transpose()?;
    let model_fluid = tidecal::FluidProperties::default();
    let opts = FeatureOptions { smooth, air };
    let f = extract_features_with(&p, &h, &model_fluid, period, &opts)?;
    let per_cycle: Vec<_> = f
        .per_cycle
        .iter()
        .map(|c| json!({"relative_amplitude": c.relative_amplitude, "delay_minutes": c.delay / 60.0}))
        .collect();
    Ok(serde_json::to_string_pretty(&json!({
        "relative_amplitude": f.mean.relative_amplitude,
        "delay_minutes": f.mean.delay / 60.0,
        "per_cycle": per_cycle,
    }))?)
}

#[allow(clippy::too_many_arguments)]
fn run_simulate(
    model: &Path,
    tide: &Path,
    land: &Path,
    t0: Option<&str>,
    t1: Option<&str>,
    dt: f64,
    mode: Mode,
    temperature: f64,
    snapshots: Option<usize>,
    out: &Path,
) -> Result<()> {
    let model = load_model(model)?;
    let tide = load_series(tide)?;
    let land = load_series(land)?;
    let (a, b) = span_of(&tide)?;
    let t0 = t0.map(parse_time).transpose()?.unwrap_or(a);
    let t1 = t1.map(parse_time).transpose()?.unwrap_or(b);
    if !(dt > 0.0) {
        return Err(config_err("--dt must be positive"));
    }
    let opts = SimOptions { dt, mode, temperature_c: temperature, snapshot_every: snapshots, ..Default::default() };
    let res = simulate(&model, &tide, &land, (t0, t1), &opts)?;
    for w in &res.warnings {
        log::warn!("{w}");
    }
    std::fs::create_dir_all(out)?;
    for (id, s) in &res.probes {
        std::fs::write(out.join(format!("{id}.csv")), write_sensor_csv(s))?;
    }
    for (k, s) in res.snapshots.iter().enumerate() {
        std::fs::write(out.join(format!("snapshot_{k:04}.vtk")), write_vtk(s))?;
    }
    log::info!("{} probes, {} snapshots written to {}", res.probes.len(), res.snapshots.len(), out.display());
    Ok(())
}

fn run_stability(model: &Path, snapshot: &Path, params: &StabilityParams, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let snap = read_vtk(&read(snapshot)?).map_err(|e| config_err(format!("{}: {e}", snapshot.display())))?;
    let mut points = Vec::new();
    for j in 0..snap.ny {
        for i in 0..snap.nx {
            if let Some(p) = snap.value_at(i, j) {
                let x = snap.origin[0] + i as f64 * snap.spacing[0];
                let y = snap.origin[1] + j as f64 * snap.spacing[1];
                points.push((x, y, p));
            }
        }
    }
    let field = stability_field(&model, &points, params)?;
    let mut text = String::from("x,y,F_Pa,flagged\n");
    for c in &field {
        writeln!(text, "{},{},{},{}", c.x, c.y, c.yield_value, c.flagged)?;
    }
    std::fs::write(out, text)?;
    let flagged = field.iter().filter(|c| c.flagged).count();
    log::info!("{flagged} of {} cells at or beyond yield", field.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_calibrate(
    model: &Path,
    tide: &Path,
    sensors: &Path,
    budget: usize,
    land: Option<&Path>,
    homogeneous: bool,
    temperature: f64,
    midpoint: bool,
    out: &Path,
) -> Result<bool> {
    let model = load_model(model)?;
    let tide = load_series(tide)?;
    let (a, b) = span_of(&tide)?;
    let land = match land {
        Some(p) => load_series(p)?,
        None => TimeSeries::new(vec![a, b], vec![0.0, 0.0], Unit::CmWater)?,
    };
    let records = read_sensor_dir(sensors).map_err(|e| config_err(e.to_string()))?;
    let records: Vec<_> = records.into_iter().filter(|(id, _)| model.sensor(id).is_some()).collect();
    if records.is_empty() {
        return Err(config_err(format!("no records in {} match the model's sensors", sensors.display())));
    }
    let end = records.iter().filter_map(|(_, s)| s.end()).fold(b, f64::min);
    let window = ((end - TRAINING_WINDOW_S).max(a), end);
    let targets = targets_from_series(&records, &tide, window, &model.fluid, TIDAL_PERIOD_S)?;
    let problem = CalibrationProblem {
        parameterization: if homogeneous { Parameterization::Homogeneous } else { Parameterization::layered() },
        template: model,
        targets,
        bounds: Bounds::default(),
        tide,
        land,
        window,
        sim: SimOptions { temperature_c: temperature, ..Default::default() },
        period: TIDAL_PERIOD_S,
    };
    problem.validate().map_err(|e| config_err(e.to_string()))?;
    let opts = RefineOptions { budget, midpoint_start: midpoint, ..Default::default() };
    let (result, status) = match calibrate(&problem, &opts) {
        Ok(r) => (r, "converged"),
        Err(CalibrateError::BudgetExhausted(r)) => (*r, "budget_exhausted"),
        Err(CalibrateError::Invalid(m)) => return Err(config_err(m)),
        Err(e) => return Err(e.into()),
    };
    let mut doc = serde_json::to_value(&result)?;
    doc["status"] = json!(status);
    std::fs::write(out, serde_json::to_string_pretty(&doc)?)?;
    for r in &result.residuals {
        log::info!("{}: amplitude error {:+.2}%, delay error {:+.1} min", r.id, 100.0 * r.amplitude_error, r.delay_error / 60.0);
    }
    log::info!("{status} after {} runs", result.runs);
    Ok(result.converged)
}

#[allow(clippy::too_many_arguments)]
fn run_synth(
    model: &Path,
    tide: &Path,
    land: Option<&Path>,
    noise_mbar: f64,
    seed: u64,
    dt: f64,
    temperature: f64,
    out: &Path,
) -> Result<()> {
    let model = load_model(model)?;
    let tide = load_series(tide)?;
    let (a, b) = span_of(&tide)?;
    let land = match land {
        Some(p) => load_series(p)?,
        None => TimeSeries::new(vec![a, b], vec![0.0, 0.0], Unit::CmWater)?,
    };
    if !(noise_mbar >= 0.0) {
        return Err(config_err("--noise-mbar must be non-negative"));
    }
    let opts = SimOptions { dt, temperature_c: temperature, ..Default::default() };
    let series = synthesize(&model, &tide, &land, (a, b), &opts, noise_mbar * 100.0, seed)?;
    let files = write_sensor_dir(out, &series)?;
    log::info!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn run_watch_cmd(config: &Path) -> Result<()> {
    let cfg = WatchConfig::from_json(&read(config)?).map_err(|e| config_err(e.to_string()))?;
    cfg.load_model().map_err(|e| config_err(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    run_watch(&cfg, &stop)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Analytic { mode, d, length, x, dx, period_s, amplitude } => {
            print!("{}", analytic(mode, d, length, x, dx, period_s, amplitude)?);
        }
        Command::Features { pressure, tide, period_s, air, smooth } => {
            println!("{}", features(&pressure, &tide, period_s, air.as_deref(), smooth)?);
        }
        Command::Simulate { model, tide, land, t0, t1, dt, mode, temperature, snapshots, out } => {
            run_simulate(&model, &tide, &land, t0.as_deref(), t1.as_deref(), dt, mode.into(), temperature, snapshots, &out)?;
        }
        Command::Stability { model, pressure_snapshot, c, phi, density, out } => {
            if !(0.0..90.0).contains(&phi) || c < 0.0 {
                bail!(config_err("need 0 ≤ phi < 90 degrees and c ≥ 0"));
            }
            let params = StabilityParams { cohesion: c, friction: phi.to_radians(), density, k0: None };
            run_stability(&model, &pressure_snapshot, &params, &out)?;
        }
        Command::Calibrate { model, tide, sensors, budget, land, homogeneous, temperature, midpoint, out } => {
            return run_calibrate(&model, &tide, &sensors, budget, land.as_deref(), homogeneous, temperature, midpoint, &out);
        }
        Command::Synth { model, tide, land, noise_mbar, seed, dt, temperature, out } => {
            run_synth(&model, &tide, land.as_deref(), noise_mbar, seed, dt, temperature, &out)?;
        }
        Command::Watch { config } => run_watch_cmd(&config)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TIDECAL_LOG", "info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
