//! Watch-directory mode: sea-level files in, virtual sensor series out.
//!
//! Inputs are `sealevel_<epoch-seconds>.csv` files with `ISO8601,<level_cm>`
//! rows. Each scan processes new files in name order, advances the flow
//! solution to the newest sample and appends to `virtual_<id>.csv`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{land_boundary_with, Averaging, DAY_S};
use crate::flow::{FlowError, Forcing, Mode, SimOptions, Simulator, SolverState};
use crate::model::{DikeModel, ModelError};
use crate::signal::{format_time, parse_time, CSV_HEADER};
use crate::units::{TimeSeries, Unit};

pub const STATE_SCHEMA: &str = "tidecal-warm-1";

/// Gaps longer than this restart the spin-up flag [s].
pub const MAX_GAP_S: f64 = 2.0 * 3600.0;

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("config: {0}")]
    Config(String),
    #[error("{file}: {reason}")]
    MalformedInput { file: String, reason: String },
    #[error("{file}: sample at {t} not after committed time {committed}")]
    ClockRegression { file: String, t: f64, committed: f64 },
    #[error("state file: {0}")]
    State(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> LiveError + '_ {
    move |source| LiveError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandRule {
    pub q: f64,
    #[serde(default = "default_window")]
    pub window_s: f64,
}

fn default_window() -> f64 {
    DAY_S
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatchConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_poll")]
    pub poll_interval_s: f64,
    pub model: PathBuf,
    pub state: PathBuf,
    pub land: LandRule,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Longest solver step [s].
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_temperature")]
    pub temperature_c: f64,
}

fn default_poll() -> f64 {
    60.0
}
fn default_mode() -> Mode {
    Mode::Saturated
}
fn default_dt() -> f64 {
    600.0
}
fn default_temperature() -> f64 {
    18.0
}

impl WatchConfig {
    pub fn from_json(text: &str) -> Result<Self, LiveError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| LiveError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LiveError> {
        if !(self.poll_interval_s > 0.0 && self.poll_interval_s.is_finite()) {
            return Err(LiveError::Config("poll interval must be positive".into()));
        }
        if self.input_dir == self.output_dir {
            return Err(LiveError::Config("input and output directories must differ".into()));
        }
        if !(0.0..=1.0).contains(&self.land.q) || !(self.land.window_s > 0.0) {
            return Err(LiveError::Config(format!("land rule {:?}", self.land)));
        }
        if !(self.dt > 0.0) {
            return Err(LiveError::Config("dt must be positive".into()));
        }
        Ok(())
    }

    fn sim_options(&self) -> SimOptions {
        SimOptions { dt: self.dt, mode: self.mode, temperature_c: self.temperature_c, ..Default::default() }
    }

    pub fn load_model(&self) -> Result<DikeModel, LiveError> {
        let text = std::fs::read_to_string(&self.model).map_err(io(&self.model))?;
        Ok(DikeModel::from_json(&text)?)
    }
}

/// Everything needed to resume without re-simulating committed time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WarmState {
    pub schema: String,
    pub solver: Option<SolverState>,
    /// Start of the continuous stretch (no gap above [`MAX_GAP_S`]) that
    /// contains the first retained tide sample.
    pub stretch_start: Option<f64>,
    /// Recent sea level `(t, cm)`, trimmed to what the land rule needs.
    pub tide: Vec<(f64, f64)>,
    /// Names of processed input files.
    pub processed: BTreeSet<String>,
}

impl WarmState {
    pub fn fresh() -> Self {
        Self { schema: STATE_SCHEMA.into(), ..Default::default() }
    }

    pub fn committed(&self) -> Option<f64> {
        self.solver.as_ref().map(|s| s.t)
    }

    pub fn load(path: &Path) -> Result<Self, LiveError> {
        if !path.exists() {
            return Ok(Self::fresh());
        }
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| LiveError::State(e.to_string()))?;
        if s.schema != STATE_SCHEMA {
            return Err(LiveError::State(format!("schema `{}`, expected `{STATE_SCHEMA}`", s.schema)));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), LiveError> {
        let text = serde_json::to_string(self).map_err(|e| LiveError::State(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), LiveError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io(path))
}

/// Parses a sea-level input file; the name must be `sealevel_<epoch>.csv`.
pub fn parse_input(name: &str, text: &str) -> Result<Vec<(f64, f64)>, String> {
    let stem = name
        .strip_prefix("sealevel_")
        .and_then(|s| s.strip_suffix(".csv"))
        .ok_or("name is not sealevel_<epoch-seconds>.csv")?;
    stem.parse::<u64>().map_err(|_| "name does not carry epoch seconds")?;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (k == 0 && line.starts_with("time")) {
            continue;
        }
        let (t, v) = line.split_once(',').ok_or_else(|| format!("line {}: expected time,level", k + 1))?;
        let t = parse_time(t).ok_or_else(|| format!("line {}: bad timestamp", k + 1))?;
        let v: f64 = v.trim().parse().map_err(|_| format!("line {}: bad level", k + 1))?;
        if !v.is_finite() {
            return Err(format!("line {}: level not finite", k + 1));
        }
        if out.last().is_some_and(|&(p, _)| t <= p) {
            return Err(format!("line {}: time not increasing", k + 1));
        }
        out.push((t, v));
    }
    if out.is_empty() {
        return Err("no samples".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub processed: Vec<String>,
    pub rejected: Vec<(String, String)>,
    /// Rows appended per sensor file.
    pub rows: usize,
}

fn move_into(file: &Path, sub: &str) -> Result<(), LiveError> {
    let dir = file.parent().unwrap_or(Path::new(".")).join(sub);
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let dest = dir.join(file.file_name().unwrap_or_default());
    std::fs::rename(file, &dest).map_err(io(&dest))
}

fn list_inputs(dir: &Path) -> Result<Vec<PathBuf>, LiveError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.path())
        .filter(|p| !p.file_name().unwrap_or_default().to_string_lossy().starts_with('.'))
        .collect();
    files.sort();
    Ok(files)
}

/// Start of the continuous stretch at each sample.
fn stretches(tide: &[(f64, f64)], first: f64) -> Vec<f64> {
    let mut current = first;
    let mut out = Vec::with_capacity(tide.len());
    for (k, &(t, _)) in tide.iter().enumerate() {
        if k > 0 && t - tide[k - 1].0 > MAX_GAP_S {
            current = t;
        }
        out.push(current);
    }
    out
}

/// Land level in cm at each history sample: `q` times the trailing mean once
/// a full window of the current stretch exists, the mean sea level before.
/// Depends only on samples up to each time, so batching does not matter.
fn land_series(tide: &TimeSeries, rule: &LandRule, stretch: &[f64]) -> TimeSeries {
    let averaged = land_boundary_with(tide, rule.q, rule.window_s, Averaging::Trailing).ok();
    let vals = tide
        .timestamps()
        .iter()
        .zip(stretch)
        .enumerate()
        .map(|(k, (&t, &s))| match &averaged {
            Some(a) if t - s >= rule.window_s => a.values()[k],
            _ => 0.0,
        })
        .collect();
    tide.with_values(vals)
}

/// Appends `(t, line)` rows newer than the file's last row; returns the
/// count written.
fn append_lines(path: &Path, header: &str, rows: &[(f64, String)]) -> Result<usize, LiveError> {
    let mut text = if path.exists() {
        std::fs::read_to_string(path).map_err(io(path))?
    } else {
        format!("{header}\n")
    };
    let last = text.lines().skip(1).filter_map(|l| parse_time(l.split(',').next()?)).last();
    let fresh: Vec<&(f64, String)> = rows.iter().filter(|(t, _)| last.is_none_or(|l| *t > l + 1e-6)).collect();
    if fresh.is_empty() {
        return Ok(0);
    }
    if !text.ends_with('\n') {
        text.push('\n');
    }
    for (_, line) in &fresh {
        text.push_str(line);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(fresh.len())
}

/// One scan of the input directory.
pub fn ingest_once(cfg: &WatchConfig, model: &DikeModel, state: WarmState) -> Result<(WarmState, IngestReport), LiveError> {
    let mut state = state;
    let mut report = IngestReport::default();
    let done_dir = cfg.input_dir.join("done");
    let mut accepted: Vec<(PathBuf, Vec<(f64, f64)>)> = Vec::new();
    let mut last_t = state.tide.last().map(|s| s.0).or(state.committed());
    for path in list_inputs(&cfg.input_dir)? {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if state.processed.contains(&name) {
            // finish a move interrupted by a crash, otherwise a re-drop
            if done_dir.join(&name).exists() {
                log::warn!("{name}: already processed, rejecting duplicate");
                move_into(&path, "rejected")?;
                report.rejected.push((name, "duplicate".into()));
            } else {
                move_into(&path, "done")?;
            }
            continue;
        }
        let text = std::fs::read_to_string(&path);
        let parsed = match text {
            Ok(t) => parse_input(&name, &t),
            Err(e) => Err(e.to_string()),
        };
        let outcome = parsed.and_then(|samples| match last_t {
            Some(l) if samples[0].0 <= l => {
                Err(LiveError::ClockRegression { file: name.clone(), t: samples[0].0, committed: l }.to_string())
            }
            _ => Ok(samples),
        });
        match outcome {
            Ok(samples) => {
                last_t = samples.last().map(|s| s.0);
                accepted.push((path, samples));
            }
            Err(reason) => {
                log::warn!("{name}: {reason}");
                move_into(&path, "rejected")?;
                report.rejected.push((name, reason));
            }
        }
    }
    if accepted.is_empty() {
        return Ok((state, report));
    }

    let new_samples: Vec<(f64, f64)> = accepted.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let opts = cfg.sim_options();
    let t_first = new_samples[0].0;
    let mut sim = Simulator::new(model, &opts, t_first)?;
    let fresh = state.solver.is_none();
    if let Some(s) = state.solver.take() {
        sim.restore(s)?;
    }
    let n_old = state.tide.len();
    state.tide.extend(new_samples.iter().copied());
    let stretch = stretches(&state.tide, *state.stretch_start.get_or_insert(t_first));
    let (ts, vs): (Vec<f64>, Vec<f64>) = state.tide.iter().copied().unzip();
    let tide = TimeSeries::new(ts, vs, Unit::CmWater).map_err(|e| LiveError::State(e.to_string()))?;
    let land = land_series(&tide, &cfg.land, &stretch);
    let forcing = Forcing { tide: &tide, land: &land };

    let ids: Vec<String> = model.sensors.iter().map(|s| s.id.clone()).collect();
    let mut rows: Vec<Vec<(f64, f64)>> = vec![Vec::new(); ids.len()];
    let mut status = Vec::new();
    for (k, &(t, _)) in new_samples.iter().enumerate() {
        if k > 0 || !fresh {
            while sim.time() < t - 1e-9 {
                let h = opts.dt.min(t - sim.time());
                sim.advance(h, &forcing)?;
            }
        }
        for (r, (_, v)) in rows.iter_mut().zip(sim.probe_values(&forcing)?) {
            r.push((t, v));
        }
        let spinup = t - stretch[n_old + k] < cfg.land.window_s;
        status.push((t, format!("{},{spinup}", format_time(t))));
    }

    std::fs::create_dir_all(&cfg.output_dir).map_err(io(&cfg.output_dir))?;
    for (id, r) in ids.iter().zip(&rows) {
        let lines: Vec<(f64, String)> = r
            .iter()
            .map(|&(t, v)| (t, format!("{},{},{}", format_time(t), v, Unit::Pa)))
            .collect();
        report.rows = append_lines(&cfg.output_dir.join(format!("virtual_{id}.csv")), CSV_HEADER, &lines)?;
    }
    append_lines(&cfg.output_dir.join("virtual_status.csv"), "time,spinup", &status)?;

    state.solver = Some(sim.state());
    trim_history(&mut state, cfg.land.window_s);
    for (path, _) in &accepted {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        state.processed.insert(name.clone());
        report.processed.push(name);
    }
    // commit the state before moving inputs so a crash cannot lose them
    state.save(&cfg.state)?;
    for (path, _) in &accepted {
        move_into(path, "done")?;
    }
    Ok((state, report))
}

fn trim_history(state: &mut WarmState, window: f64) {
    let Some(&(last, _)) = state.tide.last() else {
        return;
    };
    // keep one sample at or before the window start for interpolation
    let keep_from = state.tide.partition_point(|s| s.0 <= last - window - MAX_GAP_S).saturating_sub(1);
    if keep_from > 0 {
        let first = state.stretch_start.unwrap_or(state.tide[0].0);
        state.stretch_start = Some(stretches(&state.tide, first)[keep_from]);
        state.tide.drain(..keep_from);
    }
}

/// Polls until `stop` is set, then persists the warm state.
pub fn run_watch(cfg: &WatchConfig, stop: &AtomicBool) -> Result<(), LiveError> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    for dir in [&cfg.input_dir, &cfg.output_dir] {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut state = WarmState::load(&cfg.state)?;
    log::info!("watching {} (committed t = {:?})", cfg.input_dir.display(), state.committed());
    let poll = Duration::from_secs_f64(cfg.poll_interval_s);
    while !stop.load(Ordering::SeqCst) {
        let started = Instant::now();
        match ingest_once(cfg, &model, state.clone()) {
            Ok((next, report)) => {
                if !report.processed.is_empty() {
                    log::info!("processed {:?}, {} rows", report.processed, report.rows);
                }
                state = next;
            }
            Err(e) => log::error!("scan failed: {e}"),
        }
        while !stop.load(Ordering::SeqCst) && started.elapsed() < poll {
            std::thread::sleep(Duration::from_millis(20).min(poll));
        }
    }
    state.save(&cfg.state)?;
    log::info!("stopped; state saved to {}", cfg.state.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::FluidProperties;

    pub(crate) fn small_model() -> DikeModel {
        DikeModel::reference(1e-3, FluidProperties::default())
    }

    fn config(root: &Path) -> WatchConfig {
        let model = root.join("model.json");
        std::fs::write(&model, small_model().to_json()).unwrap();
        WatchConfig {
            input_dir: root.join("in"),
            output_dir: root.join("out"),
            poll_interval_s: 0.05,
            model,
            state: root.join("state.json"),
            land: LandRule { q: 0.25, window_s: DAY_S },
            mode: Mode::Saturated,
            dt: 600.0,
            temperature_c: 18.0,
        }
    }

    fn drop_file(dir: &Path, t0: u64, n: usize, step: u64) -> String {
        std::fs::create_dir_all(dir).unwrap();
        let name = format!("sealevel_{t0}.csv");
        let mut text = String::new();
        for k in 0..n {
            let t = t0 + k as u64 * step;
            let level = 120.0 * (2.0 * std::f64::consts::PI * t as f64 / 44_700.0).sin();
            text.push_str(&format!("{},{level}\n", format_time(t as f64)));
        }
        std::fs::write(dir.join(&name), text).unwrap();
        name
    }

    fn rows(path: &Path) -> Vec<String> {
        std::fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
    }

    #[test]
    fn parse_examples() {
        let ok = parse_input("sealevel_10.csv", "2010-01-09T05:00:00Z,12.5\n2010-01-09T05:10:00Z,13\n").unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok[1].0 - ok[0].0, 600.0);
        assert!(parse_input("level.csv", "2010-01-09T05:00:00Z,1").is_err());
        assert!(parse_input("sealevel_10.csv", "garbage").is_err());
        assert!(parse_input("sealevel_10.csv", "").is_err());
        assert!(parse_input("sealevel_10.csv", "2010-01-09T05:10:00Z,1\n2010-01-09T05:00:00Z,1").is_err());
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        assert!(cfg.validate().is_ok());
        cfg.poll_interval_s = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = config(dir.path());
        cfg.output_dir = cfg.input_dir.clone();
        assert!(cfg.validate().is_err());
        assert!(WatchConfig::from_json("{\"input_dir\": \"a\"}").is_err());
        let text = serde_json::to_string(&config(dir.path())).unwrap();
        assert_eq!(WatchConfig::from_json(&text).unwrap(), config(dir.path()));
    }

    #[test]
    fn ingest_examples() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let model = small_model();
        std::fs::create_dir_all(&cfg.input_dir).unwrap();

        let (state, report) = ingest_once(&cfg, &model, WarmState::fresh()).unwrap();
        assert_eq!(report, IngestReport::default());
        assert_eq!(state, WarmState::fresh());

        let name = drop_file(&cfg.input_dir, 1_263_013_200, 6, 600);
        let (state, report) = ingest_once(&cfg, &model, state).unwrap();
        assert_eq!(report.processed, vec![name.clone()]);
        assert!(cfg.input_dir.join("done").join(&name).exists());
        for id in ["E3", "E4", "G2"] {
            assert_eq!(rows(&cfg.output_dir.join(format!("virtual_{id}.csv"))).len(), 6);
        }
        assert!(rows(&cfg.output_dir.join("virtual_status.csv")).iter().all(|r| r.ends_with("true")));

        // the next file extends by its own sample count
        drop_file(&cfg.input_dir, 1_263_013_200 + 3600, 6, 600);
        let (state, _) = ingest_once(&cfg, &model, state).unwrap();
        assert_eq!(rows(&cfg.output_dir.join("virtual_E4.csv")).len(), 12);

        // re-drop of a processed name
        drop_file(&cfg.input_dir, 1_263_013_200, 6, 600);
        let (state2, report) = ingest_once(&cfg, &model, state.clone()).unwrap();
        assert_eq!(report.rejected.len(), 1);
        assert!(cfg.input_dir.join("rejected").join(&name).exists());
        assert_eq!(state2, state);

        // older than committed time, then garbage
        drop_file(&cfg.input_dir, 1_263_013_300, 2, 600);
        std::fs::write(cfg.input_dir.join("sealevel_1999999999.csv"), "nope\n").unwrap();
        let (_, report) = ingest_once(&cfg, &model, state).unwrap();
        assert_eq!(report.rejected.len(), 2);
        assert!(report.processed.is_empty());
        let left: Vec<_> = list_inputs(&cfg.input_dir).unwrap();
        assert!(left.is_empty(), "{left:?}");
    }

    #[test]
    fn state_roundtrip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        drop_file(&cfg.input_dir, 1_263_013_200, 4, 600);
        let (state, _) = ingest_once(&cfg, &small_model(), WarmState::fresh()).unwrap();
        assert_eq!(WarmState::load(&cfg.state).unwrap(), state);
        std::fs::write(&cfg.state, "{\"schema\": \"other\"}").unwrap();
        assert!(WarmState::load(&cfg.state).is_err());
        assert_eq!(WarmState::load(&dir.path().join("absent.json")).unwrap(), WarmState::fresh());
    }

    #[test]
    fn history_is_trimmed() {
        let mut s = WarmState::fresh();
        s.tide = (0..400).map(|k| (k as f64 * 600.0, 0.0)).collect();
        trim_history(&mut s, DAY_S);
        let last = s.tide.last().unwrap().0;
        assert!(s.tide[0].0 <= last - DAY_S - MAX_GAP_S);
        assert!(s.tide.len() < 400);
    }
}
