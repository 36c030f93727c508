//! Sensor series ingestion, smoothing and tidal feature extraction.

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::units::{FluidProperties, SeriesError, TimeSeries, Unit, UnitError};
use crate::{wrap_period, TIDAL_PERIOD_S};

pub const CSV_HEADER: &str = "time,value,unit";

/// Minimum number of samples accepted by the smoother.
pub const MIN_SMOOTH_LEN: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("input is not valid UTF-8")]
    NotUtf8,
    #[error("expected header `{CSV_HEADER}`")]
    BadHeader,
    #[error("line {line}: unit `{unit}` not one of cm, mbar, Pa (or differs from the first row)")]
    BadUnit { line: usize, unit: String },
    #[error("line {0}: timestamp not after the previous one")]
    NonMonotonicTime(usize),
    #[error("line {0}: cannot parse row")]
    UnparsableRow(usize),
    #[error("series too short: need {need}, got {got}")]
    TooShort { need: String, got: String },
    #[error("pressure and tide series do not overlap")]
    NoOverlap,
    #[error("no complete tidal cycle found")]
    NoCycles,
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error(transparent)]
    Series(#[from] SeriesError),
}

/// ISO-8601 (RFC 3339) time as epoch seconds.
pub fn parse_time(s: &str) -> Option<f64> {
    let t = DateTime::parse_from_rfc3339(s.trim()).ok()?;
    Some(t.timestamp() as f64 + t.timestamp_subsec_nanos() as f64 * 1e-9)
}

pub fn format_time(t: f64) -> String {
    let secs = t.floor();
    let nanos = ((t - secs) * 1e9).round() as u32;
    let (secs, nanos) = if nanos >= 1_000_000_000 { (secs + 1.0, 0) } else { (secs, nanos) };
    let dt = DateTime::<Utc>::from_timestamp(secs as i64, nanos).unwrap_or_default();
    dt.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

/// Parses a `time,value,unit` CSV (ISO-8601 UTC times, one unit per file).
pub fn parse_sensor_csv(bytes: &[u8]) -> Result<TimeSeries, SignalError> {
    let text = std::str::from_utf8(bytes).map_err(|_| SignalError::NotUtf8)?;
    let mut lines = text.split('\n').enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == CSV_HEADER => {}
        _ => return Err(SignalError::BadHeader),
    }
    let mut unit: Option<Unit> = None;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(SignalError::UnparsableRow(line_no));
        }
        let t = parse_time(fields[0]).ok_or(SignalError::UnparsableRow(line_no))?;
        let v: f64 = fields[1].parse().map_err(|_| SignalError::UnparsableRow(line_no))?;
        if !v.is_finite() {
            return Err(SignalError::UnparsableRow(line_no));
        }
        let u = match Unit::parse(fields[2]) {
            Ok(u) if u.is_pressure() && unit.is_none_or(|first| first == u) => u,
            _ => return Err(SignalError::BadUnit { line: line_no, unit: fields[2].to_string() }),
        };
        unit = Some(u);
        if times.last().is_some_and(|&last| t <= last) {
            return Err(SignalError::NonMonotonicTime(line_no));
        }
        times.push(t);
        values.push(v);
    }
    Ok(TimeSeries::new(times, values, unit.unwrap_or(Unit::Pa))?)
}

pub fn write_sensor_csv(series: &TimeSeries) -> String {
    let mut out = String::with_capacity(40 * (series.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (t, v) in series.iter() {
        out.push_str(&format!("{},{},{}\n", format_time(t), v, series.unit()));
    }
    out
}

/// Robust noise level: scaled MAD of second differences.
pub fn noise_estimate(values: &[f64]) -> f64 {
    if values.len() < 3 {
        return 0.0;
    }
    let mut d2: Vec<f64> = values.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect();
    let med = median(&mut d2);
    let mut dev: Vec<f64> = d2.iter().map(|x| (x - med).abs()).collect();
    1.4826 * median(&mut dev) / 6f64.sqrt()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear fit over `lo..hi`, returns (prediction at `t0`, residual std).
fn local_linear(ts: &[f64], vs: &[f64], lo: usize, hi: usize, t0: f64) -> (f64, f64) {
    let n = (hi - lo) as f64;
    let (mut st, mut sv) = (0.0, 0.0);
    for k in lo..hi {
        st += ts[k] - t0;
        sv += vs[k];
    }
    let (mt, mv) = (st / n, sv / n);
    let (mut stt, mut stv) = (0.0, 0.0);
    for k in lo..hi {
        let dt = ts[k] - t0 - mt;
        stt += dt * dt;
        stv += dt * (vs[k] - mv);
    }
    let slope = if stt > 0.0 { stv / stt } else { 0.0 };
    let mut ss = 0.0;
    for k in lo..hi {
        let r = vs[k] - (mv + slope * (ts[k] - t0 - mt));
        ss += r * r;
    }
    let std = if n > 2.0 { (ss / (n - 2.0)).sqrt() } else { 0.0 };
    (mv - slope * mt, std)
}

/// Window of `2w + 1` samples around `i`, shifted inward at the ends.
fn window_bounds(i: usize, w: usize, n: usize) -> (usize, usize) {
    let width = (2 * w + 1).min(n);
    let lo = i.saturating_sub(w).min(n - width);
    (lo, lo + width)
}

/// Adaptive local-linear smoothing capped at one sixth of the tidal period.
pub fn smooth_adaptive(series: &TimeSeries, noise_scale: Option<f64>) -> Result<TimeSeries, SignalError> {
    smooth_adaptive_capped(series, noise_scale, TIDAL_PERIOD_S / 6.0)
}

/// Each sample is replaced by a local linear regression evaluated at its own
/// time. The window starts at 7 samples and grows while the fit residual
/// stays below 1.5 times the noise level, up to `max_span` seconds.
pub fn smooth_adaptive_capped(
    series: &TimeSeries,
    noise_scale: Option<f64>,
    max_span: f64,
) -> Result<TimeSeries, SignalError> {
    let n = series.len();
    if n < MIN_SMOOTH_LEN {
        return Err(SignalError::TooShort { need: format!("{MIN_SMOOTH_LEN} samples"), got: n.to_string() });
    }
    let (ts, vs) = (series.timestamps(), series.values());
    let sigma = noise_scale.unwrap_or_else(|| noise_estimate(vs));
    let limit = 1.5 * sigma;
    let out = (0..n)
        .map(|i| {
            let mut w = 3;
            let (lo, hi) = window_bounds(i, w, n);
            let mut best = local_linear(ts, vs, lo, hi, ts[i]).0;
            loop {
                let next = w + 1;
                let (lo, hi) = window_bounds(i, next, n);
                if hi - lo <= 2 * w + 1 || ts[hi - 1] - ts[lo] > max_span {
                    break;
                }
                let (pred, std) = local_linear(ts, vs, lo, hi, ts[i]);
                if !(std < limit) {
                    break;
                }
                best = pred;
                w = next;
            }
            best
        })
        .collect();
    Ok(series.with_values(out))
}

/// One tidal cycle: a maximum and the following minimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleExtrema {
    pub t_max: f64,
    pub v_max: f64,
    pub t_min: f64,
    pub v_min: f64,
}

/// Least-squares parabola through up to 5 samples around `i`; returns the vertex.
fn refine(ts: &[f64], vs: &[f64], i: usize) -> (f64, f64) {
    let n = ts.len();
    let lo = i.saturating_sub(2);
    let hi = (i + 3).min(n);
    if hi - lo < 3 {
        return (ts[i], vs[i]);
    }
    let t0 = ts[i];
    let scale = (ts[hi - 1] - ts[lo]).max(f64::MIN_POSITIVE);
    // normal equations for v = c0 + c1 s + c2 s², s = (t - t0)/scale
    let mut m = [[0.0; 3]; 3];
    let mut r = [0.0; 3];
    for k in lo..hi {
        let s = (ts[k] - t0) / scale;
        let p = [1.0, s, s * s];
        for a in 0..3 {
            r[a] += p[a] * vs[k];
            for b in 0..3 {
                m[a][b] += p[a] * p[b];
            }
        }
    }
    let Some(c) = solve3(m, r) else {
        return (ts[i], vs[i]);
    };
    if c[2] == 0.0 {
        return (ts[i], vs[i]);
    }
    let s = -c[1] / (2.0 * c[2]);
    let (s_lo, s_hi) = ((ts[lo] - t0) / scale, (ts[hi - 1] - t0) / scale);
    if !(s >= s_lo && s <= s_hi) {
        return (ts[i], vs[i]);
    }
    (t0 + s * scale, c[0] + c[1] * s + c[2] * s * s)
}

fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for k in 0..3 {
        let p = (k..3).max_by(|&a, &b| m[a][k].abs().total_cmp(&m[b][k].abs()))?;
        if m[p][k].abs() < 1e-14 {
            return None;
        }
        m.swap(k, p);
        r.swap(k, p);
        for i in (k + 1)..3 {
            let f = m[i][k] / m[k][k];
            for j in k..3 {
                m[i][j] -= f * m[k][j];
            }
            r[i] -= f * r[k];
        }
    }
    let mut x = [0.0; 3];
    for k in (0..3).rev() {
        let s: f64 = ((k + 1)..3).map(|j| m[k][j] * x[j]).sum();
        x[k] = (r[k] - s) / m[k][k];
    }
    Some(x)
}

/// Interior samples that are the first maximum (or minimum) within ±period/2.
fn discrete_extrema(ts: &[f64], vs: &[f64], period: f64, maxima: bool) -> Vec<usize> {
    let n = ts.len();
    let scale = vs.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let better = |a: f64, b: f64| if maxima { a > b } else { a < b };
    let mut out = Vec::new();
    let (mut lo, mut hi) = (0, 0);
    for i in 1..n.saturating_sub(1) {
        while ts[lo] < ts[i] - 0.5 * period {
            lo += 1;
        }
        while hi < n && ts[hi] <= ts[i] + 0.5 * period {
            hi += 1;
        }
        let (mut wmin, mut wmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut first = true;
        for k in lo..hi {
            wmin = wmin.min(vs[k]);
            wmax = wmax.max(vs[k]);
            if k < i && !better(vs[i], vs[k]) {
                first = false;
            }
            if k > i && better(vs[k], vs[i]) {
                first = false;
            }
        }
        if first && wmax - wmin > 1e-12 * scale {
            out.push(i);
        }
    }
    out
}

/// Maxima paired with the next minimum, one pair per cycle.
pub fn extract_extrema(series: &TimeSeries, period: f64) -> Result<Vec<CycleExtrema>, SignalError> {
    if series.len() < 3 || series.span() < period * (1.0 - 1e-9) {
        return Err(SignalError::TooShort { need: format!("{period} s"), got: format!("{} s", series.span()) });
    }
    let (ts, vs) = (series.timestamps(), series.values());
    let maxima = discrete_extrema(ts, vs, period, true);
    let minima = discrete_extrema(ts, vs, period, false);
    let mut out = Vec::new();
    for (j, &imax) in maxima.iter().enumerate() {
        let next_max = maxima.get(j + 1).copied().unwrap_or(usize::MAX);
        if let Some(&imin) = minima.iter().find(|&&m| m > imax && m < next_max) {
            let (t_max, v_max) = refine(ts, vs, imax);
            let (t_min, v_min) = refine(ts, vs, imin);
            out.push(CycleExtrema { t_max, v_max, t_min, v_min });
        }
    }
    Ok(out)
}

/// Relative amplitude and delay of a pressure signal against the tide.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HarmonicFeature {
    pub relative_amplitude: f64,
    /// Lag of the pressure maximum after the sea-level maximum, in `[0, T)` [s].
    pub delay: f64,
    pub window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureSet {
    pub mean: HarmonicFeature,
    pub per_cycle: Vec<HarmonicFeature>,
}

#[derive(Debug, Clone, Default)]
pub struct FeatureOptions {
    pub smooth: bool,
    /// Atmospheric pressure subtracted from the pressure series.
    pub air: Option<TimeSeries>,
}

/// Pressure minus interpolated air pressure, in Pa; samples outside the air
/// record are dropped.
pub fn subtract_air(
    pressure: &TimeSeries,
    air: &TimeSeries,
    fluid: &FluidProperties,
) -> Result<TimeSeries, SignalError> {
    let p = pressure.convert(Unit::Pa, fluid)?;
    let a = air.convert(Unit::Pa, fluid)?;
    let (mut ts, mut vs) = (Vec::new(), Vec::new());
    for (t, v) in p.iter() {
        if let Some(av) = a.value_at(t) {
            ts.push(t);
            vs.push(v - av);
        }
    }
    Ok(TimeSeries::new(ts, vs, Unit::Pa)?)
}

/// Circular mean of delays modulo `period`.
pub fn circular_mean(delays: &[f64], period: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI / period;
    let (s, c) = delays.iter().fold((0.0, 0.0), |(s, c), d| (s + (w * d).sin(), c + (w * d).cos()));
    wrap_period(s.atan2(c) / w, period)
}

pub fn extract_features(
    pressure: &TimeSeries,
    tide: &TimeSeries,
    fluid: &FluidProperties,
    period: f64,
) -> Result<FeatureSet, SignalError> {
    extract_features_with(pressure, tide, fluid, period, &FeatureOptions::default())
}

/// Pairs each tide maximum with the nearest pressure maximum and averages
/// the per-cycle ratios of peak-to-trough ranges and the lags.
pub fn extract_features_with(
    pressure: &TimeSeries,
    tide: &TimeSeries,
    fluid: &FluidProperties,
    period: f64,
    opts: &FeatureOptions,
) -> Result<FeatureSet, SignalError> {
    let mut p = match &opts.air {
        Some(air) => subtract_air(pressure, air, fluid)?,
        None => pressure.convert(Unit::Pa, fluid)?,
    };
    let mut h = tide.convert(Unit::Pa, fluid)?;
    let (Some(ps), Some(pe), Some(hs), Some(he)) = (p.start(), p.end(), h.start(), h.end()) else {
        return Err(SignalError::NoOverlap);
    };
    let (t0, t1) = (ps.max(hs), pe.min(he));
    if t1 <= t0 {
        return Err(SignalError::NoOverlap);
    }
    if t1 - t0 < period * (1.0 - 1e-9) {
        return Err(SignalError::TooShort { need: format!("{period} s overlap"), got: format!("{} s", t1 - t0) });
    }
    p = p.window(t0, t1);
    h = h.window(t0, t1);
    if opts.smooth {
        p = smooth_adaptive_capped(&p, None, period / 6.0)?;
        h = smooth_adaptive_capped(&h, None, period / 6.0)?;
    }
    let pc = extract_extrema(&p, period)?;
    let hc = extract_extrema(&h, period)?;
    let mut per_cycle = Vec::new();
    for c in &hc {
        let Some(best) = pc.iter().min_by(|a, b| (a.t_max - c.t_max).abs().total_cmp(&(b.t_max - c.t_max).abs()))
        else {
            continue;
        };
        if (best.t_max - c.t_max).abs() >= 0.5 * period {
            continue;
        }
        let range_h = c.v_max - c.v_min;
        if range_h <= 0.0 {
            continue;
        }
        per_cycle.push(HarmonicFeature {
            relative_amplitude: (best.v_max - best.v_min) / range_h,
            delay: wrap_period(best.t_max - c.t_max, period),
            window: (c.t_max, c.t_min),
        });
    }
    if per_cycle.is_empty() {
        return Err(SignalError::NoCycles);
    }
    let n = per_cycle.len() as f64;
    let amp = per_cycle.iter().map(|f| f.relative_amplitude).sum::<f64>() / n;
    let delays: Vec<f64> = per_cycle.iter().map(|f| f.delay).collect();
    Ok(FeatureSet {
        mean: HarmonicFeature { relative_amplitude: amp, delay: circular_mean(&delays, period), window: (t0, t1) },
        per_cycle,
    })
}
