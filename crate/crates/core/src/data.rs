//! Synthetic waves, event composition, anomaly and noise injection,
//! resampling, windowing and CSV ingestion.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, sub_seed};

/// Marker line written at the top of every CSV this crate produces.
pub const CSV_VERSION_LINE: &str = "# format-version: 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    /// Seconds between samples.
    pub interval: f64,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, interval: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::usage("a time series needs at least one sample"));
        }
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(Error::usage("sampling interval must be positive"));
        }
        Ok(Self { values, interval })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Time spanned from the first to the last sample.
    pub fn duration(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.interval
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveKind {
    Sine,
    Square,
    Triangle,
}

impl WaveKind {
    pub const ALL: [WaveKind; 3] = [WaveKind::Sine, WaveKind::Square, WaveKind::Triangle];

    /// Noise-free unit-amplitude value at angle `theta`.
    pub fn value(self, theta: f64) -> f64 {
        match self {
            WaveKind::Sine => theta.sin(),
            WaveKind::Square => {
                if theta.sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            WaveKind::Triangle => std::f64::consts::FRAC_2_PI * theta.sin().asin(),
        }
    }
}

impl FromStr for WaveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sine" => Ok(WaveKind::Sine),
            "square" => Ok(WaveKind::Square),
            "triangle" => Ok(WaveKind::Triangle),
            other => Err(Error::usage(format!("unknown wave kind {other:?}"))),
        }
    }
}

impl fmt::Display for WaveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WaveKind::Sine => "sine",
            WaveKind::Square => "square",
            WaveKind::Triangle => "triangle",
        })
    }
}

fn gaussian(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::usage(format!("invalid noise level {sigma}: {e}")))
}

/// `len` samples of a unit-amplitude wave with `period` samples per cycle,
/// starting at angle `phase`, plus Gaussian noise of standard deviation `sigma`.
pub fn gen_wave(kind: WaveKind, len: usize, period: f64, phase: f64, sigma: f64, seed: u64) -> Result<TimeSeries> {
    gen_wave_at(kind, len, period, phase, sigma, 1.0, seed)
}

/// [`gen_wave`] with an explicit sampling interval attached to the result.
pub fn gen_wave_at(
    kind: WaveKind,
    len: usize,
    period: f64,
    phase: f64,
    sigma: f64,
    interval: f64,
    seed: u64,
) -> Result<TimeSeries> {
    if !(period >= 2.0) {
        return Err(Error::usage(format!("period must be at least 2 samples, got {period}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::usage("noise level must be nonnegative"));
    }
    let omega = std::f64::consts::TAU / period;
    let mut values: Vec<f64> = (0..len).map(|t| kind.value(omega * t as f64 + phase)).collect();
    if sigma > 0.0 {
        let noise = gaussian(sigma)?;
        let mut rng = seeded_rng(seed);
        values.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    TimeSeries::new(values, interval)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    /// Frequent, small, near-periodic machine traffic.
    Mtc,
    /// Rare, large, bursty human traffic.
    Htc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub indicator: Vec<bool>,
    pub intensity: Vec<f64>,
    pub kind: EventKind,
}

impl EventSpec {
    /// Fires every `period` samples starting at `offset`, each with intensity `amplitude`.
    pub fn periodic(len: usize, period: usize, offset: usize, amplitude: f64) -> Result<Self> {
        if period == 0 {
            return Err(Error::usage("event period must be positive"));
        }
        let indicator = (0..len).map(|t| t >= offset && (t - offset) % period == 0).collect();
        Ok(Self { indicator, intensity: vec![amplitude; len], kind: EventKind::Mtc })
    }

    /// A single burst over `[start, start+span)`.
    pub fn burst(len: usize, start: usize, span: usize, amplitude: f64) -> Result<Self> {
        if start + span > len {
            return Err(Error::usage("burst exceeds the series length"));
        }
        let indicator = (0..len).map(|t| t >= start && t < start + span).collect();
        Ok(Self { indicator, intensity: vec![amplitude; len], kind: EventKind::Htc })
    }
}

/// `x = Σᵢ aᵢ ∘ eᵢ`.
pub fn compose_events(events: &[EventSpec]) -> Result<Vec<f64>> {
    let Some(first) = events.first() else {
        return Ok(Vec::new());
    };
    let len = first.indicator.len();
    let mut x = vec![0.0; len];
    for e in events {
        if e.indicator.len() != len {
            return Err(Error::shape("compose_events indicator", len, e.indicator.len()));
        }
        if e.intensity.len() != len {
            return Err(Error::shape("compose_events intensity", len, e.intensity.len()));
        }
        for ((v, &on), a) in x.iter_mut().zip(&e.indicator).zip(&e.intensity) {
            if on {
                *v += a;
            }
        }
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnomalyKind {
    /// Strong local Gaussian noise.
    LocalNoise = 1,
    /// Unusually high activity.
    Burst = 2,
    /// Breakdown: the span drops to zero.
    Breakdown = 3,
    /// A single impulse.
    Impulse = 4,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::LocalNoise,
        AnomalyKind::Burst,
        AnomalyKind::Breakdown,
        AnomalyKind::Impulse,
    ];

    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(AnomalyKind::LocalNoise),
            2 => Ok(AnomalyKind::Burst),
            3 => Ok(AnomalyKind::Breakdown),
            4 => Ok(AnomalyKind::Impulse),
            _ => Err(Error::usage(format!("anomaly type must be 1..=4, got {i}"))),
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    /// Magnitude and span (as a fraction of the window) of the default anomaly,
    /// relative to a unit-amplitude signal.
    pub fn defaults(self) -> (f64, f64) {
        match self {
            AnomalyKind::LocalNoise => (3.0, 0.10),
            AnomalyKind::Burst => (5.0, 0.05),
            AnomalyKind::Breakdown => (0.0, 0.20),
            AnomalyKind::Impulse => (5.0, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub magnitude: f64,
    pub location: usize,
    pub span: usize,
}

impl AnomalySpec {
    /// Default magnitude and span for a window of `len` samples, scaled by `amplitude`,
    /// starting at `location`.
    pub fn default_for(kind: AnomalyKind, len: usize, amplitude: f64, location: usize) -> Self {
        let (m, frac) = kind.defaults();
        let span = if kind == AnomalyKind::Impulse {
            1
        } else {
            ((frac * len as f64).round() as usize).max(1)
        };
        Self { kind, magnitude: m * amplitude, location, span }
    }

    /// Same as [`AnomalySpec::default_for`] with a uniformly random location that fits.
    pub fn random<R: Rng>(kind: AnomalyKind, len: usize, amplitude: f64, rng: &mut R) -> Result<Self> {
        let probe = Self::default_for(kind, len, amplitude, 0);
        if probe.span > len {
            return Err(Error::usage("window too short for the anomaly span"));
        }
        let location = rng.gen_range(0..=len - probe.span);
        Ok(Self { location, ..probe })
    }
}

/// Applies one anomaly. Samples outside `[location, location+span)` are left untouched.
pub fn inject_anomaly(x: &[f64], spec: &AnomalySpec, seed: u64) -> Result<Vec<f64>> {
    let span = if spec.kind == AnomalyKind::Impulse { 1 } else { spec.span };
    if span == 0 || spec.location + span > x.len() {
        return Err(Error::usage(format!(
            "anomaly span [{}, {}) does not fit a series of length {}",
            spec.location,
            spec.location + span,
            x.len()
        )));
    }
    let mut y = x.to_vec();
    let range = spec.location..spec.location + span;
    match spec.kind {
        AnomalyKind::LocalNoise => {
            let noise = gaussian(spec.magnitude)?;
            let mut rng = seeded_rng(seed);
            y[range].iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        AnomalyKind::Burst => y[range].iter_mut().for_each(|v| *v += spec.magnitude),
        AnomalyKind::Breakdown => y[range].iter_mut().for_each(|v| *v = 0.0),
        AnomalyKind::Impulse => y[spec.location] += spec.magnitude,
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "parameter")]
pub enum NoiseSpec {
    /// Upsampling by linear interpolation with an integer rate factor.
    Upsample(usize),
    /// Downsampling by keeping every `factor`-th sample.
    Decimate(usize),
    /// Circular shift to the right.
    Shift(usize),
    /// Gaussian noise of the given standard deviation on every sample.
    Gaussian(f64),
}

impl NoiseSpec {
    pub fn type_index(&self) -> u8 {
        match self {
            NoiseSpec::Upsample(_) => 1,
            NoiseSpec::Decimate(_) => 2,
            NoiseSpec::Shift(_) => 3,
            NoiseSpec::Gaussian(_) => 4,
        }
    }
}

pub fn apply_noise(x: &[f64], spec: &NoiseSpec, seed: u64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::usage("cannot add noise to an empty series"));
    }
    match *spec {
        NoiseSpec::Upsample(r) => {
            if r == 0 {
                return Err(Error::usage("upsampling factor must be positive"));
            }
            let mut out = Vec::with_capacity((x.len() - 1) * r + 1);
            for w in x.windows(2) {
                for k in 0..r {
                    let a = k as f64 / r as f64;
                    out.push(w[0] + a * (w[1] - w[0]));
                }
            }
            out.push(*x.last().expect("nonempty"));
            Ok(out)
        }
        NoiseSpec::Decimate(r) => {
            if r == 0 || r > x.len() {
                return Err(Error::usage(format!("decimation factor {r} is invalid for length {}", x.len())));
            }
            Ok(x.iter().step_by(r).copied().collect())
        }
        NoiseSpec::Shift(s) => {
            let mut y = x.to_vec();
            y.rotate_right(s % x.len());
            Ok(y)
        }
        NoiseSpec::Gaussian(sigma) => {
            let noise = gaussian(sigma)?;
            let mut rng = seeded_rng(seed);
            Ok(x.iter().map(|v| v + noise.sample(&mut rng)).collect())
        }
    }
}

/// Linear-interpolation resample onto a grid of spacing `new_interval`
/// starting at the first sample and covering the same duration.
pub fn resample(x: &TimeSeries, new_interval: f64) -> Result<TimeSeries> {
    if !(new_interval > 0.0 && new_interval.is_finite()) {
        return Err(Error::usage("new sampling interval must be positive"));
    }
    if new_interval == x.interval {
        return Ok(x.clone());
    }
    let duration = x.duration();
    let count = (duration / new_interval + 1e-9).floor() as usize + 1;
    let last = x.values.len() - 1;
    let values = (0..count)
        .map(|k| {
            let pos = k as f64 * new_interval / x.interval;
            let i = (pos.floor() as usize).min(last);
            if i == last {
                return x.values[last];
            }
            let a = pos - i as f64;
            x.values[i] + a * (x.values[i + 1] - x.values[i])
        })
        .collect();
    TimeSeries::new(values, new_interval)
}

/// Re-grids a window of fixed duration onto `len` samples. Sample `i` of `n`
/// sits at `i / n` of the window; values are linearly interpolated and the
/// last sample is held past the end.
pub fn fit_length(x: &[f64], len: usize) -> Result<Vec<f64>> {
    if x.is_empty() || len == 0 {
        return Err(Error::usage("cannot re-grid an empty window"));
    }
    if x.len() == len {
        return Ok(x.to_vec());
    }
    let last = x.len() - 1;
    let ratio = x.len() as f64 / len as f64;
    Ok((0..len)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i = pos.floor() as usize;
            if i >= last {
                return x[last];
            }
            let a = pos - i as f64;
            x[i] + a * (x[i + 1] - x[i])
        })
        .collect())
}

/// Non-overlapping windows of `round(window_len / bin_len)` samples; a trailing
/// partial window is dropped.
pub fn window_series(x: &[f64], window_len: f64, bin_len: f64) -> Result<Vec<Vec<f64>>> {
    if !(bin_len > 0.0) || !(window_len >= bin_len) {
        return Err(Error::usage("window length must be at least one positive bin"));
    }
    let n = (window_len / bin_len).round() as usize;
    Ok(x.chunks_exact(n).map(<[f64]>::to_vec).collect())
}

/// One labelled window as stored in the windows CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub id: String,
    /// Ground-truth class, when known.
    pub class: Option<i64>,
    /// `0` for normal windows, `1..=4` for the anomaly type, when known.
    pub anomaly: Option<u8>,
    pub values: Vec<f64>,
}

/// Samples per window when reading `series_id,index,value` files.
pub const DEFAULT_WINDOW_SAMPLES: usize = 120;

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line: line as usize, message: message.into() }
}

fn optional<T: FromStr>(field: &str, line: u64, what: &str) -> Result<Option<T>> {
    if field.trim().is_empty() {
        return Ok(None);
    }
    field
        .trim()
        .parse()
        .map(Some)
        .map_err(|_| parse_err(line, format!("invalid {what} {field:?}")))
}

fn number(field: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("invalid number {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value {field:?}")));
    }
    Ok(v)
}

/// Reads windows from CSV. Two layouts are accepted:
///
/// * `window_id,class,anomaly,x0,x1,…`: one window per row;
/// * `series_id,index,value`: long format, cut into non-overlapping windows of
///   `samples_per_window` samples per series (trailing remainder dropped).
///
/// Lines starting with `#` are comments. A file with only a header yields no windows.
pub fn read_windows<R: Read>(reader: R, samples_per_window: usize) -> Result<Vec<Window>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let long = names.len() == 3 && names[0] == "series_id" && names[2] == "value";
    if !long && (names.len() < 3 || names[0] != "window_id") {
        return Err(parse_err(
            1,
            "expected a `window_id,class,anomaly,x0,…` or `series_id,index,value` header",
        ));
    }
    let mut windows = Vec::new();
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if long {
            if record.len() != 3 {
                return Err(parse_err(line, format!("expected 3 fields, found {}", record.len())));
            }
            let id = record[0].to_string();
            let index = number(&record[1], line)?;
            let value = number(&record[2], line)?;
            match series.last_mut() {
                Some((last, rows)) if *last == id => rows.push((index, value)),
                _ => {
                    if series.iter().any(|(s, _)| *s == id) {
                        return Err(parse_err(line, format!("rows of series {id:?} are not contiguous")));
                    }
                    series.push((id, vec![(index, value)]));
                }
            }
        } else {
            if record.len() != names.len() {
                return Err(parse_err(line, format!("expected {} fields, found {}", names.len(), record.len())));
            }
            let values = record.iter().skip(3).map(|f| number(f, line)).collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(parse_err(line, "window has no samples"));
            }
            windows.push(Window {
                id: record[0].to_string(),
                class: optional(&record[1], line, "class")?,
                anomaly: optional(&record[2], line, "anomaly")?,
                values,
            });
        }
    }
    if long {
        if samples_per_window == 0 {
            return Err(Error::usage("samples per window must be positive"));
        }
        for (id, mut rows) in series {
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let values: Vec<f64> = rows.into_iter().map(|r| r.1).collect();
            for (k, chunk) in values.chunks_exact(samples_per_window).enumerate() {
                windows.push(Window { id: format!("{id}:{k}"), class: None, anomaly: None, values: chunk.to_vec() });
            }
        }
    }
    Ok(windows)
}

pub fn load_windows(path: &Path, samples_per_window: usize) -> Result<Vec<Window>> {
    read_windows(File::open(path)?, samples_per_window)
}

/// Writes the one-window-per-row layout read by [`read_windows`].
pub fn write_windows<W: Write>(mut out: W, windows: &[Window]) -> Result<()> {
    writeln!(out, "{CSV_VERSION_LINE}")?;
    let width = windows.first().map_or(0, |w| w.values.len());
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let mut header = vec!["window_id".to_string(), "class".into(), "anomaly".into()];
    header.extend((0..width).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for win in windows {
        let mut row = vec![
            win.id.clone(),
            win.class.map(|c| c.to_string()).unwrap_or_default(),
            win.anomaly.map(|a| a.to_string()).unwrap_or_default(),
        ];
        row.extend(win.values.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the three-wave synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Copies of each clean wave in the training set.
    pub copies: usize,
    /// Duration of one window in seconds.
    pub duration: f64,
    /// Sampling interval of the training data in seconds.
    pub interval: f64,
    /// Wave period in seconds.
    pub period: f64,
    pub awgn_sigma: f64,
    /// Phases are drawn uniformly from `[0, phase_jitter)` radians.
    pub phase_jitter: f64,
    pub test_normals: usize,
    pub test_anomalies_per_type: usize,
    /// Fraction of training windows replaced by anomalous ones.
    pub contamination: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            copies: 500,
            duration: 1.0,
            interval: 1.0 / 120.0,
            period: 1.0 / 3.0,
            awgn_sigma: 0.05,
            phase_jitter: std::f64::consts::FRAC_PI_8,
            test_normals: 100,
            test_anomalies_per_type: 100,
            contamination: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.interval > 0.0) || !(self.duration >= self.interval) {
            return Err(Error::usage("duration must cover at least one sampling interval"));
        }
        if !(self.period / self.interval >= 2.0) {
            return Err(Error::usage("wave period must span at least 2 samples"));
        }
        if !(self.awgn_sigma >= 0.0) || !(self.phase_jitter >= 0.0) {
            return Err(Error::usage("noise level and phase jitter must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.contamination) {
            return Err(Error::usage("contamination must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Samples per window at the configured interval.
    pub fn window_len(&self) -> usize {
        self.window_len_at(self.interval)
    }

    pub fn window_len_at(&self, interval: f64) -> usize {
        (self.duration / interval + 1e-9).floor() as usize
    }

    /// The same benchmark observed at a coarser or finer sampling interval.
    pub fn at_interval(&self, interval: f64) -> Self {
        Self { interval, ..self.clone() }
    }
}

fn clean_window<R: Rng>(cfg: &SynthConfig, kind: WaveKind, rng: &mut R) -> Result<Vec<f64>> {
    let phase = if cfg.phase_jitter > 0.0 { rng.gen_range(0.0..cfg.phase_jitter) } else { 0.0 };
    let noise_seed = rng.gen();
    Ok(gen_wave_at(
        kind,
        cfg.window_len(),
        cfg.period / cfg.interval,
        phase,
        cfg.awgn_sigma,
        cfg.interval,
        noise_seed,
    )?
    .values)
}

fn anomalous_window<R: Rng>(cfg: &SynthConfig, kind: WaveKind, anomaly: AnomalyKind, rng: &mut R) -> Result<Vec<f64>> {
    let clean = clean_window(cfg, kind, rng)?;
    let spec = AnomalySpec::random(anomaly, clean.len(), 1.0, rng)?;
    inject_anomaly(&clean, &spec, rng.gen())
}

/// `copies` windows of each wave class; with contamination, that fraction of
/// windows (rounded down) is replaced by anomalous windows of cycling types.
pub fn synth_train(cfg: &SynthConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    let mut rng = seeded_rng(sub_seed(cfg.seed, 11));
    let total = cfg.copies * WaveKind::ALL.len();
    let n_bad = (cfg.contamination * total as f64).floor() as usize;
    // contaminated slots are spread evenly over the set
    let bad: Vec<bool> = (0..total).map(|i| n_bad > 0 && (i * n_bad) % total < n_bad).collect();
    let mut out = Vec::with_capacity(total);
    let mut next_type = 0;
    for i in 0..total {
        let class = i % WaveKind::ALL.len();
        let kind = WaveKind::ALL[class];
        let (values, anomaly) = if bad[i] {
            let a = AnomalyKind::ALL[next_type % 4];
            next_type += 1;
            (anomalous_window(cfg, kind, a, &mut rng)?, a.index())
        } else {
            (clean_window(cfg, kind, &mut rng)?, 0)
        };
        out.push(Window { id: format!("train-{i}"), class: Some(class as i64), anomaly: Some(anomaly), values });
    }
    Ok(out)
}

/// `test_normals` clean windows followed by `test_anomalies_per_type` windows of
/// each anomaly type; classes cycle through the three waves.
pub fn synth_test(cfg: &SynthConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    let mut rng = seeded_rng(sub_seed(cfg.seed, 12));
    let mut out = Vec::new();
    for i in 0..cfg.test_normals {
        let class = i % 3;
        let values = clean_window(cfg, WaveKind::ALL[class], &mut rng)?;
        out.push(Window { id: format!("test-{}", out.len()), class: Some(class as i64), anomaly: Some(0), values });
    }
    for a in AnomalyKind::ALL {
        for i in 0..cfg.test_anomalies_per_type {
            let class = i % 3;
            let values = anomalous_window(cfg, WaveKind::ALL[class], a, &mut rng)?;
            out.push(Window {
                id: format!("test-{}", out.len()),
                class: Some(class as i64),
                anomaly: Some(a.index()),
                values,
            });
        }
    }
    Ok(out)
}
