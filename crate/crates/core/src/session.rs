//! Recording data model: multichannel traces, stimulus logs and their
//! on-disk representation.
//!
//! A session is stored as three files sharing a stem:
//!
//! - `<stem>.csv`: header `time_s,<label>_mV,...[,truth]`, one row per sample.
//! - `<stem>.events.json`: array of stimulus events.
//! - `<stem>.meta.json`: sample rate, start time, baseline window and
//!   provenance. Optional on load; the sample rate is then inferred from the
//!   time column.
//!
//! Voltages are written with three decimals of millivolt, i.e. a 1 µV
//! quantum.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Default acquisition rate of the recording chain.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 400.0;

/// Default baseline segment at the start of every session.
pub const DEFAULT_BASELINE_WINDOW_S: (f64, f64) = (0.0, 20.0);

/// Voltage serialization quantum in mV.
pub const VOLTAGE_QUANTUM_MV: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: row {row}: expected {expected} fields, found {found}")]
    RowLength {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: row {row}, column `{column}`: {reason}")]
    BadValue {
        path: PathBuf,
        row: usize,
        column: String,
        reason: String,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("event {index}: field `{field}`: {reason}")]
    InvalidEvent {
        index: usize,
        field: &'static str,
        reason: String,
    },
    #[error("events not sorted: event {index} precedes event {prev}")]
    UnsortedEvents { index: usize, prev: usize },
    #[error("invalid session: {0}")]
    InvalidSession(String),
}

/// Stimulus classes applied to a device.
///
/// The first fourteen are the survey set. Green/blue light and vacuum are
/// additional conditions used by the optical pair and loading-rate
/// experiments. `Pair` names two stimuli applied simultaneously.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StimulusClass {
    Acetone,
    IsopropylAlcohol,
    Co2,
    Smoke,
    MapPro,
    Propane,
    Ir,
    WhiteLight,
    Uvb,
    Uvc,
    Pressure,
    Touch,
    Temperature,
    TarSpot,
    GreenLight,
    BlueLight,
    Vacuum,
    Pair(Box<StimulusClass>, Box<StimulusClass>),
}

impl StimulusClass {
    /// The fourteen survey classes in table order.
    pub const SURVEY: [StimulusClass; 14] = [
        StimulusClass::Acetone,
        StimulusClass::IsopropylAlcohol,
        StimulusClass::Co2,
        StimulusClass::Smoke,
        StimulusClass::MapPro,
        StimulusClass::Propane,
        StimulusClass::Ir,
        StimulusClass::WhiteLight,
        StimulusClass::Uvb,
        StimulusClass::Uvc,
        StimulusClass::Pressure,
        StimulusClass::Touch,
        StimulusClass::Temperature,
        StimulusClass::TarSpot,
    ];

    pub fn pair(a: StimulusClass, b: StimulusClass) -> Self {
        StimulusClass::Pair(Box::new(a), Box::new(b))
    }

    /// Intensity of these classes is LED brightness in percent.
    pub fn is_brightness(&self) -> bool {
        matches!(
            self,
            StimulusClass::WhiteLight | StimulusClass::GreenLight | StimulusClass::BlueLight
        )
    }

    pub fn name(&self) -> String {
        let s = match self {
            StimulusClass::Acetone => "acetone",
            StimulusClass::IsopropylAlcohol => "isopropyl_alcohol",
            StimulusClass::Co2 => "co2",
            StimulusClass::Smoke => "smoke",
            StimulusClass::MapPro => "map_pro",
            StimulusClass::Propane => "propane",
            StimulusClass::Ir => "ir",
            StimulusClass::WhiteLight => "white_light",
            StimulusClass::Uvb => "uvb",
            StimulusClass::Uvc => "uvc",
            StimulusClass::Pressure => "pressure",
            StimulusClass::Touch => "touch",
            StimulusClass::Temperature => "temperature",
            StimulusClass::TarSpot => "tar_spot",
            StimulusClass::GreenLight => "green_light",
            StimulusClass::BlueLight => "blue_light",
            StimulusClass::Vacuum => "vacuum",
            StimulusClass::Pair(a, b) => return format!("{}+{}", a.name(), b.name()),
        };
        s.to_string()
    }
}

impl fmt::Display for StimulusClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for StimulusClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((a, b)) = s.split_once('+') {
            let a: StimulusClass = a.parse()?;
            let b: StimulusClass = b.parse()?;
            if matches!(a, StimulusClass::Pair(..)) || matches!(b, StimulusClass::Pair(..)) {
                return Err(format!("nested pair `{s}`"));
            }
            return Ok(StimulusClass::pair(a, b));
        }
        let class = match s {
            "acetone" => StimulusClass::Acetone,
            "isopropyl_alcohol" => StimulusClass::IsopropylAlcohol,
            "co2" => StimulusClass::Co2,
            "smoke" => StimulusClass::Smoke,
            "map_pro" => StimulusClass::MapPro,
            "propane" => StimulusClass::Propane,
            "ir" => StimulusClass::Ir,
            "white_light" => StimulusClass::WhiteLight,
            "uvb" => StimulusClass::Uvb,
            "uvc" => StimulusClass::Uvc,
            "pressure" => StimulusClass::Pressure,
            "touch" => StimulusClass::Touch,
            "temperature" => StimulusClass::Temperature,
            "tar_spot" => StimulusClass::TarSpot,
            "green_light" => StimulusClass::GreenLight,
            "blue_light" => StimulusClass::BlueLight,
            "vacuum" => StimulusClass::Vacuum,
            other => return Err(format!("unknown stimulus class `{other}`")),
        };
        Ok(class)
    }
}

impl Serialize for StimulusClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for StimulusClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Spatial tag of a stimulus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Wall(u8),
    Pixel(u8),
    AngleDeg(f64),
    PosMm(f64),
}

impl Target {
    /// Angular target normalized into `[0, 360)`.
    pub fn angle(deg: f64) -> Self {
        Target::AngleDeg(normalize_deg(deg))
    }

    /// Wall or pixel index, when the target is one.
    pub fn channel_index(&self) -> Option<usize> {
        match *self {
            Target::Wall(k) | Target::Pixel(k) => Some(k as usize),
            _ => None,
        }
    }

    fn sort_key(&self) -> (u8, f64) {
        match *self {
            Target::Wall(k) => (0, k as f64),
            Target::Pixel(k) => (1, k as f64),
            Target::AngleDeg(x) => (2, x),
            Target::PosMm(x) => (3, x),
        }
    }

    fn check(&self) -> Result<(), String> {
        match *self {
            Target::Wall(k) | Target::Pixel(k) if k > 3 => {
                Err(format!("index {k} outside 0..=3"))
            }
            Target::AngleDeg(x) if !(0.0..360.0).contains(&x) => {
                Err(format!("angle {x} outside [0, 360)"))
            }
            Target::PosMm(x) if !x.is_finite() => Err("position not finite".into()),
            _ => Ok(()),
        }
    }
}

pub(crate) fn normalize_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub class: StimulusClass,
    pub onset_s: f64,
    pub duration_s: f64,
    pub intensity: f64,
    pub loading_rate: Option<f64>,
    pub target: Option<Target>,
}

impl StimulusEvent {
    pub fn new(class: StimulusClass, onset_s: f64, duration_s: f64, intensity: f64) -> Self {
        Self {
            class,
            onset_s,
            duration_s,
            intensity,
            loading_rate: None,
            target: None,
        }
    }

    pub fn with_target(mut self, target: Target) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_loading_rate(mut self, rate: f64) -> Self {
        self.loading_rate = Some(rate);
        self
    }

    pub fn offset_s(&self) -> f64 {
        self.onset_s + self.duration_s
    }

    fn check(&self, index: usize) -> Result<(), SessionError> {
        let bad = |field, reason: String| SessionError::InvalidEvent {
            index,
            field,
            reason,
        };
        if !self.onset_s.is_finite() {
            return Err(bad("onset_s", "not finite".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            return Err(bad("duration_s", format!("{} is not >= 0", self.duration_s)));
        }
        if !self.intensity.is_finite() {
            return Err(bad("intensity", "not finite".into()));
        }
        if let Some(r) = self.loading_rate {
            if !r.is_finite() {
                return Err(bad("loading_rate", "not finite".into()));
            }
        }
        if let Some(t) = &self.target {
            t.check().map_err(|reason| bad("target", reason))?;
        }
        Ok(())
    }
}

/// Total order used for event logs: onset, then class name, then target.
pub fn event_order(a: &StimulusEvent, b: &StimulusEvent) -> Ordering {
    a.onset_s
        .total_cmp(&b.onset_s)
        .then_with(|| a.class.name().cmp(&b.class.name()))
        .then_with(|| match (&a.target, &b.target) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(x), Some(y)) => {
                let (kx, vx) = x.sort_key();
                let (ky, vy) = y.sort_key();
                kx.cmp(&ky).then(vx.total_cmp(&vy))
            }
        })
}

/// Uniformly sampled multichannel voltage recording. Rows are time steps,
/// columns are channels, values are mV.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    pub samples: DMatrix<f64>,
    pub t0_s: f64,
}

impl Trace {
    pub fn new(
        sample_rate_hz: f64,
        channels: Vec<String>,
        samples: DMatrix<f64>,
        t0_s: f64,
    ) -> Result<Self, SessionError> {
        let trace = Self {
            sample_rate_hz,
            channels,
            samples,
            t0_s,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Build from per-channel sample vectors with labels `ch0`, `ch1`, ...
    pub fn from_channels(
        sample_rate_hz: f64,
        t0_s: f64,
        data: &[Vec<f64>],
    ) -> Result<Self, SessionError> {
        let n = data.first().map_or(0, Vec::len);
        if data.iter().any(|c| c.len() != n) {
            return Err(SessionError::InvalidTrace(
                "channels have unequal lengths".into(),
            ));
        }
        let samples = DMatrix::from_fn(n, data.len(), |r, c| data[c][r]);
        Self::new(sample_rate_hz, default_labels(data.len()), samples, t0_s)
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(SessionError::InvalidTrace(format!(
                "sample rate {} is not positive",
                self.sample_rate_hz
            )));
        }
        if !self.t0_s.is_finite() {
            return Err(SessionError::InvalidTrace("t0 not finite".into()));
        }
        if self.samples.ncols() != self.channels.len() {
            return Err(SessionError::InvalidTrace(format!(
                "{} channel labels for {} sample columns",
                self.channels.len(),
                self.samples.ncols()
            )));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            let n = self.samples.nrows().max(1);
            return Err(SessionError::InvalidTrace(format!(
                "non-finite sample at row {}, channel {}",
                i % n,
                i / n
            )));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.samples.ncols()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    pub fn time_at(&self, index: usize) -> f64 {
        self.t0_s + index as f64 / self.sample_rate_hz
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples()).map(|i| self.time_at(i)).collect()
    }

    /// Contiguous samples of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.n_samples();
        &self.samples.as_slice()[c * n..(c + 1) * n]
    }

    /// Apply `f` to each channel, producing a trace with the same metadata.
    pub fn map_channels<F>(&self, mut f: F) -> Trace
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let cols: Vec<Vec<f64>> = (0..self.n_channels()).map(|c| f(self.channel(c))).collect();
        let n = cols.first().map_or(self.n_samples(), Vec::len);
        Trace {
            sample_rate_hz: self.sample_rate_hz,
            channels: self.channels.clone(),
            samples: DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]),
            t0_s: self.t0_s,
        }
    }

    /// Rows `start..end` as a new trace with adjusted start time.
    pub fn slice_rows(&self, start: usize, end: usize) -> Trace {
        let end = end.min(self.n_samples());
        let start = start.min(end);
        Trace {
            sample_rate_hz: self.sample_rate_hz,
            channels: self.channels.clone(),
            samples: self.samples.rows(start, end - start).into_owned(),
            t0_s: self.time_at(start),
        }
    }

    /// Index of the first sample at or after `t_s`, clamped to the trace.
    pub fn index_at_or_after(&self, t_s: f64) -> usize {
        let x = ((t_s - self.t0_s) * self.sample_rate_hz - 1e-9).ceil();
        x.clamp(0.0, self.n_samples() as f64) as usize
    }

    /// Index of the last sample at or before `t_s`, clamped to the trace.
    pub fn index_at_or_before(&self, t_s: f64) -> usize {
        let x = ((t_s - self.t0_s) * self.sample_rate_hz + 1e-9).floor();
        x.clamp(0.0, self.n_samples().saturating_sub(1) as f64) as usize
    }
}

pub(crate) fn default_labels(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("ch{c}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub trace: Trace,
    pub events: Vec<StimulusEvent>,
    pub baseline_window_s: (f64, f64),
    pub provenance: BTreeMap<String, String>,
    /// Per-sample ground truth (angle in degrees or position in mm) for
    /// moving stimuli.
    pub truth: Option<Vec<f64>>,
}

impl Session {
    /// Validated session with the default baseline window. Events are
    /// sorted into canonical order.
    pub fn new(trace: Trace, events: Vec<StimulusEvent>) -> Result<Self, SessionError> {
        Self::with_baseline(trace, events, DEFAULT_BASELINE_WINDOW_S)
    }

    pub fn with_baseline(
        trace: Trace,
        mut events: Vec<StimulusEvent>,
        baseline_window_s: (f64, f64),
    ) -> Result<Self, SessionError> {
        events.sort_by(event_order);
        let session = Self {
            trace,
            events,
            baseline_window_s,
            provenance: BTreeMap::new(),
            truth: None,
        };
        session.validate()?;
        Ok(session)
    }

    pub fn with_truth(mut self, truth: Vec<f64>) -> Result<Self, SessionError> {
        self.truth = Some(truth);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        self.trace.validate()?;
        for (i, e) in self.events.iter().enumerate() {
            e.check(i)?;
            if i > 0 && event_order(&self.events[i - 1], e) == Ordering::Greater {
                return Err(SessionError::UnsortedEvents {
                    index: i,
                    prev: i - 1,
                });
            }
        }
        let (b0, b1) = self.baseline_window_s;
        if !(b0.is_finite() && b1.is_finite() && b0 <= b1) {
            return Err(SessionError::InvalidSession(format!(
                "baseline window ({b0}, {b1}) is not an interval"
            )));
        }
        if let Some(first) = self.events.first() {
            if b1 > first.onset_s {
                return Err(SessionError::InvalidSession(format!(
                    "baseline window ends at {b1} s, after first onset {} s",
                    first.onset_s
                )));
            }
        }
        if let Some(truth) = &self.truth {
            if truth.len() != self.trace.n_samples() {
                return Err(SessionError::InvalidSession(format!(
                    "truth column has {} values for {} samples",
                    truth.len(),
                    self.trace.n_samples()
                )));
            }
            if truth.iter().any(|v| !v.is_finite()) {
                return Err(SessionError::InvalidSession("non-finite truth value".into()));
            }
        }
        Ok(())
    }

    /// Rows inside the baseline window.
    pub fn baseline_trace(&self) -> Trace {
        let (b0, b1) = self.baseline_window_s;
        let start = self.trace.index_at_or_after(b0);
        let end = self.trace.index_at_or_after(b1);
        self.trace.slice_rows(start, end)
    }
}

/// One window per event covering `[onset - pre_s, offset + post_s]`,
/// clipped to the trace.
pub fn slice_events(session: &Session, pre_s: f64, post_s: f64) -> Vec<(StimulusEvent, Trace)> {
    let trace = &session.trace;
    session
        .events
        .iter()
        .map(|e| {
            let start = trace.index_at_or_after(e.onset_s - pre_s.max(0.0));
            let last = trace.index_at_or_before(e.offset_s() + post_s.max(0.0));
            let end = if trace.n_samples() == 0 { 0 } else { last + 1 };
            (e.clone(), trace.slice_rows(start, end.max(start)))
        })
        .collect()
}

/// Paths of the three files making up a stored session.
#[derive(Debug, Clone)]
pub struct SessionPaths {
    pub trace_csv: PathBuf,
    pub events_json: PathBuf,
    pub meta_json: PathBuf,
}

impl SessionPaths {
    /// Derive sidecar paths from the trace path (or a bare stem).
    pub fn from_trace_path(path: &Path) -> Self {
        let stem = if path.extension().is_some_and(|e| e == "csv") {
            path.with_extension("")
        } else {
            path.to_path_buf()
        };
        let with = |suffix: &str| {
            let mut s = stem.clone().into_os_string();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            trace_csv: with(".csv"),
            events_json: with(".events.json"),
            meta_json: with(".meta.json"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SessionMeta {
    sample_rate_hz: f64,
    t0_s: f64,
    baseline_window_s: (f64, f64),
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_session(session: &Session, path: &Path) -> Result<SessionPaths, SessionError> {
    session.validate()?;
    let paths = SessionPaths::from_trace_path(path);
    let trace = &session.trace;

    let file = File::create(&paths.trace_csv).map_err(io_err(&paths.trace_csv))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("time_s");
    for label in &trace.channels {
        header.push(',');
        header.push_str(label);
        header.push_str("_mV");
    }
    if session.truth.is_some() {
        header.push_str(",truth");
    }
    header.push('\n');
    let mut write = |s: &str| w.write_all(s.as_bytes()).map_err(io_err(&paths.trace_csv));
    write(&header)?;
    let mut line = String::new();
    for r in 0..trace.n_samples() {
        use std::fmt::Write as _;
        line.clear();
        let _ = write!(line, "{:.6}", trace.time_at(r));
        for c in 0..trace.n_channels() {
            let _ = write!(line, ",{}", fmt_quantized(trace.samples[(r, c)]));
        }
        if let Some(truth) = &session.truth {
            let _ = write!(line, ",{:.6}", truth[r]);
        }
        line.push('\n');
        write(&line)?;
    }
    w.flush().map_err(io_err(&paths.trace_csv))?;

    let events = serde_json::to_string_pretty(&session.events).map_err(|source| {
        SessionError::Json {
            path: paths.events_json.clone(),
            source,
        }
    })?;
    std::fs::write(&paths.events_json, events + "\n").map_err(io_err(&paths.events_json))?;

    let meta = SessionMeta {
        sample_rate_hz: trace.sample_rate_hz,
        t0_s: trace.t0_s,
        baseline_window_s: session.baseline_window_s,
        provenance: session.provenance.clone(),
    };
    let meta = serde_json::to_string_pretty(&meta).map_err(|source| SessionError::Json {
        path: paths.meta_json.clone(),
        source,
    })?;
    std::fs::write(&paths.meta_json, meta + "\n").map_err(io_err(&paths.meta_json))?;
    Ok(paths)
}

/// Round to the 1 µV quantum and format with three decimals.
fn fmt_quantized(v: f64) -> String {
    let q = (v / VOLTAGE_QUANTUM_MV).round() * VOLTAGE_QUANTUM_MV;
    // avoid "-0.000"
    let q = if q == 0.0 { 0.0 } else { q };
    format!("{q:.3}")
}

pub fn load_session(path: &Path) -> Result<Session, SessionError> {
    let paths = SessionPaths::from_trace_path(path);
    let csv_path = &paths.trace_csv;
    let file = File::open(csv_path).map_err(io_err(csv_path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));

    let header = reader
        .headers()
        .map_err(|source| SessionError::Csv {
            path: csv_path.clone(),
            source,
        })?
        .clone();
    let malformed = |reason: String| SessionError::MalformedHeader {
        path: csv_path.clone(),
        reason,
    };
    let fields: Vec<&str> = header.iter().collect();
    if fields.first() != Some(&"time_s") {
        return Err(malformed("first column must be `time_s`".into()));
    }
    let has_truth = fields.last() == Some(&"truth");
    let channel_fields = &fields[1..fields.len() - usize::from(has_truth)];
    let mut channels = Vec::with_capacity(channel_fields.len());
    for f in channel_fields {
        match f.strip_suffix("_mV") {
            Some(label) if !label.is_empty() => channels.push(label.to_string()),
            _ => return Err(malformed(format!("column `{f}` is not `<label>_mV`"))),
        }
    }
    let n_cols = fields.len();

    let mut times = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut truth = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record.map_err(|source| SessionError::Csv {
            path: csv_path.clone(),
            source,
        })?;
        if record.len() != n_cols {
            return Err(SessionError::RowLength {
                path: csv_path.clone(),
                row,
                expected: n_cols,
                found: record.len(),
            });
        }
        for (j, raw) in record.iter().enumerate() {
            let v: f64 = raw.trim().parse().map_err(|_| SessionError::BadValue {
                path: csv_path.clone(),
                row,
                column: fields[j].to_string(),
                reason: format!("`{raw}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(SessionError::BadValue {
                    path: csv_path.clone(),
                    row,
                    column: fields[j].to_string(),
                    reason: "non-finite value".into(),
                });
            }
            if j == 0 {
                times.push(v);
            } else if has_truth && j == n_cols - 1 {
                truth.push(v);
            } else {
                data.push(v);
            }
        }
    }
    let n = times.len();
    let n_ch = channels.len();
    for k in 1..n {
        if times[k] <= times[k - 1] {
            return Err(SessionError::BadValue {
                path: csv_path.clone(),
                row: k + 2,
                column: "time_s".into(),
                reason: "timestamps not strictly increasing".into(),
            });
        }
    }
    let samples = DMatrix::from_row_slice(n, n_ch, &data);

    let meta = if paths.meta_json.exists() {
        let text = std::fs::read_to_string(&paths.meta_json).map_err(io_err(&paths.meta_json))?;
        Some(
            serde_json::from_str::<SessionMeta>(&text).map_err(|source| SessionError::Json {
                path: paths.meta_json.clone(),
                source,
            })?,
        )
    } else {
        None
    };
    let (sample_rate_hz, t0_s, baseline_window_s, provenance) = match meta {
        Some(m) => (m.sample_rate_hz, m.t0_s, m.baseline_window_s, m.provenance),
        None => {
            let fs = if n >= 2 {
                (n - 1) as f64 / (times[n - 1] - times[0])
            } else {
                DEFAULT_SAMPLE_RATE_HZ
            };
            let t0 = times.first().copied().unwrap_or(0.0);
            (fs, t0, DEFAULT_BASELINE_WINDOW_S, BTreeMap::new())
        }
    };

    let text = std::fs::read_to_string(&paths.events_json).map_err(io_err(&paths.events_json))?;
    let events: Vec<StimulusEvent> =
        serde_json::from_str(&text).map_err(|source| SessionError::Json {
            path: paths.events_json.clone(),
            source,
        })?;

    let trace = Trace::new(sample_rate_hz, channels, samples, t0_s)?;
    // without a meta file an event log may start inside the default window
    let baseline_window_s = match events.first() {
        Some(e) if baseline_window_s.1 > e.onset_s && !paths.meta_json.exists() => {
            (baseline_window_s.0.min(e.onset_s), e.onset_s)
        }
        _ => baseline_window_s,
    };
    let session = Session {
        trace,
        events,
        baseline_window_s,
        provenance,
        truth: has_truth.then_some(truth),
    };
    session.validate()?;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_trace() -> Trace {
        Trace::from_channels(400.0, 0.0, &[vec![0.0; 3], vec![1.0; 3], vec![2.0; 3], vec![3.0; 3]])
            .unwrap()
    }

    #[test]
    fn class_names_round_trip() {
        for c in StimulusClass::SURVEY {
            assert_eq!(c.name().parse::<StimulusClass>().unwrap(), c);
        }
        let p = StimulusClass::pair(StimulusClass::WhiteLight, StimulusClass::GreenLight);
        assert_eq!(p.name(), "white_light+green_light");
        assert_eq!(p.name().parse::<StimulusClass>().unwrap(), p);
        assert!("lava".parse::<StimulusClass>().is_err());
    }

    #[test]
    fn target_json_shape() {
        let e = StimulusEvent::new(StimulusClass::WhiteLight, 25.0, 1.0, 100.0)
            .with_target(Target::Wall(2));
        let j = serde_json::to_value(&e).unwrap();
        assert_eq!(j["target"], serde_json::json!({"wall": 2}));
        assert_eq!(j["class"], "white_light");
        assert!(j["loading_rate"].is_null());
        let a = serde_json::to_value(Target::angle(-90.0)).unwrap();
        assert_eq!(a, serde_json::json!({"angle_deg": 270.0}));
        let p = serde_json::to_value(Target::PosMm(12.5)).unwrap();
        assert_eq!(p, serde_json::json!({"pos_mm": 12.5}));
    }

    #[test]
    fn events_sorted_with_class_tiebreak() {
        let events = vec![
            StimulusEvent::new(StimulusClass::Touch, 30.0, 1.0, 1.0),
            StimulusEvent::new(StimulusClass::Pressure, 30.0, 1.0, 1.0),
            StimulusEvent::new(StimulusClass::Acetone, 25.0, 1.0, 1.0),
        ];
        let trace = Trace::from_channels(1.0, 0.0, &[vec![0.0; 100]]).unwrap();
        let s = Session::new(trace, events).unwrap();
        let names: Vec<_> = s.events.iter().map(|e| e.class.name()).collect();
        assert_eq!(names, ["acetone", "pressure", "touch"]);
    }

    #[test]
    fn rejects_invalid_fields() {
        let trace = Trace::from_channels(1.0, 0.0, &[vec![0.0; 100]]).unwrap();
        let e = StimulusEvent::new(StimulusClass::Touch, 30.0, -1.0, 1.0);
        assert!(matches!(
            Session::new(trace.clone(), vec![e]),
            Err(SessionError::InvalidEvent { field: "duration_s", .. })
        ));
        let e = StimulusEvent::new(StimulusClass::Touch, 30.0, 1.0, 1.0).with_target(Target::Wall(4));
        assert!(Session::new(trace.clone(), vec![e]).is_err());
        let e = StimulusEvent::new(StimulusClass::Touch, 10.0, 1.0, 1.0);
        assert!(matches!(
            Session::new(trace, vec![e]),
            Err(SessionError::InvalidSession(_))
        ));
        assert!(Trace::from_channels(0.0, 0.0, &[vec![0.0]]).is_err());
        assert!(Trace::from_channels(1.0, 0.0, &[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn slice_window_arithmetic() {
        let trace = Trace::from_channels(400.0, 0.0, &[vec![0.0; 400 * 60]]).unwrap();
        let events = vec![
            StimulusEvent::new(StimulusClass::Pressure, 20.0, 0.0, 1.0),
            StimulusEvent::new(StimulusClass::Pressure, 30.0, 1.0, 1.0),
        ];
        let s = Session::new(trace, events).unwrap();
        let w = slice_events(&s, 5.0, 10.0);
        assert_eq!(w.len(), 2);
        let win = &w[1].1;
        assert!((win.t0_s - 25.0).abs() < 1e-12);
        let end = win.time_at(win.n_samples() - 1);
        assert!((end - 41.0).abs() < 1e-12);
    }

    #[test]
    fn slice_clips_at_start() {
        let trace = Trace::from_channels(400.0, 0.0, &[vec![0.0; 400 * 20]]).unwrap();
        let e = StimulusEvent::new(StimulusClass::Touch, 2.0, 1.0, 1.0);
        let s = Session::with_baseline(trace, vec![e], (0.0, 1.0)).unwrap();
        let w = slice_events(&s, 5.0, 100.0);
        assert_eq!(w[0].1.t0_s, 0.0);
        assert_eq!(w[0].1.n_samples(), 400 * 20);
    }

    #[test]
    fn save_and_load_minimal() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::new(tiny_trace(), vec![]).unwrap();
        let paths = save_session(&s, &dir.path().join("tiny.csv")).unwrap();
        assert!(paths.trace_csv.exists() && paths.events_json.exists());
        let back = load_session(&paths.trace_csv).unwrap();
        assert_eq!(back.trace.samples.shape(), (3, 4));
        assert!(back.events.is_empty());
        assert_eq!(back.trace.channels, ["ch0", "ch1", "ch2", "ch3"]);
    }

    #[test]
    fn load_without_meta_infers_rate() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("raw.csv");
        std::fs::write(
            &csv,
            "time_s,a_mV,b_mV,c_mV,d_mV\n0.0,1,2,3,4\n0.0025,1,2,3,4\n0.005,1,2,3,4\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("raw.events.json"), "[]").unwrap();
        let s = load_session(&csv).unwrap();
        assert_eq!(s.trace.samples.shape(), (3, 4));
        assert!((s.trace.sample_rate_hz - 400.0).abs() < 1e-9);
        assert_eq!(s.trace.channels, ["a", "b", "c", "d"]);
    }

    #[test]
    fn short_row_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bad.csv");
        std::fs::write(
            &csv,
            "time_s,ch0_mV,ch1_mV,ch2_mV,ch3_mV\n0.0,1,2,3,4\n0.0025,1,2,3\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("bad.events.json"), "[]").unwrap();
        match load_session(&csv) {
            Err(SessionError::RowLength { row, expected, found, .. }) => {
                assert_eq!((row, expected, found), (3, 5, 4));
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_session(&dir.path().join("missing.csv")),
            Err(SessionError::Io { .. })
        ));
        let csv = dir.path().join("hdr.csv");
        std::fs::write(&csv, "t,ch0_mV\n0,1\n").unwrap();
        std::fs::write(dir.path().join("hdr.events.json"), "[]").unwrap();
        assert!(matches!(
            load_session(&csv),
            Err(SessionError::MalformedHeader { .. })
        ));
        std::fs::write(&csv, "time_s,ch0_mV\n0,1\n0.0025,NaN\n").unwrap();
        match load_session(&csv) {
            Err(SessionError::BadValue { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "ch0_mV");
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&csv, "time_s,ch0_mV\n0,1\n1,1\n").unwrap();
        std::fs::write(
            dir.path().join("hdr.events.json"),
            r#"[{"class":"touch","onset_s":5,"duration_s":1,"intensity":1,"loading_rate":null,"target":null},
               {"class":"touch","onset_s":3,"duration_s":1,"intensity":1,"loading_rate":null,"target":null}]"#,
        )
        .unwrap();
        assert!(matches!(
            load_session(&csv),
            Err(SessionError::UnsortedEvents { index: 1, .. })
        ));
    }

    #[test]
    fn pressure_event_json() {
        let dir = tempfile::tempdir().unwrap();
        let trace = Trace::from_channels(400.0, 0.0, &[vec![0.0; 400 * 30]]).unwrap();
        let s = Session::new(
            trace,
            vec![StimulusEvent::new(StimulusClass::Pressure, 22.0, 2.5, 40.0).with_loading_rate(2.0)],
        )
        .unwrap();
        let paths = save_session(&s, &dir.path().join("p")).unwrap();
        let j: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(paths.events_json).unwrap()).unwrap();
        assert_eq!(j[0]["class"], "pressure");
        assert_eq!(j[0]["onset_s"], 22.0);
        assert_eq!(j[0]["duration_s"], 2.5);
        assert_eq!(j[0]["loading_rate"], 2.0);
    }
}
