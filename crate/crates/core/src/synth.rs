//! Forward simulator producing sessions with known ground truth.
//!
//! A synthesized channel is
//!
//! ```text
//! v(t) = intercept + drift * t + wander(t) + noise(t) + sum_events r_e(t)
//! ```
//!
//! where each event response `r_e` is a linear-rise / exponential-decay
//! transient, optionally followed by a sustained brightness plateau (Hill
//! calibrated) and a slow location-dependent component for spatially
//! targeted stimuli. All randomness derives from the session seed through
//! independent ChaCha streams, so output does not depend on thread count or
//! evaluation order.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{
    default_labels, Session, SessionError, StimulusClass, StimulusEvent, Target, Trace,
    DEFAULT_BASELINE_WINDOW_S, DEFAULT_SAMPLE_RATE_HZ,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no response kernel for stimulus class `{0}`")]
    UnknownClass(String),
    #[error("event at {onset_s} s lies beyond the {duration_s} s trace")]
    EventBeyondTrace { onset_s: f64, duration_s: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// Stimulus-evoked transient: zero until `onset_lag_s`, linear rise to
/// `dv_max_mv` over `rise_s`, then exponential recovery with `tau_1e_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseKernel {
    pub dv_max_mv: f64,
    pub tau_1e_s: f64,
    pub rise_s: f64,
    pub onset_lag_s: f64,
}

impl ResponseKernel {
    /// Kernel with the default rise time `max(0.05 s, tau / 10)` and no lag.
    pub fn new(dv_max_mv: f64, tau_1e_s: f64) -> Self {
        Self {
            dv_max_mv,
            tau_1e_s,
            rise_s: default_rise_s(tau_1e_s),
            onset_lag_s: 0.0,
        }
    }

    pub fn with_lag(mut self, onset_lag_s: f64) -> Self {
        self.onset_lag_s = onset_lag_s;
        self
    }

    pub fn peak_time_s(&self) -> f64 {
        self.onset_lag_s + self.rise_s
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.dv_max_mv.is_finite()
            && self.tau_1e_s.is_finite()
            && self.tau_1e_s > 0.0
            && self.rise_s >= 0.0
            && self.onset_lag_s >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidParameter(format!("kernel {self:?}")))
        }
    }

    pub fn eval(&self, t_s: f64) -> f64 {
        evoked_kernel(self, t_s)
    }
}

pub fn default_rise_s(tau_1e_s: f64) -> f64 {
    (tau_1e_s / 10.0).max(0.05)
}

/// Kernel value `t_s` seconds after stimulus onset.
pub fn evoked_kernel(kernel: &ResponseKernel, t_s: f64) -> f64 {
    let u = t_s - kernel.onset_lag_s;
    if u < 0.0 {
        return 0.0;
    }
    if u < kernel.rise_s {
        return kernel.dv_max_mv * u / kernel.rise_s;
    }
    kernel.dv_max_mv * (-(u - kernel.rise_s) / kernel.tau_1e_s).exp()
}

/// Per-class survey statistics (mean and SD across events).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveyRow {
    pub class: StimulusClass,
    pub dv_max_mv: f64,
    pub dv_max_sd: f64,
    pub snr_mean: f64,
    pub snr_sd: f64,
    pub tau_1e_s: f64,
    pub tau_sd: f64,
}

const fn row(
    class: StimulusClass,
    dv: f64,
    dv_sd: f64,
    snr: f64,
    snr_sd: f64,
    tau: f64,
    tau_sd: f64,
) -> SurveyRow {
    SurveyRow {
        class,
        dv_max_mv: dv,
        dv_max_sd: dv_sd,
        snr_mean: snr,
        snr_sd,
        tau_1e_s: tau,
        tau_sd,
    }
}

/// Measured response statistics for the fourteen survey stimuli.
pub static SURVEY_TABLE: [SurveyRow; 14] = [
    row(StimulusClass::Acetone, 0.27, 0.045, 1.3, 0.22, 0.0045, 0.0038),
    row(StimulusClass::IsopropylAlcohol, 0.060, 0.0075, 0.85, 0.21, 14.0, 1.8),
    row(StimulusClass::Co2, 0.025, 0.0050, 2.4, 0.43, 27.0, 0.52),
    row(StimulusClass::Smoke, 0.15, 0.072, 1.03, 0.49, 10.3, 17.3),
    row(StimulusClass::MapPro, 0.030, 0.016, 2.0, 1.1, 0.55, 0.053),
    row(StimulusClass::Propane, 0.075, 0.018, 1.8, 0.42, 40.0, 5.3),
    row(StimulusClass::Ir, 0.28, 0.10, 4.1, 1.5, 0.0058, 0.00054),
    row(StimulusClass::WhiteLight, 0.70, 0.18, 2.1, 1.1, 6.2, 0.88),
    row(StimulusClass::Uvb, 0.10, 0.030, 1.0, 0.30, 0.21, 0.19),
    row(StimulusClass::Uvc, 0.80, 0.011, 1.9, 0.26, 0.0032, 0.00091),
    row(StimulusClass::Pressure, 2.0, 1.3, 15.0, 11.0, 1.8, 0.23),
    row(StimulusClass::Touch, 0.060, 0.015, 1.8, 0.90, 4.7, 0.57),
    row(StimulusClass::Temperature, 0.080, 0.018, 1.8, 0.85, 39.0, 6.4),
    row(StimulusClass::TarSpot, 0.93, 0.15, 2.2, 0.36, 81.0, 55.0),
];

/// Conditions outside the survey table. Their kinetics are placeholders
/// chosen so the white/green pair is separable by shape.
static EXTRA_ROWS: [SurveyRow; 3] = [
    row(StimulusClass::GreenLight, 0.30, 0.08, 2.1, 1.1, 3.0, 0.5),
    row(StimulusClass::BlueLight, 0.50, 0.13, 2.1, 1.1, 4.0, 0.6),
    row(StimulusClass::Vacuum, 0.76, 0.50, 5.0, 3.0, 1.8, 0.23),
];

pub fn survey_row(class: &StimulusClass) -> Option<&'static SurveyRow> {
    SURVEY_TABLE
        .iter()
        .chain(EXTRA_ROWS.iter())
        .find(|r| &r.class == class)
}

/// Class → kernel lookup.
#[derive(Debug, Clone, Default)]
pub struct KernelBank {
    kernels: HashMap<StimulusClass, ResponseKernel>,
}

impl KernelBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Kernels built from the survey table (plus the extra optical and
    /// vacuum conditions), with default rise and zero lag.
    pub fn survey() -> Self {
        let mut bank = Self::new();
        for r in SURVEY_TABLE.iter().chain(EXTRA_ROWS.iter()) {
            bank.insert(r.class.clone(), ResponseKernel::new(r.dv_max_mv, r.tau_1e_s));
        }
        bank
    }

    pub fn insert(&mut self, class: StimulusClass, kernel: ResponseKernel) {
        self.kernels.insert(class, kernel);
    }

    pub fn with(mut self, class: StimulusClass, kernel: ResponseKernel) -> Self {
        self.insert(class, kernel);
        self
    }

    pub fn get(&self, class: &StimulusClass) -> Option<&ResponseKernel> {
        self.kernels.get(class)
    }

    fn require(&self, class: &StimulusClass) -> Result<ResponseKernel, SynthError> {
        self.get(class)
            .copied()
            .ok_or_else(|| SynthError::UnknownClass(class.name()))
    }
}

/// Resting baseline: affine drift plus white noise, with an optional
/// Ornstein–Uhlenbeck wander for slow resting-potential fluctuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub intercept_mv: f64,
    pub drift_mv_per_s: f64,
    pub noise_sigma_mv: f64,
    #[serde(default)]
    pub wander_sigma_mv: f64,
    #[serde(default = "default_wander_tau")]
    pub wander_tau_s: f64,
}

fn default_wander_tau() -> f64 {
    30.0
}

impl Default for BaselineModel {
    fn default() -> Self {
        Self {
            intercept_mv: 3.17e-3,
            drift_mv_per_s: 7.93e-7,
            noise_sigma_mv: 0.02,
            wander_sigma_mv: 0.0,
            wander_tau_s: default_wander_tau(),
        }
    }
}

impl BaselineModel {
    pub fn noiseless() -> Self {
        Self {
            noise_sigma_mv: 0.0,
            ..Self::default()
        }
    }

    /// Noise set to the class's peak over its mean SNR.
    pub fn for_class(class: &StimulusClass) -> Self {
        let sigma = survey_row(class).map_or(0.02, |r| r.dv_max_mv / r.snr_mean);
        Self {
            noise_sigma_mv: sigma,
            ..Self::default()
        }
    }

    /// Per-class noise when the plan holds a single (non-pair) class,
    /// otherwise the 0.02 mV default.
    pub fn for_plan(plan: &[StimulusEvent]) -> Self {
        match plan.first() {
            Some(first)
                if !matches!(first.class, StimulusClass::Pair(..))
                    && plan.iter().all(|e| e.class == first.class) =>
            {
                Self::for_class(&first.class)
            }
            _ => Self::default(),
        }
    }

    pub fn at(&self, t_s: f64) -> f64 {
        self.intercept_mv + self.drift_mv_per_s * t_s
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = self.noise_sigma_mv >= 0.0
            && self.wander_sigma_mv >= 0.0
            && self.wander_tau_s > 0.0
            && self.intercept_mv.is_finite()
            && self.drift_mv_per_s.is_finite();
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidParameter(format!("baseline {self:?}")))
        }
    }
}

/// Saturating intensity response `A l^n / (E^n + l^n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillResponse {
    pub amplitude_mv: f64,
    pub half_level: f64,
    pub exponent: f64,
}

impl HillResponse {
    /// Median tube calibration.
    pub const TUBE: HillResponse = HillResponse {
        amplitude_mv: 1.22,
        half_level: 5.40,
        exponent: 0.94,
    };

    /// Median flat-panel calibration.
    pub const PIXEL: HillResponse = HillResponse {
        amplitude_mv: 17.60,
        half_level: 115.64,
        exponent: 3.90,
    };

    pub fn eval(&self, level: f64) -> f64 {
        hill(self.amplitude_mv, self.half_level, self.exponent, level)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.amplitude_mv.is_finite() && self.half_level > 0.0 && self.exponent > 0.0 {
            Ok(())
        } else {
            Err(SynthError::InvalidParameter(format!("hill {self:?}")))
        }
    }
}

/// Hill function with `0^n = 0`.
pub fn hill(amplitude: f64, half_level: f64, exponent: f64, level: f64) -> f64 {
    if level <= 0.0 {
        return 0.0;
    }
    // ratio form avoids overflow of l^n for large exponents
    let r = (half_level / level).powf(exponent);
    amplitude / (1.0 + r)
}

/// Spatial structure of targeted responses: the stimulated channel gets
/// the active peak and slope, every other channel the inactive ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGainMap {
    pub active_peak_mv: f64,
    pub inactive_peak_mv: f64,
    pub active_slope_mv: f64,
    pub inactive_slope_mv: f64,
    pub slow_mod_tau_s: f64,
    pub slow_mod_gain: f64,
    pub active_lag_s: f64,
    pub inactive_lag_s: f64,
    pub lag_jitter_s: f64,
    /// Per-event, per-channel SD of the peak (mV, at active scale).
    pub peak_jitter_mv: f64,
    /// Per-event, per-channel SD of the initial slope (at active scale).
    pub slope_jitter_mv: f64,
}

impl Default for SpatialGainMap {
    fn default() -> Self {
        Self {
            active_peak_mv: 1.21,
            inactive_peak_mv: 0.34,
            active_slope_mv: 5.67,
            inactive_slope_mv: 3.32,
            slow_mod_tau_s: 3.0,
            slow_mod_gain: 0.1,
            active_lag_s: 0.161,
            inactive_lag_s: 0.232,
            lag_jitter_s: 0.05,
            peak_jitter_mv: 0.0,
            slope_jitter_mv: 0.0,
        }
    }
}

impl SpatialGainMap {
    /// Set the per-channel jitter so the paired active-minus-inactive
    /// difference has the given standardized effect sizes: with independent
    /// channel noise `s`, `d_z = diff / (s * sqrt 2)`.
    pub fn with_effect_sizes(mut self, d_peak: f64, d_slope: f64) -> Self {
        let sqrt2 = 2f64.sqrt();
        self.peak_jitter_mv = (self.active_peak_mv - self.inactive_peak_mv) / (d_peak * sqrt2);
        self.slope_jitter_mv = (self.active_slope_mv - self.inactive_slope_mv) / (d_slope * sqrt2);
        self
    }

    pub fn peak_ratio(&self, active: bool) -> f64 {
        if active {
            1.0
        } else {
            self.inactive_peak_mv / self.active_peak_mv
        }
    }

    pub fn slope_ratio(&self, active: bool) -> f64 {
        if active {
            1.0
        } else {
            self.inactive_slope_mv / self.active_slope_mv
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let gains = [
            self.active_peak_mv,
            self.inactive_peak_mv,
            self.active_slope_mv,
            self.inactive_slope_mv,
            self.slow_mod_gain,
            self.active_lag_s,
            self.inactive_lag_s,
            self.lag_jitter_s,
            self.peak_jitter_mv,
            self.slope_jitter_mv,
        ];
        if gains.iter().all(|g| g.is_finite() && *g >= 0.0)
            && self.slow_mod_tau_s > 0.0
            && self.active_peak_mv > 0.0
            && self.active_slope_mv > 0.0
        {
            Ok(())
        } else {
            Err(SynthError::InvalidParameter(format!("gains {self:?}")))
        }
    }
}

/// Everything `synth_session` needs besides the plan and seed.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub sample_rate_hz: f64,
    pub n_channels: usize,
    pub duration_s: f64,
    pub kernels: KernelBank,
    pub baseline: BaselineModel,
    pub gains: SpatialGainMap,
    pub hill: Option<HillResponse>,
    /// Coupling of the two components of `Pair` events.
    pub pair_coupling: f64,
    /// Per-event multiplicative amplitude variability (SD / mean).
    pub amplitude_cv: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            n_channels: 4,
            duration_s: 120.0,
            kernels: KernelBank::survey(),
            baseline: BaselineModel::default(),
            gains: SpatialGainMap::default(),
            hill: None,
            pair_coupling: 0.0,
            amplitude_cv: 0.0,
        }
    }
}

// Random stream identifiers.
const STREAM_NOISE: u64 = 1 << 32;
const STREAM_WANDER: u64 = 2 << 32;
const STREAM_EVENT: u64 = 3 << 32;

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// FNV-1a, used to key per-event streams by class name.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Realized per-channel response shape of one event component.
#[derive(Debug, Clone, Copy)]
struct ChannelResponse {
    kernel: ResponseKernel,
    plateau_mv: f64,
    plateau_tau_s: f64,
    slow_mv: f64,
    slow_tau_s: f64,
}

impl ChannelResponse {
    fn eval(&self, u: f64, duration_s: f64) -> f64 {
        let mut v = self.kernel.eval(u);
        let since_lag = u - self.kernel.onset_lag_s;
        if self.plateau_mv != 0.0 && since_lag > 0.0 {
            let tau = self.plateau_tau_s;
            v += if since_lag <= duration_s {
                self.plateau_mv * (1.0 - (-since_lag / tau).exp())
            } else {
                self.plateau_mv
                    * (1.0 - (-duration_s / tau).exp())
                    * (-(since_lag - duration_s) / tau).exp()
            };
        }
        if self.slow_mv != 0.0 {
            let s = u - self.kernel.peak_time_s();
            if s > 0.0 {
                let x = s / self.slow_tau_s;
                v += self.slow_mv * x * (1.0 - x).exp();
            }
        }
        v
    }

    /// Time after onset beyond which the response is numerically zero.
    fn support_s(&self, duration_s: f64) -> f64 {
        let mut end = self.kernel.peak_time_s() + 40.0 * self.kernel.tau_1e_s;
        if self.plateau_mv != 0.0 {
            end = end.max(self.kernel.onset_lag_s + duration_s + 40.0 * self.plateau_tau_s);
        }
        if self.slow_mv != 0.0 {
            end = end.max(self.kernel.peak_time_s() + 60.0 * self.slow_tau_s);
        }
        end
    }
}

fn channel_responses(
    event: &StimulusEvent,
    class: &StimulusClass,
    base: ResponseKernel,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Vec<ChannelResponse> {
    let g = &params.gains;
    let dt = 1.0 / params.sample_rate_hz;
    let scale = if params.amplitude_cv > 0.0 {
        1.0 + params.amplitude_cv * normal(rng)
    } else {
        1.0
    };
    let plateau_mv = match (&params.hill, class.is_brightness()) {
        (Some(h), true) => h.eval(event.intensity),
        _ => 0.0,
    };
    let target = event.target.as_ref().and_then(Target::channel_index);
    (0..params.n_channels)
        .map(|c| {
            let Some(k) = target else {
                return ChannelResponse {
                    kernel: ResponseKernel {
                        dv_max_mv: base.dv_max_mv * scale,
                        ..base
                    },
                    plateau_mv: plateau_mv * scale,
                    plateau_tau_s: base.tau_1e_s,
                    slow_mv: 0.0,
                    slow_tau_s: g.slow_mod_tau_s,
                };
            };
            let active = c == k;
            let peak_gain =
                g.peak_ratio(active) + g.peak_jitter_mv / g.active_peak_mv * normal(rng);
            let slope_gain =
                g.slope_ratio(active) + g.slope_jitter_mv / g.active_slope_mv * normal(rng);
            let mean_lag = if active { g.active_lag_s } else { g.inactive_lag_s };
            let lag = (mean_lag + g.lag_jitter_s * normal(rng)).max(0.0);
            // rise follows from the realized peak and slope ratios
            let rise = if slope_gain.abs() > 1e-6 {
                (base.rise_s * (peak_gain / slope_gain).abs()).clamp(dt, 5.0 * base.rise_s.max(dt))
            } else {
                5.0 * base.rise_s.max(dt)
            };
            let angle = 2.0 * PI * (c as f64 - k as f64) / params.n_channels as f64;
            ChannelResponse {
                kernel: ResponseKernel {
                    dv_max_mv: base.dv_max_mv * scale * peak_gain,
                    tau_1e_s: base.tau_1e_s,
                    rise_s: rise,
                    onset_lag_s: base.onset_lag_s + lag,
                },
                plateau_mv: plateau_mv * scale * peak_gain,
                plateau_tau_s: base.tau_1e_s,
                slow_mv: g.slow_mod_gain * base.dv_max_mv * scale * angle.cos(),
                slow_tau_s: g.slow_mod_tau_s,
            }
        })
        .collect()
}

/// Add the noise-free response of one event to `signal` (one column per
/// channel).
fn add_event(
    signal: &mut DMatrix<f64>,
    event: &StimulusEvent,
    index: usize,
    params: &SynthParams,
    seed: u64,
) -> Result<(), SynthError> {
    let components: Vec<StimulusClass> = match &event.class {
        StimulusClass::Pair(a, b) => vec![(**a).clone(), (**b).clone()],
        c => vec![c.clone()],
    };
    let mut per_component = Vec::with_capacity(components.len());
    for class in &components {
        let base = params.kernels.require(class)?;
        let stream = STREAM_EVENT ^ (fnv1a(&class.name()) << 20) ^ index as u64;
        let mut rng = rng_stream(seed, stream);
        per_component.push(channel_responses(event, class, base, params, &mut rng));
    }

    let fs = params.sample_rate_hz;
    let n = signal.nrows();
    let start = ((event.onset_s * fs) - 1e-9).ceil().max(0.0) as usize;
    for c in 0..params.n_channels {
        let support = per_component
            .iter()
            .map(|r| r[c].support_s(event.duration_s))
            .fold(0.0, f64::max);
        let end = (((event.onset_s + support) * fs).ceil() as usize + 1).min(n);
        for i in start..end {
            let u = i as f64 / fs - event.onset_s;
            let v = match per_component.as_slice() {
                [a] => a[c].eval(u, event.duration_s),
                [a, b] => couple(
                    a[c].eval(u, event.duration_s),
                    b[c].eval(u, event.duration_s),
                    params.pair_coupling,
                ),
                _ => unreachable!(),
            };
            signal[(i, c)] += v;
        }
    }
    Ok(())
}

/// Saturating interaction of two simultaneous responses.
pub fn couple(a: f64, b: f64, coupling: f64) -> f64 {
    a + b - coupling * a.abs().min(b.abs()) * a.signum() * f64::from(a != 0.0)
}

fn add_baseline(
    signal: &mut DMatrix<f64>,
    baseline: &BaselineModel,
    fs: f64,
    seed: u64,
) {
    let (n, n_ch) = signal.shape();
    let dt = 1.0 / fs;
    for c in 0..n_ch {
        let mut noise = rng_stream(seed, STREAM_NOISE + c as u64);
        let mut wander_rng = rng_stream(seed, STREAM_WANDER + c as u64);
        let phi = (-dt / baseline.wander_tau_s).exp();
        let innov = baseline.wander_sigma_mv * (1.0 - phi * phi).sqrt();
        let mut wander = if baseline.wander_sigma_mv > 0.0 {
            baseline.wander_sigma_mv * normal(&mut wander_rng)
        } else {
            0.0
        };
        for i in 0..n {
            let mut v = baseline.at(i as f64 / fs);
            if baseline.wander_sigma_mv > 0.0 {
                v += wander;
                wander = phi * wander + innov * normal(&mut wander_rng);
            }
            if baseline.noise_sigma_mv > 0.0 {
                v += baseline.noise_sigma_mv * normal(&mut noise);
            }
            signal[(i, c)] += v;
        }
    }
}

/// Simulate a session from a stimulus plan.
pub fn synth_session(
    plan: &[StimulusEvent],
    params: &SynthParams,
    seed: u64,
) -> Result<Session, SynthError> {
    params.baseline.validate()?;
    params.gains.validate()?;
    if let Some(h) = &params.hill {
        h.validate()?;
    }
    if !(params.sample_rate_hz > 0.0 && params.duration_s > 0.0 && params.n_channels > 0) {
        return Err(SynthError::InvalidParameter(
            "sample rate, duration and channel count must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&params.pair_coupling) {
        return Err(SynthError::InvalidParameter(format!(
            "pair coupling {} outside [0, 1]",
            params.pair_coupling
        )));
    }
    for e in plan {
        if !(e.onset_s >= 0.0 && e.onset_s < params.duration_s) {
            return Err(SynthError::EventBeyondTrace {
                onset_s: e.onset_s,
                duration_s: params.duration_s,
            });
        }
        match &e.class {
            StimulusClass::Pair(a, b) => {
                params.kernels.require(a)?.validate()?;
                params.kernels.require(b)?.validate()?;
            }
            c => params.kernels.require(c)?.validate()?,
        }
    }

    let n = (params.duration_s * params.sample_rate_hz).round() as usize;
    let mut signal = DMatrix::zeros(n, params.n_channels);
    let mut events = plan.to_vec();
    events.sort_by(crate::session::event_order);
    for (i, e) in events.iter().enumerate() {
        add_event(&mut signal, e, i, params, seed)?;
    }
    add_baseline(&mut signal, &params.baseline, params.sample_rate_hz, seed);

    let trace = Trace::new(
        params.sample_rate_hz,
        default_labels(params.n_channels),
        signal,
        0.0,
    )?;
    let first_onset = events.first().map_or(f64::INFINITY, |e| e.onset_s);
    let window = (0.0, DEFAULT_BASELINE_WINDOW_S.1.min(first_onset));
    let mut session = Session::with_baseline(trace, events, window)?;
    session.provenance.insert("generator".into(), "synth_session".into());
    session.provenance.insert("seed".into(), seed.to_string());
    Ok(session)
}

/// Parameters for a two-stimulus trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTrial {
    pub onset_s: f64,
    pub duration_s: f64,
    pub intensity: f64,
}

impl Default for PairTrial {
    fn default() -> Self {
        Self {
            onset_s: 20.0,
            duration_s: 5.0,
            intensity: 100.0,
        }
    }
}

/// Session holding one simultaneous `class_a + class_b` event.
pub fn synth_pair(
    class_a: &StimulusClass,
    class_b: &StimulusClass,
    coupling: f64,
    params: &SynthParams,
    trial: PairTrial,
    seed: u64,
) -> Result<Session, SynthError> {
    let event = StimulusEvent::new(
        StimulusClass::pair(class_a.clone(), class_b.clone()),
        trial.onset_s,
        trial.duration_s,
        trial.intensity,
    );
    let params = SynthParams {
        pair_coupling: coupling,
        ..params.clone()
    };
    synth_session(&[event], &params, seed)
}

/// Single-stimulus session matching one component of [`synth_pair`].
pub fn synth_single(
    class: &StimulusClass,
    params: &SynthParams,
    trial: PairTrial,
    seed: u64,
) -> Result<Session, SynthError> {
    let event = StimulusEvent::new(class.clone(), trial.onset_s, trial.duration_s, trial.intensity);
    synth_session(&[event], params, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    RotatingBar,
    TranslatingBar,
}

/// A moving light bar. Rotating bars move at `speed` deg/s around the four
/// tube walls; translating bars move at `speed` px/s across the panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionStimulus {
    pub kind: MotionKind,
    pub speed: f64,
    pub bar_count: u8,
    pub px_to_mm: f64,
    pub duration_s: f64,
}

impl MotionStimulus {
    pub fn rotating(speed_deg_s: f64, bar_count: u8, duration_s: f64) -> Self {
        Self {
            kind: MotionKind::RotatingBar,
            speed: speed_deg_s,
            bar_count,
            px_to_mm: 1.0,
            duration_s,
        }
    }

    pub fn translating(speed_px_s: f64, px_to_mm: f64, duration_s: f64) -> Self {
        Self {
            kind: MotionKind::TranslatingBar,
            speed: speed_px_s,
            bar_count: 1,
            px_to_mm,
            duration_s,
        }
    }

    /// Fundamental drive frequency in Hz (rotating bars).
    pub fn fundamental_hz(&self, panel_width_px: f64) -> f64 {
        match self.kind {
            MotionKind::RotatingBar => self.bar_count as f64 * self.speed / 360.0,
            MotionKind::TranslatingBar => self.speed / panel_width_px,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.speed > 0.0
            && (1..=4).contains(&self.bar_count)
            && self.duration_s > 0.0
            && self.px_to_mm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidParameter(format!("motion {self:?}")))
        }
    }
}

/// How a channel turns its illumination drive into voltage: a first-order
/// high-pass (transient recovery) followed by a first-order low-pass
/// (entrainment lag).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionResponse {
    pub sample_rate_hz: f64,
    pub highpass_tau_s: f64,
    pub lowpass_tau_s: f64,
    pub panel_width_px: f64,
    pub bar_sigma_px: f64,
}

impl MotionResponse {
    /// Tube: recovery at the white-light time constant, lag at the slow
    /// spatial time constant.
    pub fn tube(gains: &SpatialGainMap) -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            highpass_tau_s: survey_row(&StimulusClass::WhiteLight).map_or(6.2, |r| r.tau_1e_s),
            lowpass_tau_s: gains.slow_mod_tau_s,
            panel_width_px: 128.0,
            bar_sigma_px: 16.0,
        }
    }

    /// Panel: faster sub-second dynamics.
    pub fn pixel() -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            highpass_tau_s: 2.0,
            lowpass_tau_s: 0.25,
            panel_width_px: 128.0,
            bar_sigma_px: 16.0,
        }
    }

    pub fn for_kind(kind: MotionKind, gains: &SpatialGainMap) -> Self {
        match kind {
            MotionKind::RotatingBar => Self::tube(gains),
            MotionKind::TranslatingBar => Self::pixel(),
        }
    }

    /// Centres of the four panel pixels.
    pub fn pixel_centers_px(&self) -> [f64; 4] {
        let w = self.panel_width_px / 4.0;
        [0.5 * w, 1.5 * w, 2.5 * w, 3.5 * w]
    }
}

/// Bar angle (deg, unwrapped) at time `t_s`.
pub fn rotating_angle_deg(stim: &MotionStimulus, t_s: f64) -> f64 {
    stim.speed * t_s
}

/// Raised-cosine illumination of wall `wall` (of 4) by `n` equally spaced
/// bars at angle `rho_deg`.
pub fn wall_drive(rho_deg: f64, bar_count: u8, wall: usize) -> f64 {
    let theta = 90.0 * wall as f64;
    let phase = (bar_count as f64 * (rho_deg - theta)).to_radians();
    0.5 * (1.0 + phase.cos())
}

/// Bar position in px at time `t_s`; the bar re-enters at the left edge
/// after crossing the panel.
pub fn translating_position_px(stim: &MotionStimulus, resp: &MotionResponse, t_s: f64) -> f64 {
    (stim.speed * t_s).rem_euclid(resp.panel_width_px)
}

fn band_pass(x: &[f64], dt: f64, hp_tau: f64, lp_tau: f64) -> Vec<f64> {
    let a = hp_tau / (hp_tau + dt);
    let b = dt / (lp_tau + dt);
    let mut prev_x = 0.0;
    let mut hp = 0.0;
    let mut lp = 0.0;
    x.iter()
        .map(|&xi| {
            hp = a * (hp + xi - prev_x);
            prev_x = xi;
            lp += b * (hp - lp);
            lp
        })
        .collect()
}

/// Moving-bar session with per-sample ground truth (bar angle in degrees
/// for rotating bars, position in mm for translating bars).
pub fn synth_motion(
    stim: &MotionStimulus,
    gains: &SpatialGainMap,
    baseline: &BaselineModel,
    seed: u64,
) -> Result<Session, SynthError> {
    synth_motion_with(stim, &MotionResponse::for_kind(stim.kind, gains), gains, baseline, seed)
}

pub fn synth_motion_with(
    stim: &MotionStimulus,
    resp: &MotionResponse,
    gains: &SpatialGainMap,
    baseline: &BaselineModel,
    seed: u64,
) -> Result<Session, SynthError> {
    stim.validate()?;
    gains.validate()?;
    baseline.validate()?;
    let fs = resp.sample_rate_hz;
    let dt = 1.0 / fs;
    let n = (stim.duration_s * fs).round() as usize;
    let n_ch = 4;

    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let (drives, truth): (Vec<Vec<f64>>, Vec<f64>) = match stim.kind {
        MotionKind::RotatingBar => {
            let rho: Vec<f64> = times.iter().map(|&t| rotating_angle_deg(stim, t)).collect();
            let drives = (0..n_ch)
                .map(|c| rho.iter().map(|&r| wall_drive(r, stim.bar_count, c)).collect())
                .collect();
            let truth = rho.iter().map(|&r| crate::session::normalize_deg(r)).collect();
            (drives, truth)
        }
        MotionKind::TranslatingBar => {
            let x: Vec<f64> = times
                .iter()
                .map(|&t| translating_position_px(stim, resp, t))
                .collect();
            let centers = resp.pixel_centers_px();
            let s2 = 2.0 * resp.bar_sigma_px * resp.bar_sigma_px;
            let drives = centers
                .iter()
                .map(|&xc| x.iter().map(|&xi| (-(xi - xc).powi(2) / s2).exp()).collect())
                .collect();
            let truth = x.iter().map(|&xi| xi * stim.px_to_mm).collect();
            (drives, truth)
        }
    };

    // stimulated channel at the active gain, common mode at the inactive one
    let common: Vec<f64> = (0..n)
        .map(|i| drives.iter().map(|d| d[i]).sum::<f64>() / n_ch as f64)
        .collect();
    let mut signal = DMatrix::zeros(n, n_ch);
    for (c, d) in drives.iter().enumerate() {
        let input: Vec<f64> = d
            .iter()
            .zip(&common)
            .map(|(&di, &ci)| (gains.active_peak_mv - gains.inactive_peak_mv) * di + gains.inactive_peak_mv * ci)
            .collect();
        let out = band_pass(&input, dt, resp.highpass_tau_s, resp.lowpass_tau_s);
        signal.set_column(c, &nalgebra::DVector::from_vec(out));
    }
    add_baseline(&mut signal, baseline, fs, seed);

    let trace = Trace::new(fs, default_labels(n_ch), signal, 0.0)?;
    let event = StimulusEvent::new(StimulusClass::WhiteLight, 0.0, stim.duration_s, 100.0);
    let mut session = Session::with_baseline(trace, vec![event], (0.0, 0.0))?.with_truth(truth)?;
    let kind = match stim.kind {
        MotionKind::RotatingBar => "rotating-bar",
        MotionKind::TranslatingBar => "translating-bar",
    };
    session.provenance.insert("generator".into(), format!("synth_motion/{kind}"));
    session.provenance.insert("seed".into(), seed.to_string());
    session.provenance.insert("speed".into(), stim.speed.to_string());
    session.provenance.insert("bar_count".into(), stim.bar_count.to_string());
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_params(duration_s: f64) -> SynthParams {
        SynthParams {
            duration_s,
            baseline: BaselineModel::noiseless(),
            ..SynthParams::default()
        }
    }

    #[test]
    fn kernel_shape() {
        let k = ResponseKernel {
            dv_max_mv: 2.0,
            tau_1e_s: 1.8,
            rise_s: 0.18,
            onset_lag_s: 0.1,
        };
        assert_eq!(evoked_kernel(&k, 0.05), 0.0);
        assert_eq!(evoked_kernel(&k, -3.0), 0.0);
        assert_eq!(evoked_kernel(&k, 0.1 + 0.18), 2.0);
        let at_tau = evoked_kernel(&k, 0.1 + 0.18 + 1.8);
        assert!((at_tau - 2.0 / std::f64::consts::E).abs() < 1e-12);
        assert!((evoked_kernel(&k, 0.19) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_rise_rule() {
        assert_eq!(ResponseKernel::new(1.0, 0.2).rise_s, 0.05);
        assert!((ResponseKernel::new(1.0, 6.2).rise_s - 0.62).abs() < 1e-15);
    }

    #[test]
    fn empty_plan_is_affine() {
        let p = noiseless_params(30.0);
        let s = synth_session(&[], &p, 3).unwrap();
        for c in 0..4 {
            for (i, v) in s.trace.channel(c).iter().enumerate() {
                assert_eq!(*v, p.baseline.at(i as f64 / 400.0));
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let p = SynthParams {
            gains: SpatialGainMap::default().with_effect_sizes(1.16, 1.31),
            baseline: BaselineModel {
                wander_sigma_mv: 0.05,
                ..BaselineModel::default()
            },
            amplitude_cv: 0.2,
            duration_s: 60.0,
            ..SynthParams::default()
        };
        let plan = vec![
            StimulusEvent::new(StimulusClass::WhiteLight, 25.0, 5.0, 80.0).with_target(Target::Wall(1)),
            StimulusEvent::new(StimulusClass::Pressure, 40.0, 1.0, 30.0),
        ];
        let a = synth_session(&plan, &p, 11).unwrap();
        let b = synth_session(&plan, &p, 11).unwrap();
        assert_eq!(a, b);
        let c = synth_session(&plan, &p, 12).unwrap();
        assert_ne!(a.trace.samples, c.trace.samples);
    }

    #[test]
    fn errors() {
        let p = noiseless_params(30.0);
        let late = StimulusEvent::new(StimulusClass::Touch, 31.0, 1.0, 1.0);
        assert!(matches!(
            synth_session(&[late], &p, 0),
            Err(SynthError::EventBeyondTrace { .. })
        ));
        let bank = KernelBank::new().with(StimulusClass::Touch, ResponseKernel::new(1.0, 1.0));
        let p = SynthParams { kernels: bank, ..p };
        let e = StimulusEvent::new(StimulusClass::Smoke, 21.0, 1.0, 1.0);
        assert!(matches!(synth_session(&[e], &p, 0), Err(SynthError::UnknownClass(_))));
    }

    #[test]
    fn targeted_peak_follows_gain_ratio() {
        let mut p = noiseless_params(60.0);
        p.gains.slow_mod_gain = 0.0;
        p.gains.lag_jitter_s = 0.0;
        let k = ResponseKernel::new(1.21, 0.5);
        p.kernels.insert(StimulusClass::Touch, k);
        let e = StimulusEvent::new(StimulusClass::Touch, 25.0, 0.0, 1.0).with_target(Target::Wall(2));
        let s = synth_session(&[e], &p, 5).unwrap();
        for c in 0..4 {
            let peak = s
                .trace
                .channel(c)
                .iter()
                .enumerate()
                .map(|(i, v)| v - p.baseline.at(i as f64 / 400.0))
                .fold(f64::MIN, f64::max);
            let want = 1.21 * p.gains.peak_ratio(c == 2);
            // one sample of slope at the peak
            let tol = want / (k.rise_s * p.gains.peak_ratio(c == 2) / p.gains.slope_ratio(c == 2)) / 400.0;
            assert!((peak - want).abs() <= tol, "channel {c}: {peak} vs {want}");
        }
    }

    #[test]
    fn coupling_law() {
        assert_eq!(couple(1.0, 0.5, 0.0), 1.5);
        assert_eq!(couple(1.0, 1.0, 1.0), 1.0);
        assert_eq!(couple(-1.0, 0.5, 0.5), -1.0 + 0.5 + 0.25);
        assert_eq!(couple(0.0, 0.5, 1.0), 0.5);
    }

    #[test]
    fn pair_superposition_at_zero_coupling() {
        let p = noiseless_params(60.0);
        let trial = PairTrial::default();
        let (a, b) = (StimulusClass::WhiteLight, StimulusClass::GreenLight);
        let pair = synth_pair(&a, &b, 0.0, &p, trial, 9).unwrap();
        let sa = synth_single(&a, &p, trial, 9).unwrap();
        let sb = synth_single(&b, &p, trial, 9).unwrap();
        for i in 0..pair.trace.n_samples() {
            let base = p.baseline.at(i as f64 / 400.0);
            for c in 0..4 {
                let lhs = pair.trace.samples[(i, c)] - base;
                let rhs = sa.trace.samples[(i, c)] + sb.trace.samples[(i, c)] - 2.0 * base;
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_pair_fully_occludes() {
        let p = noiseless_params(60.0);
        let trial = PairTrial::default();
        let w = StimulusClass::WhiteLight;
        let pair = synth_pair(&w, &w, 1.0, &p, trial, 1).unwrap();
        let single = synth_single(&w, &p, trial, 1).unwrap();
        let peak = |s: &Session| s.trace.channel(0).iter().cloned().fold(f64::MIN, f64::max);
        assert!((peak(&pair) - peak(&single)).abs() < 1e-12);
    }

    #[test]
    fn rotating_geometry() {
        let one_bar = MotionStimulus::rotating(6.0, 1, 120.0);
        assert!((1.0 / one_bar.fundamental_hz(64.0) - 60.0).abs() < 1e-12);
        let three = MotionStimulus::rotating(6.0, 3, 120.0);
        assert!((1.0 / three.fundamental_hz(64.0) - 20.0).abs() < 1e-12);
        // walls lag each other by 90 degrees of bar travel
        for rho in [0.0, 13.0, 200.0] {
            for c in 0..3 {
                let a = wall_drive(rho, 1, c);
                let b = wall_drive(rho + 90.0, 1, c + 1);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn translating_truth_is_linear() {
        let stim = MotionStimulus::translating(10.0, 1.0, 10.0);
        let s = synth_motion(&stim, &SpatialGainMap::default(), &BaselineModel::noiseless(), 0).unwrap();
        let truth = s.truth.as_ref().unwrap();
        assert_eq!(truth[0], 0.0);
        let last = *truth.last().unwrap();
        assert!((last - 100.0).abs() <= 10.0 / 400.0 + 1e-9);
        for w in truth.windows(2) {
            assert!((w[1] - w[0] - 10.0 / 400.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_motion() {
        let g = SpatialGainMap::default();
        let b = BaselineModel::noiseless();
        assert!(synth_motion(&MotionStimulus::rotating(0.0, 1, 10.0), &g, &b, 0).is_err());
        assert!(synth_motion(&MotionStimulus::rotating(6.0, 5, 10.0), &g, &b, 0).is_err());
    }
}
