//! Per-event transient descriptors, spectral bins and time-lag embeddings.

use std::f64::consts::{E, TAU};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::Trace;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no samples at or after onset {0} s")]
    NoPostOnsetSamples(f64),
    #[error("baseline sigma must be positive for every channel")]
    BadBaselineSigma,
    #[error("window of {len} samples is shorter than {bins} spectral bins")]
    TooFewSamples { len: usize, bins: usize },
    #[error("history of {history} steps needs more than {rows} rows")]
    HistoryTooLong { history: usize, rows: usize },
    #[error("bar count must be at least 1")]
    ZeroBarCount,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Onset detection threshold in baseline SDs.
    pub onset_threshold_sigma: f64,
    /// Window after detected onset for the initial-slope fit.
    pub slope_window_s: f64,
    pub n_spectral_bins: usize,
    /// Recovery constants shorter than this many sample periods are
    /// flagged as below resolution.
    pub tau_resolution_samples: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            onset_threshold_sigma: 3.0,
            slope_window_s: 0.5,
            n_spectral_bins: 32,
            tau_resolution_samples: 4.0,
        }
    }
}

/// Transient descriptors of one event on one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFeatures {
    /// Peak absolute deflection from the onset level.
    pub dv_max_mv: f64,
    /// Signed deflection at the peak.
    pub peak_mv: f64,
    pub peak_time_s: f64,
    pub snr_mean: f64,
    pub tau_1e_s: Option<f64>,
    /// True when the measured recovery is too fast for the sample rate.
    pub tau_below_resolution: bool,
    pub onset_lag_s: Option<f64>,
    pub initial_slope_mv_per_s: f64,
    pub spectral: Vec<f64>,
}

/// Features for each channel of `window`.
///
/// `onset_s` and `duration_s` are in session time; `baseline_sigma_mv`
/// holds one resting-noise SD per channel.
pub fn extract_event_features(
    window: &Trace,
    baseline_sigma_mv: &[f64],
    onset_s: f64,
    duration_s: f64,
    config: &FeatureConfig,
) -> Result<Vec<EventFeatures>, FeatureError> {
    if baseline_sigma_mv.len() < window.n_channels()
        || baseline_sigma_mv.iter().any(|s| !(*s > 0.0 && s.is_finite()))
    {
        return Err(FeatureError::BadBaselineSigma);
    }
    let start = window.index_at_or_after(onset_s);
    if start >= window.n_samples() {
        return Err(FeatureError::NoPostOnsetSamples(onset_s));
    }
    let fs = window.sample_rate_hz;
    let dt = 1.0 / fs;
    let on_end = window
        .index_at_or_before(onset_s + duration_s.max(0.0))
        .max(start);

    (0..window.n_channels())
        .map(|c| {
            let x = &window.channel(c)[start..];
            let sigma = baseline_sigma_mv[c];
            let v0 = x[0];
            let dev: Vec<f64> = x.iter().map(|v| v - v0).collect();

            let (peak_idx, peak) = dev
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (i, &v)| {
                    if v.abs() > bv.abs() {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                });
            let dv_max = peak.abs();

            // stimulus-on interval; instantaneous stimuli use the rise to peak
            let on_len = if on_end > start { on_end - start + 1 } else { peak_idx + 1 };
            let on = &dev[..on_len.min(dev.len())];
            let snr_mean = on.iter().map(|v| v.abs()).sum::<f64>() / on.len() as f64 / sigma;

            let threshold = config.onset_threshold_sigma * sigma;
            let onset_idx = dev.iter().position(|v| v.abs() > threshold);
            let onset_lag = onset_idx.map(|i| i as f64 * dt);

            let initial_slope = onset_idx.map_or(0.0, |i| {
                let n = ((config.slope_window_s * fs).round() as usize).max(2);
                let end = (i + n).min(dev.len());
                ls_slope(&dev[i..end], dt)
            });

            let tau_1e = if dv_max > 0.0 {
                let level = dv_max / E;
                dev[peak_idx..]
                    .iter()
                    .position(|v| v.abs() <= level)
                    .map(|k| {
                        if k == 0 {
                            return 0.0;
                        }
                        // linear interpolation between the bracketing samples
                        let a = dev[peak_idx + k - 1].abs();
                        let b = dev[peak_idx + k].abs();
                        let frac = if a > b { (a - level) / (a - b) } else { 1.0 };
                        (k as f64 - 1.0 + frac) * dt
                    })
                    .filter(|t| *t > 0.0)
            } else {
                None
            };
            let tau_below_resolution =
                tau_1e.is_some_and(|t| t < config.tau_resolution_samples * dt);

            let spectral = spectral_magnitudes(x, config.n_spectral_bins);
            Ok(EventFeatures {
                dv_max_mv: dv_max,
                peak_mv: peak,
                peak_time_s: peak_idx as f64 * dt,
                snr_mean,
                tau_1e_s: tau_1e,
                tau_below_resolution,
                onset_lag_s: onset_lag,
                initial_slope_mv_per_s: initial_slope,
                spectral,
            })
        })
        .collect()
}

/// Least-squares slope of uniformly spaced samples.
fn ls_slope(y: &[f64], dt: f64) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let t_mean = (n - 1) as f64 / 2.0;
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, v) in y.iter().enumerate() {
        let d = i as f64 - t_mean;
        num += d * (v - y_mean);
        den += d * d;
    }
    num / den / dt
}

/// Magnitudes of the full DFT of the mean-removed signal, normalized by
/// its length.
pub fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.iter().map(|z| z.norm() / n as f64).collect()
}

fn spectral_magnitudes(x: &[f64], n_bins: usize) -> Vec<f64> {
    let mut m = dft_magnitudes(x);
    m.truncate(n_bins);
    m.resize(n_bins, 0.0);
    m
}

/// Leading `n_bins` DFT magnitudes of each channel of `window`.
pub fn spectral_features(window: &Trace, n_bins: usize) -> Result<Vec<Vec<f64>>, FeatureError> {
    if window.n_samples() < n_bins {
        return Err(FeatureError::TooFewSamples {
            len: window.n_samples(),
            bins: n_bins,
        });
    }
    Ok((0..window.n_channels())
        .map(|c| spectral_magnitudes(window.channel(c), n_bins))
        .collect())
}

/// Concatenate each row with its `history_steps` predecessors, newest
/// first. The first `history_steps` rows have no full history and are
/// dropped.
pub fn lagged_embed(x: &DMatrix<f64>, history_steps: usize) -> Result<DMatrix<f64>, FeatureError> {
    let (rows, cols) = x.shape();
    if history_steps >= rows {
        return Err(FeatureError::HistoryTooLong {
            history: history_steps,
            rows,
        });
    }
    let out_rows = rows - history_steps;
    Ok(DMatrix::from_fn(out_rows, cols * (history_steps + 1), |r, j| {
        let lag = j / cols;
        x[(r + history_steps - lag, j % cols)]
    }))
}

/// `(n * rho) mod 2 pi` with `rho` given in degrees.
pub fn reduced_phase(angle_deg: f64, bar_count: u32) -> Result<f64, FeatureError> {
    if bar_count == 0 {
        return Err(FeatureError::ZeroBarCount);
    }
    let deg = (bar_count as f64 * angle_deg).rem_euclid(360.0);
    let rad = deg.to_radians();
    Ok(if rad >= TAU { 0.0 } else { rad })
}

/// Non-overlapping bin means: one row per bin of `bin_samples`, one
/// column per channel. A trailing partial bin is dropped.
pub fn binned_means(trace: &Trace, bin_samples: usize) -> DMatrix<f64> {
    let bin = bin_samples.max(1);
    let n_bins = trace.n_samples() / bin;
    DMatrix::from_fn(n_bins, trace.n_channels(), |r, c| {
        let ch = &trace.channel(c)[r * bin..(r + 1) * bin];
        ch.iter().sum::<f64>() / bin as f64
    })
}

/// One row of a feature export.
#[derive(Debug, Clone)]
pub struct FeatureRow<'a> {
    pub event_index: usize,
    pub class: String,
    pub channel: &'a str,
    pub features: &'a EventFeatures,
}

/// Write one CSV row per (event, channel).
pub fn write_feature_csv(path: &Path, rows: &[FeatureRow<'_>]) -> Result<(), FeatureError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n_bins = rows.first().map_or(0, |r| r.features.spectral.len());
    write!(
        w,
        "event,class,channel,dv_max_mV,peak_mV,peak_time_s,snr_mean,tau_1e_s,tau_below_resolution,onset_lag_s,initial_slope_mV_per_s"
    )?;
    for k in 0..n_bins {
        write!(w, ",spec{k}")?;
    }
    writeln!(w)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        let f = r.features;
        write!(
            w,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{:.6}",
            r.event_index,
            r.class,
            r.channel,
            f.dv_max_mv,
            f.peak_mv,
            f.peak_time_s,
            f.snr_mean,
            opt(f.tau_1e_s),
            f.tau_below_resolution,
            opt(f.onset_lag_s),
            f.initial_slope_mv_per_s,
        )?;
        for s in &f.spectral {
            write!(w, ",{s:.6e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{evoked_kernel, ResponseKernel};
    use std::f64::consts::PI;

    fn kernel_window(k: &ResponseKernel, len_s: f64) -> Trace {
        let fs = 400.0;
        let n = (len_s * fs) as usize;
        let data: Vec<f64> = (0..n).map(|i| evoked_kernel(k, i as f64 / fs)).collect();
        Trace::from_channels(fs, 0.0, &[data]).unwrap()
    }

    #[test]
    fn pressure_kernel_recovered() {
        let k = ResponseKernel::new(2.0, 1.8);
        let w = kernel_window(&k, 20.0);
        let f = &extract_event_features(&w, &[0.1], 0.0, 1.0, &FeatureConfig::default()).unwrap()[0];
        assert!((f.dv_max_mv - 2.0).abs() < 1e-9);
        assert!((f.tau_1e_s.unwrap() - 1.8).abs() <= 1.0 / 400.0);
        assert!(!f.tau_below_resolution);
        // 2 mV over a 0.18 s rise crosses 0.3 mV at sample 11
        assert!((f.onset_lag_s.unwrap() - 0.0275).abs() < 1e-12);
        assert!(f.initial_slope_mv_per_s > 0.0);
    }

    #[test]
    fn zero_window() {
        let w = Trace::from_channels(400.0, 0.0, &[vec![0.0; 800]]).unwrap();
        let f = &extract_event_features(&w, &[0.01], 0.0, 1.0, &FeatureConfig::default()).unwrap()[0];
        assert_eq!(f.dv_max_mv, 0.0);
        assert_eq!(f.snr_mean, 0.0);
        assert_eq!(f.tau_1e_s, None);
        assert_eq!(f.onset_lag_s, None);
    }

    #[test]
    fn slow_tar_spot_kernel() {
        let k = ResponseKernel::new(0.93, 81.0);
        let w = kernel_window(&k, 300.0);
        let f = &extract_event_features(&w, &[0.05], 0.0, 1.0, &FeatureConfig::default()).unwrap()[0];
        assert!((f.tau_1e_s.unwrap() - 81.0).abs() / 81.0 < 0.01);
    }

    #[test]
    fn fast_decay_flagged() {
        let k = ResponseKernel::new(0.8, 0.0032);
        let w = kernel_window(&k, 2.0);
        let f = &extract_event_features(&w, &[0.01], 0.0, 0.0, &FeatureConfig::default()).unwrap()[0];
        assert!(f.tau_below_resolution);
    }

    #[test]
    fn feature_errors() {
        let w = Trace::from_channels(400.0, 0.0, &[vec![0.0; 10]]).unwrap();
        let cfg = FeatureConfig::default();
        assert!(matches!(
            extract_event_features(&w, &[0.1], 1.0, 0.0, &cfg),
            Err(FeatureError::NoPostOnsetSamples(_))
        ));
        assert!(matches!(
            extract_event_features(&w, &[0.0], 0.0, 0.0, &cfg),
            Err(FeatureError::BadBaselineSigma)
        ));
    }

    #[test]
    fn spectral_cases() {
        let n = 256;
        let constant = Trace::from_channels(1.0, 0.0, &[vec![3.0; n]]).unwrap();
        assert!(spectral_features(&constant, 32).unwrap()[0].iter().all(|m| *m == 0.0));

        let k = 5;
        let sine: Vec<f64> = (0..n).map(|i| (2.0 * PI * k as f64 * i as f64 / n as f64).sin()).collect();
        let s = spectral_features(&Trace::from_channels(1.0, 0.0, &[sine]).unwrap(), 32).unwrap();
        for (b, m) in s[0].iter().enumerate() {
            if b == k {
                assert!((m - 0.5).abs() < 1e-12);
            } else {
                assert!(m.abs() < 1e-12);
            }
        }
        assert!(spectral_features(&constant, 300).is_err());
    }

    #[test]
    fn lag_embedding() {
        let x = DMatrix::from_fn(10, 4, |r, c| (r * 10 + c) as f64);
        assert_eq!(lagged_embed(&x, 0).unwrap(), x);
        assert_eq!(lagged_embed(&x, 8).unwrap().shape(), (2, 36));
        let three = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
        let e = lagged_embed(&three, 2).unwrap();
        assert_eq!(e.row(0).iter().cloned().collect::<Vec<_>>(), [20.0, 21.0, 10.0, 11.0, 0.0, 1.0]);
        assert!(lagged_embed(&three, 3).is_err());
    }

    #[test]
    fn reduced_phase_cases() {
        assert!((reduced_phase(90.0, 1).unwrap() - PI / 2.0).abs() < 1e-15);
        assert_eq!(reduced_phase(120.0, 3).unwrap(), 0.0);
        assert!((reduced_phase(270.0, 2).unwrap() - PI).abs() < 1e-15);
        assert!(reduced_phase(10.0, 0).is_err());
    }

    #[test]
    fn bin_means() {
        let t = Trace::from_channels(1.0, 0.0, &[(0..10).map(f64::from).collect()]).unwrap();
        let b = binned_means(&t, 3);
        assert_eq!(b.shape(), (3, 1));
        assert_eq!(b[(0, 0)], 1.0);
        assert_eq!(b[(2, 0)], 7.0);
    }
}
