//! Baseline correction and smoothing applied ahead of feature extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::Trace;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("trace has no samples")]
    EmptyTrace,
    #[error("moving-mean window must be odd and positive, got {0}")]
    EvenWindow(usize),
    #[error("moving-mean window {window} exceeds trace length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("drift window holds {0} samples; need at least 2 distinct timestamps")]
    DegenerateWindow(usize),
}

/// Straight-line baseline fit of one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftFit {
    pub intercept_mv: f64,
    pub slope_mv_per_s: f64,
    pub r_squared: f64,
}

impl DriftFit {
    pub fn at(&self, t_s: f64) -> f64 {
        self.intercept_mv + self.slope_mv_per_s * t_s
    }
}

/// Median with the lower-middle convention for even lengths.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}

/// Subtract each channel's (lower) median.
pub fn center_median(trace: &Trace) -> Result<Trace, PreprocessError> {
    if trace.n_samples() == 0 {
        return Err(PreprocessError::EmptyTrace);
    }
    Ok(trace.map_channels(|ch| {
        let m = lower_median(ch).unwrap_or(0.0);
        ch.iter().map(|v| v - m).collect()
    }))
}

/// Centered moving average; near the edges the window shrinks symmetrically
/// so every output is the mean of a window centred on its own sample.
pub fn smooth_moving_mean(trace: &Trace, window_samples: usize) -> Result<Trace, PreprocessError> {
    if window_samples == 0 || window_samples.is_multiple_of(2) {
        return Err(PreprocessError::EvenWindow(window_samples));
    }
    if window_samples > trace.n_samples() {
        return Err(PreprocessError::WindowTooLarge {
            window: window_samples,
            len: trace.n_samples(),
        });
    }
    Ok(trace.map_channels(|ch| moving_mean(ch, window_samples)))
}

pub(crate) fn moving_mean(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = window / 2;
    if half == 0 {
        return x.to_vec();
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v;
        prefix.push(acc);
    }
    (0..n)
        .map(|i| {
            let k = half.min(i).min(n - 1 - i);
            if k == 0 {
                return x[i];
            }
            let (lo, hi) = (i - k, i + k + 1);
            let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            // constant runs stay exact despite prefix-sum rounding
            if x[lo..hi].iter().all(|&v| v == x[i]) {
                x[i]
            } else {
                mean
            }
        })
        .collect()
}

/// Ordinary least-squares line per channel over samples with time inside
/// `window` (inclusive, session time in seconds).
pub fn fit_linear_drift(trace: &Trace, window: (f64, f64)) -> Result<Vec<DriftFit>, PreprocessError> {
    let start = trace.index_at_or_after(window.0);
    let end = if trace.n_samples() == 0 {
        0
    } else {
        (trace.index_at_or_before(window.1) + 1).max(start)
    };
    let times: Vec<f64> = (start..end).map(|i| trace.time_at(i)).collect();
    (0..trace.n_channels())
        .map(|c| fit_line(&times, &trace.channel(c)[start..end]))
        .collect()
}

/// OLS line through `(t, y)` pairs.
pub fn fit_line(t: &[f64], y: &[f64]) -> Result<DriftFit, PreprocessError> {
    let n = t.len().min(y.len());
    if n < 2 {
        return Err(PreprocessError::DegenerateWindow(n));
    }
    let nf = n as f64;
    let t_mean = t[..n].iter().sum::<f64>() / nf;
    let y_mean = y[..n].iter().sum::<f64>() / nf;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for i in 0..n {
        let dt = t[i] - t_mean;
        stt += dt * dt;
        sty += dt * (y[i] - y_mean);
    }
    if stt <= 0.0 {
        return Err(PreprocessError::DegenerateWindow(n));
    }
    let slope = sty / stt;
    let intercept = y_mean - slope * t_mean;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..n {
        let r = y[i] - (intercept + slope * t[i]);
        ss_res += r * r;
        let d = y[i] - y_mean;
        ss_tot += d * d;
    }
    let r_squared = if ss_tot == 0.0 { 0.0 } else { 1.0 - ss_res / ss_tot };
    Ok(DriftFit {
        intercept_mv: intercept,
        slope_mv_per_s: slope,
        r_squared,
    })
}

/// Standard error of an OLS slope given the residual spread.
pub fn slope_standard_error(t: &[f64], y: &[f64], fit: &DriftFit) -> f64 {
    let n = t.len();
    if n < 3 {
        return f64::INFINITY;
    }
    let t_mean = t.iter().sum::<f64>() / n as f64;
    let stt: f64 = t.iter().map(|v| (v - t_mean).powi(2)).sum();
    let ss_res: f64 = t.iter().zip(y).map(|(ti, yi)| (yi - fit.at(*ti)).powi(2)).sum();
    (ss_res / (n - 2) as f64 / stt).sqrt()
}

/// Subtract a per-channel drift line evaluated at each sample time.
pub fn remove_drift(trace: &Trace, fits: &[DriftFit]) -> Trace {
    let mut out = trace.clone();
    for (c, fit) in fits.iter().enumerate().take(trace.n_channels()) {
        for r in 0..trace.n_samples() {
            out.samples[(r, c)] -= fit.at(trace.time_at(r));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(ch: Vec<f64>) -> Trace {
        Trace::from_channels(1.0, 0.0, &[ch]).unwrap()
    }

    #[test]
    fn median_centering() {
        assert_eq!(center_median(&one(vec![1.0, 2.0, 3.0])).unwrap().channel(0), [-1.0, 0.0, 1.0]);
        assert_eq!(center_median(&one(vec![5.0; 4])).unwrap().channel(0), [0.0; 4]);
        // a single spike does not move the centre
        assert_eq!(
            center_median(&one(vec![0.0, 0.0, 0.0, 100.0])).unwrap().channel(0),
            [0.0, 0.0, 0.0, 100.0]
        );
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert!(center_median(&one(vec![])).is_err());
    }

    #[test]
    fn moving_mean_cases() {
        let t = one(vec![0.0, 3.0, 0.0]);
        assert_eq!(smooth_moving_mean(&t, 3).unwrap().channel(0), [0.0, 1.0, 0.0]);
        let t = one(vec![1.5, -2.0, 7.0, 0.25]);
        assert_eq!(smooth_moving_mean(&t, 1).unwrap(), t);
        let c = one(vec![2.5; 50]);
        assert_eq!(smooth_moving_mean(&c, 21).unwrap(), c);
        assert_eq!(smooth_moving_mean(&c, 4), Err(PreprocessError::EvenWindow(4)));
        assert!(matches!(
            smooth_moving_mean(&c, 51),
            Err(PreprocessError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn exact_line_recovered() {
        let t: Vec<f64> = (0..2000).map(|i| i as f64 * 5.0).collect();
        let y: Vec<f64> = t.iter().map(|t| 3.17e-3 + 7.93e-7 * t).collect();
        let fit = fit_line(&t, &y).unwrap();
        assert!((fit.slope_mv_per_s - 7.93e-7).abs() < 1e-18);
        assert!((fit.intercept_mv - 3.17e-3).abs() < 1e-15);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_signal_convention() {
        let fit = fit_line(&[0.0, 1.0, 2.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(fit.slope_mv_per_s, 0.0);
        assert_eq!(fit.r_squared, 0.0);
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(fit_line(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn drift_over_window() {
        let data: Vec<f64> = (0..100).map(|i| 1.0 + 0.5 * i as f64).collect();
        let t = Trace::from_channels(2.0, 10.0, &[data]).unwrap();
        let fits = fit_linear_drift(&t, (10.0, 20.0)).unwrap();
        // value at index i is 1 + 0.5 i with t = 10 + i/2, so v = 1 + (t - 10)
        assert!((fits[0].slope_mv_per_s - 1.0).abs() < 1e-12);
        assert!((fits[0].intercept_mv + 9.0).abs() < 1e-9);
        let flat = remove_drift(&t, &fits);
        assert!(flat.channel(0).iter().all(|v| v.abs() < 1e-9));
    }

    proptest! {
        #[test]
        fn centering_is_idempotent(v in proptest::collection::vec(-100.0f64..100.0, 1..200)) {
            let once = center_median(&one(v)).unwrap();
            let twice = center_median(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn truncated_mean_drift_is_small(
            v in proptest::collection::vec(1.0f64..2.0, 110..400),
            half in 0usize..5,
        ) {
            let w = 2 * half + 1;
            prop_assume!(v.len() >= 10 * w);
            let t = one(v.clone());
            let s = smooth_moving_mean(&t, w).unwrap();
            let m0 = v.iter().sum::<f64>() / v.len() as f64;
            let m1 = s.channel(0).iter().sum::<f64>() / v.len() as f64;
            prop_assert!(((m1 - m0) / m0).abs() <= 0.01);
        }
    }
}
