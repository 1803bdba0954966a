//! Grouped one-hot ridge classification shared by the static experiments.

use mindkit_core::decode::{
    classification_metrics, classify, default_lambda_grid, one_hot, ridge_fit_design, select_lambda,
    ClassificationMetrics, ConfusionMatrix, RidgeOptions,
};
use mindkit_core::preprocess::smooth_moving_mean;
use mindkit_core::Trace;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{mean, ExperimentError};
use crate::report::{Check, Summary};

/// Held-out predictions, one per row, and the lambda used for each test group.
#[derive(Debug, Clone)]
pub struct Grouped {
    pub predictions: Vec<usize>,
    pub lambdas: Vec<f64>,
}

pub fn take_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

/// How class scores are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// One-hot targets, argmax over class scores.
    OneHot,
    /// Scalar regression on the class index, rounded to the nearest class.
    /// Avoids masking of middle classes along a single ordered axis.
    Ordinal,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "onehot" => Some(Scheme::OneHot),
            "ordinal" => Some(Scheme::Ordinal),
            _ => None,
        }
    }
}

/// Leave one outer group out; lambda chosen on the training rows by
/// cross-validation over `inner` groups (or fixed).
#[allow(clippy::too_many_arguments)]
pub fn leave_one_group_out(
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    outer: &[usize],
    inner: &[usize],
    lambda: Option<f64>,
    balance: bool,
    scheme: Scheme,
) -> Result<Grouped, ExperimentError> {
    let y = match scheme {
        Scheme::OneHot => one_hot(labels, n_classes)?,
        Scheme::Ordinal => DMatrix::from_fn(labels.len(), 1, |r, _| labels[r] as f64),
    };
    let mut groups: Vec<usize> = outer.to_vec();
    groups.sort_unstable();
    groups.dedup();
    let grid = default_lambda_grid();
    let folds: Vec<(Vec<usize>, Vec<usize>, f64)> = groups
        .par_iter()
        .map(|&g| {
            let test: Vec<usize> = (0..labels.len()).filter(|&i| outer[i] == g).collect();
            let mut train: Vec<usize> = (0..labels.len()).filter(|&i| outer[i] != g).collect();
            if balance {
                train = balanced(&train, labels, n_classes);
            }
            let xt = take_rows(x, &train);
            let yt = take_rows(&y, &train);
            let lam = match lambda {
                Some(l) => l,
                None => {
                    let ig: Vec<usize> = train.iter().map(|&i| inner[i]).collect();
                    select_lambda(&xt, &yt, &ig, 3, &grid)?
                }
            };
            let model = ridge_fit_design(&xt, &yt, lam, RidgeOptions::default())?;
            let xtest = take_rows(x, &test);
            let pred = match scheme {
                Scheme::OneHot => classify(&model, &xtest)?,
                Scheme::Ordinal => model
                    .predict_design(&xtest)?
                    .column(0)
                    .iter()
                    .map(|v| v.round().clamp(0.0, (n_classes - 1) as f64) as usize)
                    .collect(),
            };
            Ok((test, pred, lam))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let mut predictions = vec![0; labels.len()];
    let mut lambdas = Vec::new();
    for (test, pred, lam) in folds {
        for (i, p) in test.into_iter().zip(pred) {
            predictions[i] = p;
        }
        lambdas.push(lam);
    }
    Ok(Grouped { predictions, lambdas })
}

/// Replicate training rows so every class appears about as often as the
/// most frequent one. Copies stay in their own group.
fn balanced(train: &[usize], labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_classes];
    for &i in train {
        counts[labels[i]] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let mut out = Vec::with_capacity(train.len());
    for &i in train {
        let c = counts[labels[i]];
        let reps = ((top as f64 / c as f64).round() as usize).max(1);
        out.extend(std::iter::repeat_n(i, reps));
    }
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskResult {
    pub confusion: ConfusionMatrix,
    pub metrics: ClassificationMetrics,
    pub lambdas: Vec<f64>,
}

/// Decode one task and record its metrics under `name`.
#[allow(clippy::too_many_arguments)]
pub fn run_task(
    summary: &mut Summary,
    name: &str,
    x: &DMatrix<f64>,
    labels: &[usize],
    class_names: &[&str],
    outer: &[usize],
    inner: &[usize],
    lambda: Option<f64>,
    balance: bool,
    scheme: Scheme,
) -> Result<TaskResult, ExperimentError> {
    let g = leave_one_group_out(x, labels, class_names.len(), outer, inner, lambda, balance, scheme)?;
    let names: Vec<String> = class_names.iter().map(|s| s.to_string()).collect();
    let confusion = ConfusionMatrix::from_predictions(labels, &g.predictions, &names)?;
    let metrics = classification_metrics(&confusion)?;
    summary.metric(&format!("{name}_accuracy"), metrics.accuracy);
    summary.metric(&format!("{name}_balanced_accuracy"), metrics.balanced_accuracy);
    summary.metric(&format!("{name}_cohens_kappa"), metrics.cohens_kappa);
    summary.metric(&format!("{name}_events"), labels.len() as f64);
    let result = TaskResult { confusion, metrics, lambdas: g.lambdas };
    summary.table(name, &result)?;
    Ok(result)
}

/// Accuracy band around a published value, plus the strict chance floor.
pub fn band_checks(summary: &mut Summary, name: &str, value: f64, target: f64, tol: f64, chance: f64) {
    summary.check(Check::near(name, value, target, tol));
    summary.check(Check::above(&format!("{name}_above_chance"), value, chance));
}

/// Per-channel features of one event on a drift-free trace: `n_bins`
/// bin means after onset relative to the `pre_s` pre-onset mean, then the
/// peak and the initial slope of the smoothed response.
pub struct EventWindowSpec {
    pub pre_s: f64,
    pub bin_s: f64,
    pub n_bins: usize,
    pub slope_s: f64,
}

pub fn event_vector(trace: &Trace, smoothed: &Trace, onset_s: f64, spec: &EventWindowSpec) -> Vec<f64> {
    let fs = trace.sample_rate_hz;
    let i0 = trace.index_at_or_after(onset_s);
    let b0 = trace.index_at_or_after(onset_s - spec.pre_s);
    let per_bin = ((spec.bin_s * fs).round() as usize).max(1);
    let end = (i0 + per_bin * spec.n_bins).min(trace.n_samples());
    let n_slope = ((spec.slope_s * fs).round() as usize).max(2);
    let mut out = Vec::with_capacity(trace.n_channels() * (spec.n_bins + 2));
    for c in 0..trace.n_channels() {
        let x = trace.channel(c);
        let base = mean(&x[b0..i0]);
        for b in 0..spec.n_bins {
            let s = (i0 + b * per_bin).min(end);
            let e = (s + per_bin).min(end);
            out.push(if e > s { mean(&x[s..e]) - base } else { 0.0 });
        }
        let sm = smoothed.channel(c);
        let sbase = mean(&sm[b0..i0]);
        let peak = sm[i0..end].iter().map(|v| v - sbase).fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        out.push(peak);
        let s_end = (i0 + n_slope).min(sm.len());
        out.push(slope(&sm[i0..s_end], 1.0 / fs));
    }
    out
}

fn slope(y: &[f64], dt: f64) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let tm = (n - 1) as f64 / 2.0;
    let ym = mean(y);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let d = i as f64 - tm;
        num += d * (v - ym);
        den += d * d;
    }
    num / den / dt
}

/// Smoothing window in samples (odd) for a length in seconds.
pub fn smoothing(trace: &Trace, seconds: f64) -> Result<Trace, ExperimentError> {
    let n = ((seconds * trace.sample_rate_hz).round() as usize) | 1;
    Ok(smooth_moving_mean(trace, n)?)
}

pub fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_groups_decode_perfectly() {
        // two features, class encoded in the sign of the first
        let rows: Vec<Vec<f64>> = (0..24)
            .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 } + 0.01 * i as f64, (i % 5) as f64])
            .collect();
        let labels: Vec<usize> = (0..24).map(|i| i % 2).collect();
        let outer: Vec<usize> = (0..24).map(|i| i / 8).collect();
        let inner: Vec<usize> = (0..24).map(|i| i / 4).collect();
        let g = leave_one_group_out(&matrix(&rows), &labels, 2, &outer, &inner, None, false, Scheme::OneHot).unwrap();
        assert_eq!(g.predictions, labels);
        assert_eq!(g.lambdas.len(), 3);
    }

    #[test]
    fn slope_of_a_line() {
        let y: Vec<f64> = (0..50).map(|i| 3.0 * i as f64 * 0.01).collect();
        assert!((slope(&y, 0.01) - 3.0).abs() < 1e-12);
    }
}
