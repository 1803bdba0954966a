//! Intensity-response, recovery and loading-rate curve fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::hill;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrateError {
    #[error("need at least {need} distinct levels, got {got}")]
    TooFewLevels { need: usize, got: usize },
    #[error("non-finite value at point {0}")]
    NonFinite(usize),
    #[error("responses are all equal; the curve is not identifiable")]
    Degenerate,
    #[error("no start converged within {iterations} iterations (best SSE {best_sse:e})")]
    NonConvergence { iterations: usize, best_sse: f64 },
    #[error("series spans {0} days; need at least 3")]
    ShortSpan(f64),
    #[error("fitted plateau {0} is not positive")]
    NonPositivePlateau(f64),
    #[error("need at least 2 rate curves, got {0}")]
    TooFewRates(usize),
    #[error("rate curve {curve}: {reason}")]
    BadCurve { curve: usize, reason: String },
}

/// Settings of the damped Gauss-Newton (Levenberg-Marquardt) solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub relative_step_tol: f64,
    /// Accepted steps that lower the SSE by less than this fraction stop
    /// the search.
    pub relative_sse_tol: f64,
    pub initial_damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_step_tol: 1e-9,
            relative_sse_tol: 1e-12,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LmOutcome {
    pub params: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Levenberg-Marquardt with Marquardt's diagonal scaling, so the iterates
/// are invariant to per-parameter rescaling. `model` returns residuals and
/// their Jacobian, or `None` where the parameters are outside the domain.
pub(crate) fn levenberg_marquardt<F>(model: F, start: &[f64], cfg: &SolverConfig) -> Option<LmOutcome>
where
    F: Fn(&[f64]) -> Option<(DVector<f64>, DMatrix<f64>)>,
{
    let mut x = start.to_vec();
    let (mut r, mut j) = model(&x)?;
    let mut sse = r.norm_squared();
    if !sse.is_finite() {
        return None;
    }
    let mut damping = cfg.initial_damping;
    let p = x.len();
    for it in 1..=cfg.max_iterations {
        if sse == 0.0 {
            return Some(LmOutcome { params: x, sse, iterations: it, converged: true });
        }
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        loop {
            let mut a = jtj.clone();
            for k in 0..p {
                a[(k, k)] += damping * jtj[(k, k)].max(1e-300);
            }
            let step = a.cholesky().map(|c| c.solve(&(-&g)));
            let Some(step) = step else {
                damping *= 10.0;
                if damping > 1e16 {
                    return Some(LmOutcome { params: x, sse, iterations: it, converged: true });
                }
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let trial = model(&cand).filter(|(rc, _)| rc.norm_squared().is_finite());
            match trial {
                Some((rc, jc)) if rc.norm_squared() <= sse => {
                    let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let new_sse = rc.norm_squared();
                    let small = step.norm() <= cfg.relative_step_tol * (xnorm + cfg.relative_step_tol)
                        || sse - new_sse <= cfg.relative_sse_tol * sse;
                    x = cand;
                    sse = new_sse;
                    r = rc;
                    j = jc;
                    damping = (damping / 3.0).max(1e-12);
                    if small {
                        return Some(LmOutcome { params: x, sse, iterations: it, converged: true });
                    }
                    break;
                }
                _ => {
                    damping *= 10.0;
                    // no descent direction left: a numerical minimum
                    if damping > 1e16 {
                        return Some(LmOutcome { params: x, sse, iterations: it, converged: true });
                    }
                }
            }
        }
    }
    Some(LmOutcome { params: x, sse, iterations: cfg.max_iterations, converged: false })
}

fn r_squared(y: &[f64], sse: f64) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        0.0
    } else {
        1.0 - sse / ss_tot
    }
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo == hi {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillFit {
    pub amplitude_mv: f64,
    pub half_level: f64,
    pub exponent: f64,
    pub r_squared: f64,
    pub endpoint_normalized: bool,
}

impl HillFit {
    pub fn predict(&self, level: f64) -> f64 {
        hill(self.amplitude_mv, self.half_level, self.exponent, level)
    }
}

const EXPONENT_STARTS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const HALF_LEVEL_STARTS: usize = 8;
const EXPONENT_RANGE: (f64, f64) = (1e-3, 100.0);

/// Normalized Hill value `h` with derivatives along ln E and ln n.
fn hill_unit(level: f64, e: f64, n: f64) -> (f64, f64, f64) {
    if level <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let ratio = e / level;
    let r = ratio.powf(n);
    if !r.is_finite() {
        return (0.0, 0.0, 0.0);
    }
    let h = 1.0 / (1.0 + r);
    let common = -r * n / ((1.0 + r) * (1.0 + r));
    (h, common, common * ratio.ln())
}

fn check_points(points: &[(f64, f64)]) -> Result<(), CalibrateError> {
    for (i, (x, y)) in points.iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(CalibrateError::NonFinite(i));
        }
    }
    Ok(())
}

fn distinct_count(xs: &[f64]) -> usize {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Least-squares Hill fit `A l^n / (E^n + l^n)` over (level, response) pairs.
/// With `endpoint_normalized` the curve is pinned to the mean response at
/// the highest level and only E and n are free.
pub fn fit_hill(levels: &[(f64, f64)], endpoint_normalized: bool) -> Result<HillFit, CalibrateError> {
    fit_hill_with(levels, endpoint_normalized, &SolverConfig::default())
}

pub fn fit_hill_with(
    levels: &[(f64, f64)],
    endpoint_normalized: bool,
    cfg: &SolverConfig,
) -> Result<HillFit, CalibrateError> {
    check_points(levels)?;
    let xs: Vec<f64> = levels.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = levels.iter().map(|p| p.1).collect();
    let distinct = distinct_count(&xs);
    if distinct < 4 {
        return Err(CalibrateError::TooFewLevels { need: 4, got: distinct });
    }
    if ys.iter().all(|&y| y == ys[0]) {
        return Err(CalibrateError::Degenerate);
    }
    let positive: Vec<f64> = xs.iter().copied().filter(|&x| x > 0.0).collect();
    if positive.is_empty() {
        return Err(CalibrateError::Degenerate);
    }
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positive.iter().copied().fold(0.0, f64::max);
    let e_bounds = (lo * 1e-3, hi * 1e3);
    let in_bounds = |e: f64, n: f64| {
        e > e_bounds.0 && e < e_bounds.1 && n > EXPONENT_RANGE.0 && n < EXPONENT_RANGE.1
    };
    let top: Vec<f64> = levels.iter().filter(|p| p.0 == hi).map(|p| p.1).collect();
    let y_end = top.iter().sum::<f64>() / top.len() as f64;

    let mut best: Option<LmOutcome> = None;
    let mut best_any = f64::INFINITY;
    for &e0 in &log_space(lo, hi, HALF_LEVEL_STARTS) {
        for &n0 in &EXPONENT_STARTS {
            let outcome = if endpoint_normalized {
                let model = |th: &[f64]| {
                    let (e, n) = (th[0].exp(), th[1].exp());
                    if !in_bounds(e, n) {
                        return None;
                    }
                    let (he, ge, gn) = hill_unit(hi, e, n);
                    if he <= 0.0 {
                        return None;
                    }
                    let mut r = DVector::zeros(xs.len());
                    let mut j = DMatrix::zeros(xs.len(), 2);
                    for (i, &x) in xs.iter().enumerate() {
                        let (h, dhe, dhn) = hill_unit(x, e, n);
                        r[i] = y_end * h / he - ys[i];
                        j[(i, 0)] = y_end * (dhe / he - h * ge / (he * he));
                        j[(i, 1)] = y_end * (dhn / he - h * gn / (he * he));
                    }
                    Some((r, j))
                };
                levenberg_marquardt(model, &[e0.ln(), n0.ln()], cfg)
            } else {
                // amplitude is linear: project it out and search (E, n) only
                let model = |th: &[f64]| {
                    let (e, n) = (th[0].exp(), th[1].exp());
                    if !in_bounds(e, n) {
                        return None;
                    }
                    let parts: Vec<(f64, f64, f64)> = xs.iter().map(|&x| hill_unit(x, e, n)).collect();
                    let hh: f64 = parts.iter().map(|p| p.0 * p.0).sum();
                    if hh <= 0.0 {
                        return None;
                    }
                    let hy: f64 = parts.iter().zip(&ys).map(|(p, y)| p.0 * y).sum();
                    let a = hy / hh;
                    let mut r = DVector::zeros(xs.len());
                    let mut j = DMatrix::zeros(xs.len(), 2);
                    for (i, p) in parts.iter().enumerate() {
                        r[i] = a * p.0 - ys[i];
                    }
                    for k in 0..2 {
                        let d = |p: &(f64, f64, f64)| if k == 0 { p.1 } else { p.2 };
                        let dy: f64 = parts.iter().zip(&ys).map(|(p, y)| d(p) * y).sum();
                        let dh: f64 = parts.iter().map(|p| d(p) * p.0).sum();
                        let da = (dy - 2.0 * a * dh) / hh;
                        for (i, p) in parts.iter().enumerate() {
                            j[(i, k)] = a * d(p) + p.0 * da;
                        }
                    }
                    Some((r, j))
                };
                levenberg_marquardt(model, &[e0.ln(), n0.ln()], cfg)
            };
            let Some(out) = outcome else { continue };
            best_any = best_any.min(out.sse);
            if out.converged && best.as_ref().is_none_or(|b| out.sse < b.sse) {
                best = Some(out);
            }
        }
    }
    let best = best.ok_or(CalibrateError::NonConvergence {
        iterations: cfg.max_iterations,
        best_sse: best_any,
    })?;
    let (amplitude, e, n) = if endpoint_normalized {
        let (e, n) = (best.params[0].exp(), best.params[1].exp());
        (y_end / hill_unit(hi, e, n).0, e, n)
    } else {
        let (e, n) = (best.params[0].exp(), best.params[1].exp());
        let hs: Vec<f64> = xs.iter().map(|&x| hill_unit(x, e, n).0).collect();
        let hh: f64 = hs.iter().map(|h| h * h).sum();
        (hs.iter().zip(&ys).map(|(h, y)| h * y).sum::<f64>() / hh, e, n)
    };
    Ok(HillFit {
        amplitude_mv: amplitude,
        half_level: e,
        exponent: n,
        r_squared: r_squared(&ys, best.sse),
        endpoint_normalized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryModel {
    #[default]
    Logistic,
    /// `P (1 - exp(-k (t - t0)))` from the first observation day.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryFit {
    pub model: RecoveryModel,
    pub plateau_mv: f64,
    /// Logistic midpoint; for the exponential model the fixed start day.
    pub t50_days: f64,
    /// `None` when the series is already flat at its plateau.
    pub steepness_per_day: Option<f64>,
    pub t95_days: f64,
    pub r_squared: f64,
    /// Set when the series trends downward rather than up.
    pub non_monotone: bool,
}

impl RecoveryFit {
    pub fn predict(&self, day: f64) -> f64 {
        let Some(k) = self.steepness_per_day else {
            return self.plateau_mv;
        };
        match self.model {
            RecoveryModel::Logistic => self.plateau_mv / (1.0 + (-k * (day - self.t50_days)).exp()),
            RecoveryModel::Exponential => {
                self.plateau_mv * (1.0 - (-k * (day - self.t50_days)).exp())
            }
        }
    }
}

/// Kendall rank correlation between day and response.
fn kendall_tau(points: &[(f64, f64)]) -> f64 {
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let s = (points[j].0 - points[i].0).signum() * (points[j].1 - points[i].1).signum();
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            }
        }
    }
    let total = concordant + discordant;
    if total == 0 {
        0.0
    } else {
        (concordant - discordant) as f64 / total as f64
    }
}

pub fn fit_recovery(series: &[(f64, f64)]) -> Result<RecoveryFit, CalibrateError> {
    fit_recovery_with(series, RecoveryModel::Logistic, &SolverConfig::default())
}

pub fn fit_recovery_with(
    series: &[(f64, f64)],
    model: RecoveryModel,
    cfg: &SolverConfig,
) -> Result<RecoveryFit, CalibrateError> {
    check_points(series)?;
    if series.len() < 4 {
        return Err(CalibrateError::TooFewLevels { need: 4, got: series.len() });
    }
    let ts: Vec<f64> = series.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = series.iter().map(|p| p.1).collect();
    let t_first = ts.iter().copied().fold(f64::INFINITY, f64::min);
    let t_last = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = t_last - t_first;
    if span < 3.0 {
        return Err(CalibrateError::ShortSpan(span));
    }
    let non_monotone = kendall_tau(series) <= 0.0;
    let y_max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    if y_max - y_min <= 1e-12 * y_max.abs().max(1e-300) {
        if y_max <= 0.0 {
            return Err(CalibrateError::NonPositivePlateau(y_max));
        }
        return Ok(RecoveryFit {
            model,
            plateau_mv: y_max,
            t50_days: t_first,
            steepness_per_day: None,
            t95_days: t_first,
            r_squared: 0.0,
            non_monotone: false,
        });
    }
    if y_max <= 0.0 {
        return Err(CalibrateError::NonPositivePlateau(y_max));
    }

    let mut best: Option<LmOutcome> = None;
    let mut best_any = f64::INFINITY;
    let k_starts: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
    match model {
        RecoveryModel::Logistic => {
            let logistic = |th: &[f64]| {
                let (p, t50, k) = (th[0].exp(), th[1], th[2].exp());
                if !(p.is_finite() && k.is_finite()) {
                    return None;
                }
                let mut r = DVector::zeros(ts.len());
                let mut j = DMatrix::zeros(ts.len(), 3);
                for (i, &t) in ts.iter().enumerate() {
                    let s = 1.0 / (1.0 + (-k * (t - t50)).exp());
                    let ds = s * (1.0 - s);
                    r[i] = p * s - ys[i];
                    j[(i, 0)] = p * s;
                    j[(i, 1)] = -p * ds * k;
                    j[(i, 2)] = p * ds * (t - t50) * k;
                }
                Some((r, j))
            };
            for q in 0..5 {
                let t50 = t_first + span * (q as f64 + 0.5) / 5.0;
                for &k in &k_starts {
                    if let Some(out) = levenberg_marquardt(logistic, &[y_max.ln(), t50, k.ln()], cfg) {
                        best_any = best_any.min(out.sse);
                        if out.converged && best.as_ref().is_none_or(|b| out.sse < b.sse) {
                            best = Some(out);
                        }
                    }
                }
            }
        }
        RecoveryModel::Exponential => {
            let expo = |th: &[f64]| {
                let (p, k) = (th[0].exp(), th[1].exp());
                if !(p.is_finite() && k.is_finite()) {
                    return None;
                }
                let mut r = DVector::zeros(ts.len());
                let mut j = DMatrix::zeros(ts.len(), 2);
                for (i, &t) in ts.iter().enumerate() {
                    let e = (-k * (t - t_first)).exp();
                    r[i] = p * (1.0 - e) - ys[i];
                    j[(i, 0)] = p * (1.0 - e);
                    j[(i, 1)] = p * e * (t - t_first) * k;
                }
                Some((r, j))
            };
            for &k in &k_starts {
                if let Some(out) = levenberg_marquardt(expo, &[y_max.ln(), k.ln()], cfg) {
                    best_any = best_any.min(out.sse);
                    if out.converged && best.as_ref().is_none_or(|b| out.sse < b.sse) {
                        best = Some(out);
                    }
                }
            }
        }
    }
    let best = best.ok_or(CalibrateError::NonConvergence {
        iterations: cfg.max_iterations,
        best_sse: best_any,
    })?;
    let plateau = best.params[0].exp();
    let (t50, k, t95) = match model {
        RecoveryModel::Logistic => {
            let k = best.params[2].exp();
            (best.params[1], k, best.params[1] + 19f64.ln() / k)
        }
        RecoveryModel::Exponential => {
            let k = best.params[1].exp();
            (t_first, k, t_first + 20f64.ln() / k)
        }
    };
    if !t95.is_finite() {
        return Err(CalibrateError::NonConvergence {
            iterations: best.iterations,
            best_sse: best.sse,
        });
    }
    Ok(RecoveryFit {
        model,
        plateau_mv: plateau,
        t50_days: t50,
        steepness_per_day: Some(k),
        t95_days: t95,
        r_squared: r_squared(&ys, best.sse),
        non_monotone,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateLabel {
    Slow,
    Medium,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLevel {
    pub level: f64,
    pub mean_mv: f64,
    pub sd_mv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurve {
    pub rate_label: RateLabel,
    /// Loading rate in the stimulus's native units per second.
    pub rate_value: f64,
    pub levels: Vec<RateLevel>,
}

impl RateCurve {
    pub fn new(rate_label: RateLabel, rate_value: f64, levels: &[(f64, f64, f64)]) -> Self {
        Self {
            rate_label,
            rate_value,
            levels: levels
                .iter()
                .map(|&(level, mean_mv, sd_mv)| RateLevel { level, mean_mv, sd_mv })
                .collect(),
        }
    }
}

/// Piecewise-linear interpolant, held constant beyond its end points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpolant {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Interpolant {
    /// Knots must be sorted ascending by x.
    pub fn new(points: &[(f64, f64)]) -> Self {
        Self {
            xs: points.iter().map(|p| p.0).collect(),
            ys: points.iter().map(|p| p.1).collect(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 0 {
            return f64::NAN;
        }
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let k = self.xs.partition_point(|&v| v <= x);
        let (x0, x1) = (self.xs[k - 1], self.xs[k]);
        let (y0, y1) = (self.ys[k - 1], self.ys[k]);
        if x1 == x0 {
            return y1;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEnvelope {
    pub rate_label: RateLabel,
    pub rate_value: f64,
    pub interpolant: Interpolant,
    pub end_level: f64,
    pub end_mean_mv: f64,
    pub end_sd_mv: f64,
}

/// Comparison of two envelopes adjacent in loading rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopePair {
    pub slower: RateLabel,
    pub faster: RateLabel,
    /// Faster rate responds at least as strongly at every matched level.
    pub ordered: bool,
    /// Matched levels where the slower envelope is above the faster one.
    pub violations: Vec<f64>,
    /// End-of-range means differ by more than the summed SDs.
    pub distinguishable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    /// Sorted by ascending rate value.
    pub envelopes: Vec<RateEnvelope>,
    pub pairs: Vec<EnvelopePair>,
    pub ordered: bool,
    pub all_distinguishable: bool,
}

pub fn fit_rate_envelope(curves: &[RateCurve]) -> Result<EnvelopeReport, CalibrateError> {
    if curves.len() < 2 {
        return Err(CalibrateError::TooFewRates(curves.len()));
    }
    for (i, c) in curves.iter().enumerate() {
        let bad = |reason: &str| CalibrateError::BadCurve { curve: i, reason: reason.to_string() };
        if c.levels.len() < 3 {
            return Err(bad("needs at least 3 levels"));
        }
        if c.levels.iter().any(|l| !(l.level.is_finite() && l.mean_mv.is_finite() && l.sd_mv.is_finite())) {
            return Err(bad("non-finite entry"));
        }
        if c.levels.windows(2).any(|w| w[1].level < w[0].level) {
            return Err(bad("levels not sorted ascending"));
        }
        if c.levels.iter().any(|l| l.sd_mv < 0.0) {
            return Err(bad("negative SD"));
        }
        if !c.rate_value.is_finite() {
            return Err(bad("non-finite rate"));
        }
    }
    let mut sorted: Vec<&RateCurve> = curves.iter().collect();
    sorted.sort_by(|a, b| a.rate_value.total_cmp(&b.rate_value));
    let envelopes: Vec<RateEnvelope> = sorted
        .iter()
        .map(|c| {
            let pts: Vec<(f64, f64)> = c.levels.iter().map(|l| (l.level, l.mean_mv)).collect();
            let last = c.levels[c.levels.len() - 1];
            RateEnvelope {
                rate_label: c.rate_label,
                rate_value: c.rate_value,
                interpolant: Interpolant::new(&pts),
                end_level: last.level,
                end_mean_mv: last.mean_mv,
                end_sd_mv: last.sd_mv,
            }
        })
        .collect();
    let pairs: Vec<EnvelopePair> = envelopes
        .windows(2)
        .map(|w| {
            let (slow, fast) = (&w[0], &w[1]);
            let lo = slow.interpolant.xs[0].max(fast.interpolant.xs[0]);
            let hi = slow.end_level.min(fast.end_level);
            let mut matched: Vec<f64> = slow
                .interpolant
                .xs
                .iter()
                .chain(&fast.interpolant.xs)
                .copied()
                .filter(|&x| x >= lo && x <= hi)
                .collect();
            matched.sort_by(f64::total_cmp);
            matched.dedup();
            let violations: Vec<f64> = matched
                .into_iter()
                .filter(|&x| fast.interpolant.eval(x) < slow.interpolant.eval(x))
                .collect();
            EnvelopePair {
                slower: slow.rate_label,
                faster: fast.rate_label,
                ordered: violations.is_empty(),
                violations,
                distinguishable: (fast.end_mean_mv - slow.end_mean_mv).abs()
                    > slow.end_sd_mv + fast.end_sd_mv,
            }
        })
        .collect();
    Ok(EnvelopeReport {
        ordered: pairs.iter().all(|p| p.ordered),
        all_distinguishable: pairs.iter().all(|p| p.distinguishable),
        envelopes,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub observed: f64,
    pub predicted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HillReport {
    pub fit: HillFit,
    pub points: Vec<CurvePoint>,
}

impl HillReport {
    pub fn new(fit: HillFit, levels: &[(f64, f64)]) -> Self {
        Self { fit, points: curve_points(levels, |x| fit.predict(x)) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub fit: RecoveryFit,
    pub points: Vec<CurvePoint>,
}

impl RecoveryReport {
    pub fn new(fit: RecoveryFit, series: &[(f64, f64)]) -> Self {
        Self { fit, points: curve_points(series, |x| fit.predict(x)) }
    }
}

fn curve_points(data: &[(f64, f64)], f: impl Fn(f64) -> f64) -> Vec<CurvePoint> {
    data.iter()
        .map(|&(x, y)| {
            let p = f(x);
            CurvePoint { x, observed: y, predicted: p, residual: y - p }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::HillResponse;

    const LEVELS: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

    fn sample(h: &HillResponse, levels: &[f64]) -> Vec<(f64, f64)> {
        levels.iter().map(|&l| (l, h.eval(l))).collect()
    }

    #[test]
    fn tube_exact() {
        let fit = fit_hill(&sample(&HillResponse::TUBE, &LEVELS), false).unwrap();
        assert!((fit.amplitude_mv - 1.22).abs() < 1e-6, "{fit:?}");
        assert!((fit.half_level - 5.40).abs() < 1e-6);
        assert!((fit.exponent - 0.94).abs() < 1e-6);
        assert!(fit.r_squared >= 1.0 - 1e-10);
    }

    #[test]
    fn pixel_exact() {
        let levels = [10.0, 25.0, 50.0, 75.0, 100.0, 125.0, 150.0, 200.0, 255.0];
        let fit = fit_hill(&sample(&HillResponse::PIXEL, &levels), false).unwrap();
        assert!((fit.amplitude_mv - 17.60).abs() < 1e-4, "{fit:?}");
        assert!((fit.half_level - 115.64).abs() < 1e-4);
        assert!((fit.exponent - 3.90).abs() < 1e-4);
    }

    #[test]
    fn endpoint_mode_recovers_shape() {
        let h = HillResponse { amplitude_mv: 2.0, half_level: 6.75, exponent: 0.90 };
        let fit = fit_hill(&sample(&h, &LEVELS), true).unwrap();
        assert!(fit.endpoint_normalized);
        assert!((fit.half_level - 6.75).abs() < 1e-6);
        assert!((fit.exponent - 0.90).abs() < 1e-6);
        assert!((fit.amplitude_mv - 2.0).abs() < 1e-6);
    }

    #[test]
    fn zero_level_is_allowed() {
        let mut pts = sample(&HillResponse::TUBE, &LEVELS);
        pts.push((0.0, 0.0));
        let fit = fit_hill(&pts, false).unwrap();
        assert!((fit.half_level - 5.40).abs() < 1e-6);
    }

    #[test]
    fn hill_errors() {
        let flat: Vec<(f64, f64)> = LEVELS.iter().map(|&l| (l, 0.61)).collect();
        assert_eq!(fit_hill(&flat, false), Err(CalibrateError::Degenerate));
        let few = [(1.0, 0.1), (2.0, 0.2), (2.0, 0.25), (3.0, 0.3)];
        assert!(matches!(fit_hill(&few, false), Err(CalibrateError::TooFewLevels { got: 3, .. })));
        let nan = [(1.0, 0.1), (2.0, f64::NAN), (3.0, 0.3), (4.0, 0.4)];
        assert_eq!(fit_hill(&nan, false), Err(CalibrateError::NonFinite(1)));
    }

    #[test]
    fn non_convergence_is_reported() {
        let cfg = SolverConfig { max_iterations: 1, ..SolverConfig::default() };
        let pts = sample(&HillResponse::PIXEL, &[10.0, 50.0, 100.0, 150.0, 255.0]);
        assert!(matches!(
            fit_hill_with(&pts, false, &cfg),
            Err(CalibrateError::NonConvergence { .. })
        ));
    }

    fn logistic(p: f64, t50: f64, k: f64, t: f64) -> f64 {
        p / (1.0 + (-k * (t - t50)).exp())
    }

    #[test]
    fn recovery_exact_t95() {
        let k = 19f64.ln();
        let series: Vec<(f64, f64)> =
            (0..29).map(|i| i as f64 * 0.25).map(|t| (t, logistic(1.0, 2.0, k, t))).collect();
        let fit = fit_recovery(&series).unwrap();
        assert!((fit.t95_days - 3.0).abs() < 1e-3, "{fit:?}");
        assert!((fit.plateau_mv - 1.0).abs() < 1e-6);
        assert!(!fit.non_monotone);
        assert!((fit.predict(3.0) - 0.95).abs() < 1e-6);
    }

    #[test]
    fn recovery_flat_and_errors() {
        let flat: Vec<(f64, f64)> = (0..8).map(|d| (d as f64, 1.0)).collect();
        let fit = fit_recovery(&flat).unwrap();
        assert_eq!(fit.t95_days, 0.0);
        assert_eq!(fit.steepness_per_day, None);
        assert!(matches!(fit_recovery(&flat[..3]), Err(CalibrateError::TooFewLevels { .. })));
        let short = [(0.0, 0.1), (1.0, 0.5), (1.5, 0.8), (2.0, 0.9)];
        assert_eq!(fit_recovery(&short), Err(CalibrateError::ShortSpan(2.0)));
    }

    #[test]
    fn declining_series_is_flagged() {
        let series: Vec<(f64, f64)> =
            (0..10).map(|d| (d as f64, 1.0 - logistic(0.8, 4.0, 1.5, d as f64))).collect();
        assert!(fit_recovery(&series).map(|f| f.non_monotone).unwrap_or(true));
    }

    #[test]
    fn exponential_model() {
        let series: Vec<(f64, f64)> =
            (0..15).map(|i| i as f64 * 0.5).map(|t| (t, 2.0 * (1.0 - (-0.8 * t).exp()))).collect();
        let fit = fit_recovery_with(&series, RecoveryModel::Exponential, &SolverConfig::default()).unwrap();
        assert!((fit.t95_days - 20f64.ln() / 0.8).abs() < 1e-6);
        assert!((fit.plateau_mv - 2.0).abs() < 1e-8);
    }

    #[test]
    fn interpolant_midpoint() {
        let f = Interpolant::new(&[(1.0, 1.0), (2.0, 2.0)]);
        assert_eq!(f.eval(1.5), 1.5);
        assert_eq!(f.eval(0.0), 1.0);
        assert_eq!(f.eval(9.0), 2.0);
    }

    fn ramp(label: RateLabel, rate: f64, lo: f64, hi: f64, end: f64, sd: f64) -> RateCurve {
        let pts: Vec<(f64, f64, f64)> = (0..5)
            .map(|i| {
                let f = i as f64 / 4.0;
                (lo + (hi - lo) * f, end * f * f, sd * f)
            })
            .collect();
        RateCurve::new(label, rate, &pts)
    }

    #[test]
    fn pressure_envelopes_ordered() {
        let curves = [
            ramp(RateLabel::Fast, 4.3, 10.7, 82.9, 2.59, 0.21),
            ramp(RateLabel::Slow, 0.5, 10.7, 82.9, 0.19, 0.01),
            ramp(RateLabel::Medium, 2.0, 10.7, 82.9, 1.25, 0.20),
        ];
        let rep = fit_rate_envelope(&curves).unwrap();
        assert!(rep.ordered);
        assert!(rep.all_distinguishable);
        let labels: Vec<RateLabel> = rep.envelopes.iter().map(|e| e.rate_label).collect();
        assert_eq!(labels, [RateLabel::Slow, RateLabel::Medium, RateLabel::Fast]);
        let ends: Vec<f64> = rep.envelopes.iter().map(|e| e.end_mean_mv).collect();
        assert_eq!(ends, [0.19, 1.25, 2.59]);
    }

    #[test]
    fn co2_envelopes_and_findings() {
        let curves = [
            ramp(RateLabel::Slow, 11.0, 0.0, 5000.0, 0.35, 0.02),
            ramp(RateLabel::Medium, 74.0, 0.0, 5000.0, 0.63, 0.03),
            ramp(RateLabel::Fast, 188.0, 0.0, 5000.0, 0.88, 0.06),
        ];
        assert!(fit_rate_envelope(&curves).unwrap().ordered);
        // swapped ends are a finding, not an error
        let swapped = [
            ramp(RateLabel::Slow, 1.0, 0.0, 1.0, 1.0, 0.5),
            ramp(RateLabel::Fast, 2.0, 0.0, 1.0, 0.9, 0.5),
        ];
        let rep = fit_rate_envelope(&swapped).unwrap();
        assert!(!rep.ordered);
        assert!(!rep.all_distinguishable);
        assert!(!rep.pairs[0].violations.is_empty());
    }

    #[test]
    fn envelope_errors() {
        let one = [ramp(RateLabel::Slow, 1.0, 0.0, 1.0, 1.0, 0.1)];
        assert_eq!(fit_rate_envelope(&one), Err(CalibrateError::TooFewRates(1)));
        let short = RateCurve::new(RateLabel::Fast, 2.0, &[(0.0, 0.0, 0.0), (1.0, 1.0, 0.0)]);
        assert!(matches!(
            fit_rate_envelope(&[one[0].clone(), short]),
            Err(CalibrateError::BadCurve { curve: 1, .. })
        ));
        let unsorted = RateCurve::new(RateLabel::Fast, 2.0, &[(0.0, 0.0, 0.0), (2.0, 1.0, 0.0), (1.0, 1.0, 0.0)]);
        assert!(fit_rate_envelope(&[one[0].clone(), unsorted]).is_err());
        let neg = RateCurve::new(RateLabel::Fast, 2.0, &[(0.0, 0.0, 0.0), (1.0, 1.0, -0.1), (2.0, 1.0, 0.0)]);
        assert!(fit_rate_envelope(&[one[0].clone(), neg]).is_err());
    }

    #[test]
    fn report_residuals() {
        let pts = sample(&HillResponse::TUBE, &LEVELS);
        let fit = fit_hill(&pts, false).unwrap();
        let rep = HillReport::new(fit, &pts);
        assert_eq!(rep.points.len(), 7);
        assert!(rep.points.iter().all(|p| p.residual.abs() < 1e-9));
        serde_json::to_string(&rep).unwrap();
    }
}
