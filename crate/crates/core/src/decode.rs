//! Linear decoders and the metrics used to score them.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{dft_magnitudes, lagged_embed, FeatureError};
use crate::session::Trace;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("row mismatch: design has {x} rows, targets have {y}")]
    RowMismatch { x: usize, y: usize },
    #[error("feature mismatch: model expects {expected} columns, got {found}")]
    FeatureMismatch { expected: usize, found: usize },
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("both templates are identically zero")]
    ZeroTemplates,
    #[error("fundamental {freq_hz} Hz is above Nyquist {nyquist_hz} Hz")]
    AboveNyquist { freq_hz: f64, nyquist_hz: f64 },
    #[error("trace of {samples} samples covers fewer than 3 periods ({needed} samples)")]
    TooShort { samples: usize, needed: usize },
    #[error("class index {index} outside {classes} classes")]
    BadClass { index: usize, classes: usize },
    #[error("need at least 2 groups for cross-validation, got {0}")]
    TooFewGroups(usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RidgeOptions {
    pub fit_intercept: bool,
    pub standardize: bool,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        Self {
            fit_intercept: true,
            standardize: true,
        }
    }
}

/// Closed-form ridge regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `(features + 1) x targets` in standardized units; the last row is
    /// the unpenalized bias.
    pub weights: DMatrix<f64>,
    pub lambda: f64,
    pub history_steps: usize,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    /// Numerical rank of the centred design; below the column count means
    /// the minimum-norm solution was taken.
    pub rank: usize,
}

impl RidgeModel {
    pub fn n_features(&self) -> usize {
        self.feature_means.len()
    }

    pub fn n_targets(&self) -> usize {
        self.weights.ncols()
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank < self.n_features()
    }

    /// Coefficients and bias in the original feature units.
    pub fn coefficients(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.n_features();
        let mut w = DMatrix::zeros(p, self.n_targets());
        let mut b = DVector::zeros(self.n_targets());
        for t in 0..self.n_targets() {
            let mut bias = self.weights[(p, t)];
            for f in 0..p {
                let coef = self.weights[(f, t)] / self.feature_scales[f];
                w[(f, t)] = coef;
                bias -= coef * self.feature_means[f];
            }
            b[t] = bias;
        }
        (w, b)
    }

    /// Predict from a design that already carries any lag embedding.
    pub fn predict_design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DecodeError> {
        let p = self.n_features();
        if x.ncols() != p {
            return Err(DecodeError::FeatureMismatch { expected: p, found: x.ncols() });
        }
        let z = standardize_with(x, &self.feature_means, &self.feature_scales);
        let mut out = z * self.weights.rows(0, p);
        for mut row in out.row_iter_mut() {
            row += self.weights.row(p);
        }
        Ok(out)
    }

    /// Predict from raw rows; the first `history_steps` rows only feed the
    /// embedding, so the output has `rows - history_steps` rows.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, DecodeError> {
        if self.history_steps == 0 {
            return self.predict_design(x);
        }
        let raw = self.n_features() / (self.history_steps + 1);
        if x.ncols() != raw {
            return Err(DecodeError::FeatureMismatch { expected: raw, found: x.ncols() });
        }
        self.predict_design(&lagged_embed(x, self.history_steps)?)
    }
}

fn standardize_with(x: &DMatrix<f64>, means: &[f64], scales: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - means[c]) / scales[c])
}

/// Embed `x` with `history_steps` lags and fit. `y` may have either the
/// raw row count (its first `history_steps` rows are dropped) or the
/// embedded row count.
pub fn ridge_fit(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    history_steps: usize,
) -> Result<RidgeModel, DecodeError> {
    if history_steps == 0 {
        return ridge_fit_design(x, y, lambda, RidgeOptions::default());
    }
    let design = lagged_embed(x, history_steps)?;
    let targets = if y.nrows() == x.nrows() {
        y.rows(history_steps, design.nrows()).into_owned()
    } else {
        y.clone()
    };
    let mut model = ridge_fit_design(&design, &targets, lambda, RidgeOptions::default())?;
    model.history_steps = history_steps;
    Ok(model)
}

/// Fit on a ready-made design matrix.
pub fn ridge_fit_design(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    opts: RidgeOptions,
) -> Result<RidgeModel, DecodeError> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(DecodeError::BadLambda(lambda));
    }
    let (n, p) = x.shape();
    if n != y.nrows() {
        return Err(DecodeError::RowMismatch { x: n, y: y.nrows() });
    }
    if n == 0 || p == 0 || y.ncols() == 0 {
        return Err(DecodeError::Empty);
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(DecodeError::NonFinite);
    }
    let nf = n as f64;
    let mut means = vec![0.0; p];
    let mut scales = vec![1.0; p];
    if opts.standardize {
        for c in 0..p {
            let col = x.column(c);
            let m = col.sum() / nf;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf).sqrt();
            means[c] = m;
            scales[c] = if sd > 0.0 { sd } else { 1.0 };
        }
    }
    let z = standardize_with(x, &means, &scales);
    let (zc, yc, z_mean, y_mean) = if opts.fit_intercept {
        let zm: Vec<f64> = (0..p).map(|c| z.column(c).sum() / nf).collect();
        let ym: Vec<f64> = (0..y.ncols()).map(|c| y.column(c).sum() / nf).collect();
        let zc = DMatrix::from_fn(n, p, |r, c| z[(r, c)] - zm[c]);
        let yc = DMatrix::from_fn(n, y.ncols(), |r, c| y[(r, c)] - ym[c]);
        (zc, yc, zm, ym)
    } else {
        (z, y.clone(), vec![0.0; p], vec![0.0; y.ncols()])
    };
    let (w, rank) = if lambda == 0.0 {
        let svd = zc.svd(true, true);
        let tol = svd.singular_values.max() * (n.max(p) as f64) * f64::EPSILON;
        let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
        (svd.solve(&yc, tol).map_err(|_| DecodeError::NonFinite)?, rank)
    } else {
        let mut gram = zc.transpose() * &zc;
        let eig = gram.clone().symmetric_eigenvalues();
        let tol = eig.max().max(0.0) * (n.max(p) as f64) * f64::EPSILON;
        let rank = eig.iter().filter(|&&e| e > tol).count();
        for k in 0..p {
            gram[(k, k)] += lambda;
        }
        let rhs = zc.transpose() * &yc;
        let w = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram.lu().solve(&rhs).ok_or(DecodeError::NonFinite)?,
        };
        (w, rank)
    };
    let mut weights = DMatrix::zeros(p + 1, y.ncols());
    weights.rows_mut(0, p).copy_from(&w);
    for t in 0..y.ncols() {
        let shift: f64 = (0..p).map(|f| z_mean[f] * w[(f, t)]).sum();
        weights[(p, t)] = y_mean[t] - shift;
    }
    Ok(RidgeModel {
        weights,
        lambda,
        history_steps: 0,
        feature_means: means,
        feature_scales: scales,
        rank,
    })
}

/// Indicator matrix with one column per class.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<DMatrix<f64>, DecodeError> {
    let mut y = DMatrix::zeros(labels.len(), n_classes);
    for (r, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(DecodeError::BadClass { index: l, classes: n_classes });
        }
        y[(r, l)] = 1.0;
    }
    Ok(y)
}

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(scores: &DMatrix<f64>) -> Vec<usize> {
    scores
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn classify(model: &RidgeModel, x: &DMatrix<f64>) -> Result<Vec<usize>, DecodeError> {
    Ok(argmax_rows(&model.predict(x)?))
}

/// Test-row indices per fold. Whole groups are dealt round-robin to folds
/// in order of first appearance, so no group is split.
pub fn grouped_folds(groups: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    for &g in groups {
        if !order.contains(&g) {
            order.push(g);
        }
    }
    let k = k.min(order.len()).max(1);
    let mut folds = vec![Vec::new(); k];
    for (i, &g) in groups.iter().enumerate() {
        let slot = order.iter().position(|&o| o == g).unwrap_or(0) % k;
        folds[slot].push(i);
    }
    folds
}

/// Log-spaced grid from 1e-3 to 1e3.
pub fn default_lambda_grid() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(e)).collect()
}

fn take_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

/// Pick the grid value with the lowest held-out squared error over
/// grouped folds. Ties keep the smaller lambda.
pub fn select_lambda(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    groups: &[usize],
    folds: usize,
    grid: &[f64],
) -> Result<f64, DecodeError> {
    if groups.len() != x.nrows() {
        return Err(DecodeError::LengthMismatch(groups.len(), x.nrows()));
    }
    let folds = grouped_folds(groups, folds);
    if folds.len() < 2 {
        return Err(DecodeError::TooFewGroups(folds.len()));
    }
    let mut best = (f64::INFINITY, grid.first().copied().ok_or(DecodeError::Empty)?);
    for &lambda in grid {
        let mut err = 0.0;
        for test in &folds {
            let train: Vec<usize> = (0..x.nrows()).filter(|i| !test.contains(i)).collect();
            let model = ridge_fit_design(&take_rows(x, &train), &take_rows(y, &train), lambda, RidgeOptions::default())?;
            let pred = model.predict_design(&take_rows(x, test))?;
            err += (pred - take_rows(y, test)).norm_squared();
        }
        if err < best.0 {
            best = (err, lambda);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Rows are truth, columns prediction.
    pub counts: Vec<Vec<u64>>,
    pub labels: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Self {
        let labels = (0..counts.len()).map(|i| i.to_string()).collect();
        Self { counts, labels }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], labels: &[String]) -> Result<Self, DecodeError> {
        if truth.len() != pred.len() {
            return Err(DecodeError::LengthMismatch(truth.len(), pred.len()));
        }
        let k = labels.len();
        let mut counts = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(pred) {
            for idx in [t, p] {
                if idx >= k {
                    return Err(DecodeError::BadClass { index: idx, classes: k });
                }
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts, labels: labels.to_vec() })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub cohens_kappa: f64,
    pub expected_agreement: f64,
    /// `None` for classes absent from the truth.
    pub recalls: Vec<Option<f64>>,
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics, DecodeError> {
    let total = cm.total();
    if total == 0 {
        return Err(DecodeError::Empty);
    }
    let k = cm.counts.len();
    let n = total as f64;
    let diag: u64 = (0..k).map(|i| cm.counts[i][i]).sum();
    let row: Vec<u64> = cm.counts.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<u64> = (0..k).map(|j| cm.counts.iter().map(|r| r[j]).sum()).collect();
    let recalls: Vec<Option<f64>> = (0..k)
        .map(|i| (row[i] > 0).then(|| cm.counts[i][i] as f64 / row[i] as f64))
        .collect();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    let p_o = diag as f64 / n;
    let p_e: f64 = (0..k).map(|i| row[i] as f64 * col[i] as f64).sum::<f64>() / (n * n);
    let kappa = if p_e >= 1.0 { 0.0 } else { (p_o - p_e) / (1.0 - p_e) };
    Ok(ClassificationMetrics {
        accuracy: p_o,
        balanced_accuracy: present.iter().sum::<f64>() / present.len() as f64,
        cohens_kappa: kappa,
        expected_agreement: p_e,
        recalls,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularMetrics {
    pub circular_mae_deg: f64,
    pub matched_harmonic_r2: f64,
    pub bin4_accuracy: f64,
}

fn wrap(phase: f64) -> f64 {
    let p = phase.rem_euclid(TAU);
    if p >= TAU {
        0.0
    } else {
        p
    }
}

/// Absolute angular difference on the circle, in [0, pi].
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Phases are wrapped into [0, 2 pi) before binning. The R^2 pools the
/// cosine and sine coordinates of the unit-circle embedding.
pub fn circular_metrics(pred: &[f64], truth: &[f64], n_bins: usize) -> Result<CircularMetrics, DecodeError> {
    if pred.len() != truth.len() {
        return Err(DecodeError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() || n_bins == 0 {
        return Err(DecodeError::Empty);
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(DecodeError::NonFinite);
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| circular_distance(*p, *t)).sum::<f64>() / n;
    let bin = |p: f64| ((wrap(p) / TAU * n_bins as f64) as usize).min(n_bins - 1);
    let hits = pred.iter().zip(truth).filter(|(p, t)| bin(**p) == bin(**t)).count();
    let (mc, ms) = truth.iter().fold((0.0, 0.0), |(c, s), t| (c + t.cos() / n, s + t.sin() / n));
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        ss_res += (p.cos() - t.cos()).powi(2) + (p.sin() - t.sin()).powi(2);
        ss_tot += (t.cos() - mc).powi(2) + (t.sin() - ms).powi(2);
    }
    let r2 = if ss_tot == 0.0 { 0.0 } else { 1.0 - ss_res / ss_tot };
    Ok(CircularMetrics {
        circular_mae_deg: mae.to_degrees(),
        matched_harmonic_r2: r2,
        bin4_accuracy: hits as f64 / n,
    })
}

/// atan2 recomposition into [0, 2 pi); the zero vector maps to 0.
pub fn phase_from(cos: f64, sin: f64) -> f64 {
    if cos == 0.0 && sin == 0.0 {
        return 0.0;
    }
    wrap(sin.atan2(cos))
}

pub fn decode_phase(pairs: &[(f64, f64)]) -> Vec<f64> {
    pairs.iter().map(|&(c, s)| phase_from(c, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairFit {
    pub w_a: f64,
    pub w_b: f64,
    pub r_squared: f64,
}

fn flatten(t: &Trace) -> Vec<f64> {
    t.samples.as_slice().to_vec()
}

/// Non-negative two-template least squares over all channels jointly.
pub fn template_fit_pair(response: &Trace, a: &Trace, b: &Trace) -> Result<PairFit, DecodeError> {
    for t in [a, b] {
        if t.samples.shape() != response.samples.shape() {
            return Err(DecodeError::LengthMismatch(t.samples.len(), response.samples.len()));
        }
    }
    template_fit_slices(&flatten(response), &flatten(a), &flatten(b))
}

pub fn template_fit_slices(r: &[f64], a: &[f64], b: &[f64]) -> Result<PairFit, DecodeError> {
    if a.len() != r.len() || b.len() != r.len() {
        return Err(DecodeError::LengthMismatch(a.len().max(b.len()), r.len()));
    }
    if r.is_empty() {
        return Err(DecodeError::Empty);
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let (aa, bb, ab) = (dot(a, a), dot(b, b), dot(a, b));
    let (ar, br) = (dot(a, r), dot(b, r));
    if aa == 0.0 && bb == 0.0 {
        return Err(DecodeError::ZeroTemplates);
    }
    let sse = |wa: f64, wb: f64| {
        r.iter().zip(a).zip(b).map(|((r, a), b)| (r - wa * a - wb * b).powi(2)).sum::<f64>()
    };
    let mut candidates = vec![(0.0, 0.0)];
    if aa > 0.0 {
        candidates.push(((ar / aa).max(0.0), 0.0));
    }
    if bb > 0.0 {
        candidates.push((0.0, (br / bb).max(0.0)));
    }
    let det = aa * bb - ab * ab;
    if det > 1e-12 * aa * bb {
        let wa = (ar * bb - br * ab) / det;
        let wb = (br * aa - ar * ab) / det;
        if wa >= 0.0 && wb >= 0.0 {
            candidates.push((wa, wb));
        }
    }
    let (w_a, w_b, err) = candidates
        .into_iter()
        .map(|(wa, wb)| (wa, wb, sse(wa, wb)))
        .fold((0.0, 0.0, f64::INFINITY), |best, c| if c.2 < best.2 { c } else { best });
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    let ss_tot: f64 = r.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 0.0 } else { 1.0 - err / ss_tot };
    Ok(PairFit { w_a, w_b, r_squared })
}

/// Fraction of trials with both presence bits right.
pub fn joint_bit_accuracy(pred: &[(bool, bool)], truth: &[(bool, bool)]) -> Result<f64, DecodeError> {
    if pred.len() != truth.len() {
        return Err(DecodeError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(DecodeError::Empty);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Share of one-sided spectral power within one bin of the fundamental.
pub fn entrainment_index(channel: &[f64], sample_rate_hz: f64, fundamental_hz: f64) -> Result<f64, DecodeError> {
    let nyquist = sample_rate_hz / 2.0;
    if !(fundamental_hz > 0.0 && fundamental_hz <= nyquist) {
        return Err(DecodeError::AboveNyquist { freq_hz: fundamental_hz, nyquist_hz: nyquist });
    }
    let needed = (3.0 * sample_rate_hz / fundamental_hz).ceil() as usize;
    let n = channel.len();
    if n < needed {
        return Err(DecodeError::TooShort { samples: n, needed });
    }
    let mags = dft_magnitudes(channel);
    let half = n / 2;
    let power: Vec<f64> = (0..=half).map(|k| mags[k] * mags[k]).collect();
    let total: f64 = power[1..].iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let k0 = (fundamental_hz * n as f64 / sample_rate_hz).round() as usize;
    let lo = k0.saturating_sub(1).max(1);
    let hi = (k0 + 1).min(half);
    Ok(power[lo..=hi].iter().sum::<f64>() / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub actual: f64,
    pub predicted: f64,
}

/// Decoder output bundle for plotting and summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    pub lambda: Option<f64>,
    pub history_steps: usize,
    pub confusion: Option<ConfusionMatrix>,
    pub classification: Option<ClassificationMetrics>,
    pub circular: Option<CircularMetrics>,
    pub series: Vec<SeriesPoint>,
}
