//! Intensity-response calibration: exact refits, closed-loop steady-state
//! sweeps, noisy Monte Carlo, and the multi-strain endpoint-normalized fits.

use mindkit_core::calibrate::{fit_hill, HillFit, HillReport};
use mindkit_core::preprocess::{fit_linear_drift, remove_drift};
use mindkit_core::synth::{synth_session, BaselineModel, HillResponse, SynthParams};
use mindkit_core::{Session, StimulusClass, StimulusEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::{median, steady_response, Ctx, ExperimentError};
use crate::config::ExperimentId;
use crate::report::{num, Artifact, BenchOutput, Check, Summary};

pub const TUBE_LEVELS: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

/// Eleven panel levels from 0 to 255.
pub fn pixel_levels() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 25.5).collect()
}

const ONSET_S: f64 = 20.0;
const TAIL_S: f64 = 10.0;
const PRE_S: f64 = 5.0;

/// Published strain calibrations: name, E (% LED output), n.
pub const STRAINS: [(&str, f64, f64); 5] = [
    ("blue-oyster", 6.75, 0.90),
    ("reishi", 6.97, 1.10),
    ("lions-mane", 61.09, 0.95),
    ("cordyceps", 62.29, 2.59),
    ("turkey-tail", 117.06, 1.73),
];

#[derive(Serialize)]
struct ParamRow {
    amplitude_mv: f64,
    half_level: f64,
    exponent: f64,
    r_squared: f64,
}

impl From<&HillFit> for ParamRow {
    fn from(f: &HillFit) -> Self {
        Self {
            amplitude_mv: f.amplitude_mv,
            half_level: f.half_level,
            exponent: f.exponent,
            r_squared: f.r_squared,
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Noise SD that gives the expected R² on a curve with the given spread:
/// with `k = 1 - R²`, `σ² = k SS / ((n - 3) - k (n - 1))` for a
/// three-parameter fit.
pub fn sigma_for_r2(values: &[f64], r2: f64) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    let k = 1.0 - r2;
    (k * ss / ((n - 3.0) - k * (n - 1.0))).sqrt()
}

/// One session with a single long white-light step at `level`.
fn level_session(
    curve: HillResponse,
    level: f64,
    stim_s: f64,
    baseline: BaselineModel,
    seed: u64,
) -> Result<Session, ExperimentError> {
    let params = SynthParams {
        duration_s: ONSET_S + stim_s + PRE_S,
        baseline,
        hill: Some(curve),
        ..SynthParams::default()
    };
    let plan = [StimulusEvent::new(StimulusClass::WhiteLight, ONSET_S, stim_s, level)];
    Ok(synth_session(&plan, &params, seed)?)
}

/// Steady-state response after removing the resting drift line fitted on
/// the pre-stimulus baseline. Exact for noise-free sessions.
fn detrended_steady(session: &Session) -> Result<f64, ExperimentError> {
    let fits = fit_linear_drift(&session.trace, session.baseline_window_s)?;
    let flat = Session {
        trace: remove_drift(&session.trace, &fits),
        ..session.clone()
    };
    Ok(steady_response(&flat, &flat.events[0], TAIL_S, PRE_S))
}

struct Sweep {
    points: Vec<(f64, f64)>,
    sessions: Vec<Session>,
}

/// Closed-loop sweep: `reps` sessions per level, mean steady response.
#[allow(clippy::too_many_arguments)]
fn sweep(
    ctx: &Ctx<'_>,
    stream: &str,
    curve: HillResponse,
    levels: &[f64],
    reps: usize,
    stim_s: f64,
    baseline: BaselineModel,
    detrend: bool,
) -> Result<Sweep, ExperimentError> {
    let seeds = ctx.seeds();
    let jobs: Vec<(usize, usize)> = (0..levels.len()).flat_map(|l| (0..reps).map(move |r| (l, r))).collect();
    let results: Vec<(f64, Session)> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(l, _))| {
            let s = level_session(curve, levels[l], stim_s, baseline, seeds.sub(stream, j as u64))?;
            let y = if detrend {
                detrended_steady(&s)?
            } else {
                steady_response(&s, &s.events[0], TAIL_S, PRE_S)
            };
            Ok((y, s))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let mut points = Vec::with_capacity(levels.len());
    for (l, &level) in levels.iter().enumerate() {
        let ys: Vec<f64> = results[l * reps..(l + 1) * reps].iter().map(|r| r.0).collect();
        points.push((level, super::mean(&ys)));
    }
    Ok(Sweep { points, sessions: results.into_iter().map(|r| r.1).collect() })
}

fn curve_artifact(name: &str, report: &HillReport) -> Artifact {
    Artifact::csv(
        name,
        &["level", "observed_mv", "predicted_mv", "residual_mv"],
        report.points.iter().map(|p| vec![num(p.x), num(p.observed), num(p.predicted), num(p.residual)]),
    )
}

/// Parameter checks, on absolute errors when `absolute` and relative ones otherwise.
fn param_checks(summary: &mut Summary, prefix: &str, fit: &HillFit, truth: HillResponse, tol: f64, absolute: bool) {
    summary.metric(&format!("{prefix}_amplitude_mv"), fit.amplitude_mv);
    summary.metric(&format!("{prefix}_half_level"), fit.half_level);
    summary.metric(&format!("{prefix}_exponent"), fit.exponent);
    summary.metric(&format!("{prefix}_r_squared"), fit.r_squared);
    let (kind, err): (&str, fn(f64, f64) -> f64) =
        if absolute { ("abs", |a, b| (a - b).abs()) } else { ("rel", rel) };
    for (name, got, want) in [
        ("amplitude", fit.amplitude_mv, truth.amplitude_mv),
        ("half_level", fit.half_level, truth.half_level),
        ("exponent", fit.exponent, truth.exponent),
    ] {
        summary.check(Check::at_most(&format!("{prefix}_{name}_{kind}_error"), err(got, want), tol));
    }
}

/// `hill-tube` and `hill-pixel`.
pub fn run(ctx: &Ctx<'_>, id: ExperimentId) -> Result<BenchOutput, ExperimentError> {
    let pixel = id == ExperimentId::HillPixel;
    let (truth, levels, exact_tol) = if pixel {
        (HillResponse::PIXEL, pixel_levels(), 1e-4)
    } else {
        (HillResponse::TUBE, TUBE_LEVELS.to_vec(), 1e-6)
    };
    let reps = ctx.overrides.usize("reps", 3)?;
    let stim_s = ctx.overrides.f64("stimulus_s", 120.0)?;
    let noise = ctx.overrides.f64("noise_mv", BaselineModel::default().noise_sigma_mv)?;
    let closed_tol = ctx.overrides.f64("closed_loop_tol", 0.01)?;
    let keep = ctx.keep_sessions()?;
    let mut summary = Summary::new(id, ctx.seed, ctx.overrides.as_map().clone());
    let mut artifacts = Vec::new();

    // exact recovery from the published curve
    let exact: Vec<(f64, f64)> = levels.iter().map(|&l| (l, truth.eval(l))).collect();
    let fit = fit_hill(&exact, false)?;
    param_checks(&mut summary, "exact", &fit, truth, exact_tol, true);
    artifacts.push(curve_artifact("exact_curve.csv", &HillReport::new(fit, &exact)));

    // closed loop: synthesize, measure steady state, refit
    let baseline = BaselineModel { noise_sigma_mv: noise, ..BaselineModel::default() };
    let sw = sweep(ctx, "hill-levels", truth, &levels, reps, stim_s, baseline, false)?;
    let fit = fit_hill(&sw.points, false)?;
    param_checks(&mut summary, "closed_loop", &fit, truth, closed_tol, false);
    summary.table("closed_loop_fit", &ParamRow::from(&fit))?;
    artifacts.push(curve_artifact("closed_loop_curve.csv", &HillReport::new(fit, &sw.points)));

    if pixel {
        monte_carlo(ctx, &mut summary, &mut artifacts, truth, &levels)?;
    }
    Ok(BenchOutput { summary, artifacts, sessions: keep.select("level", sw.sessions) })
}

/// Noisy per-point refits over many seeds with the noise tuned to the
/// published fit quality.
fn monte_carlo(
    ctx: &Ctx<'_>,
    summary: &mut Summary,
    artifacts: &mut Vec<Artifact>,
    truth: HillResponse,
    levels: &[f64],
) -> Result<(), ExperimentError> {
    let seeds = ctx.overrides.usize("mc_seeds", 100)?;
    let target_r2 = ctx.overrides.f64("mc_r2", 0.93)?;
    let clean: Vec<f64> = levels.iter().map(|&l| truth.eval(l)).collect();
    let sigma = sigma_for_r2(&clean, target_r2);
    let src = ctx.seeds();
    let fits: Vec<HillFit> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(src.sub("hill-mc", s as u64));
            let pts: Vec<(f64, f64)> = levels
                .iter()
                .zip(&clean)
                .map(|(&l, &y)| (l, y + sigma * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            fit_hill(&pts, false)
        })
        .collect::<Result<_, _>>()?;
    let es: Vec<f64> = fits.iter().map(|f| f.half_level).collect();
    let r2s: Vec<f64> = fits.iter().map(|f| f.r_squared).collect();
    let within = es.iter().filter(|e| rel(**e, truth.half_level) <= 0.1).count() as f64 / seeds as f64;
    summary.metric("mc_noise_sigma_mv", sigma);
    summary.metric("mc_median_r_squared", median(&r2s));
    summary.metric("mc_median_half_level", median(&es));
    summary.metric("mc_fraction_half_level_within_10pct", within);
    summary.check(Check::at_most("mc_median_half_level_rel_error", rel(median(&es), truth.half_level), 0.1));
    summary.check(Check::near("mc_median_r_squared", median(&r2s), target_r2, 0.03));
    artifacts.push(Artifact::csv(
        "monte_carlo.csv",
        &["seed_index", "amplitude_mv", "half_level", "exponent", "r_squared"],
        fits.iter().enumerate().map(|(i, f)| {
            vec![i.to_string(), num(f.amplitude_mv), num(f.half_level), num(f.exponent), num(f.r_squared)]
        }),
    ));
    Ok(())
}

/// `strains`: endpoint-normalized refits of five strain generators from
/// noise-free closed-loop plateaus.
pub fn run_strains(ctx: &Ctx<'_>) -> Result<BenchOutput, ExperimentError> {
    let amplitude = ctx.overrides.f64("amplitude_mv", HillResponse::TUBE.amplitude_mv)?;
    let stim_s = ctx.overrides.f64("stimulus_s", 150.0)?;
    let keep = ctx.keep_sessions()?;
    let mut summary = Summary::new(ExperimentId::Strains, ctx.seed, ctx.overrides.as_map().clone());
    let mut artifacts = Vec::new();
    let mut kept = Vec::new();
    let mut rows = Vec::new();
    for (i, &(name, e, n)) in STRAINS.iter().enumerate() {
        let truth = HillResponse { amplitude_mv: amplitude, half_level: e, exponent: n };
        let sw = sweep(ctx, &format!("strain-{i}"), truth, &TUBE_LEVELS, 1, stim_s, BaselineModel::noiseless(), true)?;
        let fit = fit_hill(&sw.points, true)?;
        summary.metric(&format!("{name}_half_level"), fit.half_level);
        summary.metric(&format!("{name}_exponent"), fit.exponent);
        summary.metric(&format!("{name}_r_squared"), fit.r_squared);
        summary.check(Check::at_most(&format!("{name}_half_level_rel_error"), rel(fit.half_level, e), 0.01));
        summary.check(Check::at_most(&format!("{name}_exponent_rel_error"), rel(fit.exponent, n), 0.02));
        rows.push(vec![name.to_string(), num(e), num(n), num(fit.half_level), num(fit.exponent), num(fit.r_squared)]);
        artifacts.push(curve_artifact(&format!("{name}_curve.csv"), &HillReport::new(fit, &sw.points)));
        kept.extend(keep.select(name, sw.sessions));
    }
    artifacts.push(Artifact::csv(
        "strains.csv",
        &["strain", "true_half_level", "true_exponent", "fit_half_level", "fit_exponent", "r_squared"],
        rows,
    ));
    Ok(BenchOutput { summary, artifacts, sessions: kept })
}
