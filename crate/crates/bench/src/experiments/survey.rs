//! Resting drift, per-stimulus kinetics and loading-rate envelopes.

use mindkit_core::calibrate::{fit_rate_envelope, RateCurve, RateLabel};
use mindkit_core::features::{extract_event_features, EventFeatures, FeatureConfig};
use mindkit_core::preprocess::{fit_line, fit_linear_drift, remove_drift, slope_standard_error};
use mindkit_core::synth::{default_rise_s, synth_session, BaselineModel, SynthParams, SURVEY_TABLE};
use mindkit_core::{slice_events, Session, StimulusEvent};
use rayon::prelude::*;
use serde::Serialize;

use super::{mean, median, sd, Ctx, ExperimentError, Seeds};
use crate::config::ExperimentId;
use crate::report::{num, Artifact, BenchOutput, Check, Summary};

const ONSET_S: f64 = 20.0;
const MAX_SESSION_S: f64 = 600.0;

/// Resting recording: 12 h at one sample every 5 s.
const DRIFT_RATE_HZ: f64 = 0.2;
const DRIFT_SPAN_S: f64 = 12.0 * 3600.0;

fn drift_session(noise: f64, seed: u64) -> Result<Session, ExperimentError> {
    let params = SynthParams {
        sample_rate_hz: DRIFT_RATE_HZ,
        n_channels: 1,
        duration_s: DRIFT_SPAN_S,
        baseline: BaselineModel { noise_sigma_mv: noise, ..BaselineModel::default() },
        ..SynthParams::default()
    };
    Ok(synth_session(&[], &params, seed)?)
}

/// Noise SD giving the expected R² for a straight line over the span.
fn drift_sigma_for_r2(r2: f64) -> f64 {
    let b = BaselineModel::default();
    let n = (DRIFT_SPAN_S * DRIFT_RATE_HZ).round();
    let dt = 1.0 / DRIFT_RATE_HZ;
    // population variance of an evenly sampled line
    let var_line = b.drift_mv_per_s.powi(2) * dt * dt * (n * n - 1.0) / 12.0;
    (var_line * (1.0 / r2 - 1.0)).sqrt()
}

fn drift(ctx: &Ctx<'_>, summary: &mut Summary) -> Result<Vec<Vec<String>>, ExperimentError> {
    let truth = BaselineModel::default();
    let exact = drift_session(0.0, ctx.sub_seed("drift-exact", 0))?;
    let t = exact.trace.times();
    let y = exact.trace.channel(0);
    let fit = fit_line(&t, y)?;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let slope_err = (fit.slope_mv_per_s - truth.drift_mv_per_s).abs() / truth.drift_mv_per_s;
    let icpt_err = (fit.intercept_mv - truth.intercept_mv).abs();
    summary.metric("drift_exact_slope_mv_per_s", fit.slope_mv_per_s);
    summary.metric("drift_exact_intercept_mv", fit.intercept_mv);
    summary.check(Check::at_most("drift_exact_slope_rel_error", slope_err, 64.0 * f64::EPSILON));
    summary.check(Check::at_most("drift_exact_intercept_abs_error_mv", icpt_err, 64.0 * f64::EPSILON * scale));

    let seeds_n = ctx.overrides.usize("drift_seeds", 100)?;
    let target_r2 = ctx.overrides.f64("drift_r2", 0.947)?;
    let sigma = drift_sigma_for_r2(target_r2);
    let seeds = ctx.seeds();
    let rows: Vec<(f64, f64, f64)> = (0..seeds_n as u64)
        .into_par_iter()
        .map(|i| {
            let s = drift_session(sigma, seeds.sub("drift-noisy", i))?;
            let t = s.trace.times();
            let y = s.trace.channel(0);
            let f = fit_line(&t, y)?;
            Ok((f.slope_mv_per_s, slope_standard_error(&t, y, &f), f.r_squared))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let within = rows
        .iter()
        .filter(|(s, se, _)| (s - truth.drift_mv_per_s).abs() <= 3.0 * se)
        .count() as f64
        / rows.len().max(1) as f64;
    let r2s: Vec<f64> = rows.iter().map(|r| r.2).collect();
    summary.metric("drift_noise_sigma_mv", sigma);
    summary.metric("drift_median_r_squared", median(&r2s));
    summary.metric("drift_fraction_slope_within_3se", within);
    summary.check(Check::near("drift_median_r_squared", median(&r2s), target_r2, 0.01));
    summary.check(Check::at_least("drift_fraction_slope_within_3se", within, 0.98));
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, (s, se, r2))| vec![i.to_string(), num(*s), num(*se), num(*r2)])
        .collect())
}

#[derive(Serialize)]
struct KineticsRow {
    class: String,
    dv_true_mv: f64,
    dv_measured_mv: f64,
    tau_true_s: f64,
    tau_measured_s: Option<f64>,
    below_resolution: bool,
    pass: bool,
}

/// Noise-free single events for each survey row.
fn kinetics(summary: &mut Summary) -> Result<Vec<KineticsRow>, ExperimentError> {
    let cfg = FeatureConfig::default();
    let mut out = Vec::new();
    for row in &SURVEY_TABLE {
        let rise = default_rise_s(row.tau_1e_s);
        let params = SynthParams {
            duration_s: ONSET_S + rise + 4.0 * row.tau_1e_s + 5.0,
            baseline: BaselineModel::noiseless(),
            n_channels: 1,
            ..SynthParams::default()
        };
        let dt = 1.0 / params.sample_rate_hz;
        let plan = [StimulusEvent::new(row.class.clone(), ONSET_S, 0.0, 1.0)];
        let session = synth_session(&plan, &params, 0)?;
        let fits = fit_linear_drift(&session.trace, session.baseline_window_s)?;
        let flat = remove_drift(&session.trace, &fits);
        let window = flat.slice_rows(flat.index_at_or_after(ONSET_S - 1.0), flat.n_samples());
        let f = &extract_event_features(&window, &[1e-3], ONSET_S, 0.0, &cfg)?[0];
        let dv_ok = (f.dv_max_mv - row.dv_max_mv).abs() <= row.dv_max_mv * dt / rise + 1e-9;
        let unresolvable = row.tau_1e_s < cfg.tau_resolution_samples * dt;
        let tau_ok = if unresolvable {
            f.tau_below_resolution
        } else {
            !f.tau_below_resolution && f.tau_1e_s.is_some_and(|t| (t - row.tau_1e_s).abs() <= dt)
        };
        let name = row.class.name();
        summary.check(Check::flag(&format!("kinetics_{name}_dv"), dv_ok));
        summary.check(Check::flag(&format!("kinetics_{name}_tau"), tau_ok));
        out.push(KineticsRow {
            class: name,
            dv_true_mv: row.dv_max_mv,
            dv_measured_mv: f.dv_max_mv,
            tau_true_s: row.tau_1e_s,
            tau_measured_s: f.tau_1e_s,
            below_resolution: f.tau_below_resolution,
            pass: dv_ok && tau_ok,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct NoisyRow {
    class: String,
    events: usize,
    sessions: usize,
    dv_mean_mv: f64,
    dv_sd_mv: f64,
    snr_mean: f64,
    tau_median_s: f64,
    below_resolution_fraction: f64,
}

/// 30 events per class at the class's own noise level, split into
/// sessions of at most ten minutes.
fn noisy_class(
    seeds: Seeds,
    class_index: usize,
    events: usize,
) -> Result<(NoisyRow, Session), ExperimentError> {
    let row = &SURVEY_TABLE[class_index];
    let rise = default_rise_s(row.tau_1e_s);
    let isi = (rise + 5.0 * row.tau_1e_s + 5.0).max(10.0);
    let per_session = (((MAX_SESSION_S - ONSET_S - 1.0) / isi).floor() as usize).max(1);
    let n_sessions = events.div_ceil(per_session);
    let cfg = FeatureConfig::default();
    let mut feats: Vec<EventFeatures> = Vec::with_capacity(events);
    let mut first = None;
    for s in 0..n_sessions {
        let k = per_session.min(events - s * per_session);
        let plan: Vec<StimulusEvent> = (0..k)
            .map(|i| StimulusEvent::new(row.class.clone(), ONSET_S + isi * i as f64, 0.0, 1.0))
            .collect();
        let params = SynthParams {
            n_channels: 1,
            duration_s: (ONSET_S + isi * k as f64).min(MAX_SESSION_S),
            baseline: BaselineModel::for_class(&row.class),
            ..SynthParams::default()
        };
        let session = synth_session(&plan, &params, seeds.sub(&format!("survey-{class_index}"), s as u64))?;
        let fits = fit_linear_drift(&session.trace, session.baseline_window_s)?;
        let flat = Session { trace: remove_drift(&session.trace, &fits), ..session.clone() };
        let base = flat.baseline_trace();
        let sigma = sd(base.channel(0)).max(1e-9);
        for (event, window) in slice_events(&flat, 1.0, isi - 1.0) {
            feats.push(extract_event_features(&window, &[sigma], event.onset_s, 0.0, &cfg)?.remove(0));
        }
        if first.is_none() {
            first = Some(session);
        }
    }
    let dv: Vec<f64> = feats.iter().map(|f| f.dv_max_mv).collect();
    let snr: Vec<f64> = feats.iter().map(|f| f.snr_mean).collect();
    let tau: Vec<f64> = feats.iter().filter_map(|f| f.tau_1e_s).collect();
    let below = feats.iter().filter(|f| f.tau_below_resolution).count() as f64 / feats.len() as f64;
    let first = first.ok_or_else(|| ExperimentError::Invalid("no survey sessions".into()))?;
    Ok((
        NoisyRow {
            class: row.class.name(),
            events: feats.len(),
            sessions: n_sessions,
            dv_mean_mv: mean(&dv),
            dv_sd_mv: sd(&dv),
            snr_mean: mean(&snr),
            tau_median_s: median(&tau),
            below_resolution_fraction: below,
        },
        first,
    ))
}

/// Name, rates, (mean, SD) at each rate, level span.
type RateFamily = (&'static str, [f64; 3], [(f64, f64); 3], (f64, f64));

/// End-of-range responses (mean, SD in mV) for slow, medium and fast
/// loading, with the rates and the level span.
const RATE_FAMILIES: [RateFamily; 3] = [
    ("pressure", [0.5, 2.0, 4.3], [(0.19, 0.01), (1.25, 0.20), (2.59, 0.21)], (10.7, 82.9)),
    ("vacuum", [0.16, 0.62, 1.30], [(0.35, 0.03), (0.51, 0.05), (1.41, 0.12)], (4.2, 22.8)),
    ("co2", [11.0, 74.0, 188.0], [(0.35, 0.02), (0.63, 0.03), (0.88, 0.06)], (0.32, 5.06)),
];

/// Five-level curves rising linearly from the span start to the published
/// end-of-range response.
fn rate_curves(end: [(f64, f64); 3], rates: [f64; 3], span: (f64, f64)) -> Vec<RateCurve> {
    let labels = [RateLabel::Slow, RateLabel::Medium, RateLabel::Fast];
    (0..3)
        .map(|r| {
            let pts: Vec<(f64, f64, f64)> = (1..=5)
                .map(|i| {
                    let frac = i as f64 / 5.0;
                    (span.0 + (span.1 - span.0) * frac, end[r].0 * frac, end[r].1 * frac)
                })
                .collect();
            RateCurve::new(labels[r], rates[r], &pts)
        })
        .collect()
}

pub fn run(ctx: &Ctx<'_>) -> Result<BenchOutput, ExperimentError> {
    let events = ctx.overrides.usize("events", 30)?;
    let keep = ctx.keep_sessions()?;
    let mut summary = Summary::new(ExperimentId::StimuliSurvey, ctx.seed, ctx.overrides.as_map().clone());
    let mut artifacts = Vec::new();

    let drift_rows = drift(ctx, &mut summary)?;
    artifacts.push(Artifact::csv("drift_seeds.csv", &["seed_index", "slope_mv_per_s", "slope_se", "r_squared"], drift_rows));

    let kin = kinetics(&mut summary)?;
    summary.metric("kinetics_rows_passing", kin.iter().filter(|r| r.pass).count() as f64);
    artifacts.push(Artifact::csv(
        "kinetics.csv",
        &["class", "dv_true_mv", "dv_measured_mv", "tau_true_s", "tau_measured_s", "below_resolution"],
        kin.iter().map(|r| {
            vec![
                r.class.clone(),
                num(r.dv_true_mv),
                num(r.dv_measured_mv),
                num(r.tau_true_s),
                r.tau_measured_s.map_or(String::new(), num),
                r.below_resolution.to_string(),
            ]
        }),
    ));
    summary.table("kinetics", &kin)?;

    let seeds = ctx.seeds();
    let noisy: Vec<(NoisyRow, Session)> = (0..SURVEY_TABLE.len())
        .into_par_iter()
        .map(|c| noisy_class(seeds, c, events))
        .collect::<Result<_, _>>()?;
    artifacts.push(Artifact::csv(
        "noisy_survey.csv",
        &["class", "events", "dv_mean_mv", "dv_sd_mv", "snr_mean", "tau_median_s", "below_resolution_fraction"],
        noisy.iter().map(|(r, _)| {
            vec![
                r.class.clone(),
                r.events.to_string(),
                num(r.dv_mean_mv),
                num(r.dv_sd_mv),
                num(r.snr_mean),
                num(r.tau_median_s),
                num(r.below_resolution_fraction),
            ]
        }),
    ));
    let (rows, sessions): (Vec<NoisyRow>, Vec<Session>) = noisy.into_iter().unzip();
    summary.table("noisy_survey", &rows)?;

    for (name, rates, end, span) in RATE_FAMILIES {
        let report = fit_rate_envelope(&rate_curves(end, rates, span))?;
        summary.check(Check::flag(&format!("{name}_envelopes_ordered"), report.ordered));
        summary.check(Check::flag(&format!("{name}_envelopes_distinguishable"), report.all_distinguishable));
        summary.table(&format!("{name}_envelopes"), &report)?;
    }

    Ok(BenchOutput { summary, artifacts, sessions: keep.select("survey", sessions) })
}
