//! Moving light bars. Rotating bars circle the tube walls and are decoded
//! as reduced phase; translating bars sweep the pixel panel and are decoded
//! as position. Both use lagged ridge on binned channel means with
//! leave-one-session-out evaluation.

use mindkit_core::decode::{
    circular_metrics, decode_phase, default_lambda_grid, entrainment_index, ridge_fit_design, select_lambda,
    CircularMetrics, RidgeOptions,
};
use mindkit_core::features::{binned_means, lagged_embed, reduced_phase};
use mindkit_core::synth::{synth_motion, BaselineModel, MotionResponse, MotionStimulus, SpatialGainMap};
use mindkit_core::{Session, StimulusClass};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::classify::take_rows;
use super::{mean, median, pearson, Ctx, ExperimentError, Seeds};
use crate::config::ExperimentId;
use crate::report::{num, Artifact, BenchOutput, Check, Summary};

pub const ROTATING_SPEEDS: [f64; 3] = [1.0, 6.0, 14.0];
pub const TRANSLATING_SPEEDS: [f64; 3] = [5.0, 10.0, 15.0];
/// Panel disk diameter over the panel width in px.
pub const PX_TO_MM: f64 = 60.0 / 128.0;

#[derive(Debug, Clone, Copy)]
struct MotionParams {
    sessions: usize,
    duration_s: f64,
    bin_s: f64,
    history: usize,
    lambda: Option<f64>,
    baseline: BaselineModel,
}

fn motion_params(ctx: &Ctx<'_>, duration_s: f64, bin_s: f64, wander: (f64, f64)) -> Result<MotionParams, ExperimentError> {
    let o = ctx.overrides;
    let white = BaselineModel::for_class(&StimulusClass::WhiteLight);
    let baseline = BaselineModel {
        noise_sigma_mv: o.f64("noise_mv", white.noise_sigma_mv)?,
        wander_sigma_mv: o.f64("wander_mv", wander.0)?,
        wander_tau_s: o.f64("wander_tau_s", wander.1)?,
        ..white
    };
    Ok(MotionParams {
        sessions: o.usize("sessions_per_condition", 3)?,
        duration_s: o.f64("duration_s", duration_s)?,
        bin_s: o.f64("bin_s", bin_s)?,
        history: o.usize("history", 8)?,
        lambda: match o.f64("lambda", -1.0)? {
            l if l >= 0.0 => Some(l),
            _ => None,
        },
        baseline,
    })
}

/// Binned features and per-bin targets of one session, with the settling
/// interval removed after embedding.
struct Design {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    truth: Vec<f64>,
}

/// Bin a session, embed `history` steps, and attach per-bin truth taken at
/// the last sample of each bin. Rows starting before `settle_s` are dropped.
fn design(
    session: &Session,
    bin_s: f64,
    history: usize,
    settle_s: f64,
    target: impl Fn(f64) -> Result<Vec<f64>, ExperimentError>,
) -> Result<Design, ExperimentError> {
    let trace = &session.trace;
    let centred = trace.map_channels(|x| {
        let m = mean(x);
        x.iter().map(|v| v - m).collect()
    });
    let per_bin = ((bin_s * trace.sample_rate_hz).round() as usize).max(1);
    let binned = binned_means(&centred, per_bin);
    let embedded = lagged_embed(&binned, history)?;
    let truth_all = session
        .truth
        .as_ref()
        .ok_or_else(|| ExperimentError::Invalid("motion session without ground truth".into()))?;
    let first = (settle_s / bin_s).ceil() as usize;
    let rows: Vec<usize> = (0..embedded.nrows()).filter(|&r| r + history >= first).collect();
    let truth: Vec<f64> = rows.iter().map(|&r| truth_all[(r + history + 1) * per_bin - 1]).collect();
    let targets: Vec<Vec<f64>> = truth.iter().map(|&t| target(t)).collect::<Result<_, _>>()?;
    let k = targets.first().map_or(0, Vec::len);
    Ok(Design {
        x: take_rows(&embedded, &rows),
        y: DMatrix::from_fn(rows.len(), k, |r, c| targets[r][c]),
        truth,
    })
}

/// Keep only the newest `history + 1` feature blocks of a lagged design.
fn newest(x: &DMatrix<f64>, channels: usize, history: usize) -> DMatrix<f64> {
    x.columns(0, channels * (history + 1)).into_owned()
}

fn stack(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let cols = parts.first().map_or(0, |m| m.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for m in parts {
        out.rows_mut(r0, m.nrows()).copy_from(m);
        r0 += m.nrows();
    }
    out
}

/// Held-out predictions for each session, trained on all the others.
fn leave_one_session_out(
    xs: &[DMatrix<f64>],
    ys: &[DMatrix<f64>],
    lambda: Option<f64>,
) -> Result<Vec<DMatrix<f64>>, ExperimentError> {
    if xs.len() < 2 {
        return Err(ExperimentError::Invalid("need at least two sessions per condition".into()));
    }
    let grid = default_lambda_grid();
    (0..xs.len())
        .map(|s| {
            let train: Vec<usize> = (0..xs.len()).filter(|&i| i != s).collect();
            let xt = stack(&train.iter().map(|&i| &xs[i]).collect::<Vec<_>>());
            let yt = stack(&train.iter().map(|&i| &ys[i]).collect::<Vec<_>>());
            let lam = match lambda {
                Some(l) => l,
                None => {
                    let groups: Vec<usize> =
                        train.iter().flat_map(|&i| std::iter::repeat_n(i, xs[i].nrows())).collect();
                    select_lambda(&xt, &yt, &groups, train.len(), &grid)?
                }
            };
            let model = ridge_fit_design(&xt, &yt, lam, RidgeOptions::default())?;
            Ok(model.predict_design(&xs[s])?)
        })
        .collect()
}

// ---------------------------------------------------------------- rotating

#[derive(Debug, Clone, Serialize)]
struct RotatingCell {
    speed_deg_s: f64,
    bar_count: u8,
    lagged: CircularMetrics,
    instantaneous: CircularMetrics,
    entrainment: f64,
}

fn rotating_cell(
    seeds: Seeds,
    replicate: usize,
    speed: f64,
    bars: u8,
    p: MotionParams,
    gains: &SpatialGainMap,
    keep: bool,
) -> Result<(RotatingCell, Vec<Session>), ExperimentError> {
    let stim = MotionStimulus::rotating(speed, bars, p.duration_s);
    let resp = MotionResponse::tube(gains);
    let fundamental = stim.fundamental_hz(resp.panel_width_px);
    let lap_s = 1.0 / fundamental;
    let tag = format!("rotating-{speed}-{bars}");
    let mut designs = Vec::with_capacity(p.sessions);
    let mut sessions = Vec::new();
    let mut joined: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for s in 0..p.sessions {
        let seed = seeds.sub(&tag, (replicate * p.sessions + s) as u64);
        let session = synth_motion(&stim, gains, &p.baseline, seed)?;
        let d = design(&session, p.bin_s, p.history, lap_s, |deg| {
            let phi = reduced_phase(deg, bars as u32)?;
            Ok(vec![phi.cos(), phi.sin()])
        })?;
        for (c, out) in joined.iter_mut().enumerate() {
            let x = session.trace.channel(c);
            let m = mean(x);
            out.extend(x.iter().map(|v| v - m));
        }
        designs.push(d);
        if keep {
            sessions.push(session);
        }
    }
    let fs = resp.sample_rate_hz;
    let entrainment = mean(
        &joined
            .iter()
            .map(|x| entrainment_index(x, fs, fundamental))
            .collect::<Result<Vec<_>, _>>()?,
    );
    let ys: Vec<DMatrix<f64>> = designs.iter().map(|d| d.y.clone()).collect();
    let truth: Vec<f64> = designs
        .iter()
        .flat_map(|d| d.truth.iter().map(|&t| reduced_phase(t, bars as u32)))
        .collect::<Result<_, _>>()?;
    let score = |xs: Vec<DMatrix<f64>>| -> Result<CircularMetrics, ExperimentError> {
        let preds = leave_one_session_out(&xs, &ys, p.lambda)?;
        let pairs: Vec<(f64, f64)> = preds.iter().flat_map(|m| m.row_iter().map(|r| (r[0], r[1])).collect::<Vec<_>>()).collect();
        Ok(circular_metrics(&decode_phase(&pairs), &truth, 4)?)
    };
    let lagged = score(designs.iter().map(|d| d.x.clone()).collect())?;
    let instantaneous = score(designs.iter().map(|d| newest(&d.x, 4, 0)).collect())?;
    Ok((RotatingCell { speed_deg_s: speed, bar_count: bars, lagged, instantaneous, entrainment }, sessions))
}

pub fn run_rotating(ctx: &Ctx<'_>) -> Result<BenchOutput, ExperimentError> {
    let o = ctx.overrides;
    let p = motion_params(ctx, 600.0, 1.0, (0.4, 1.0))?;
    let replicates = o.usize("replicates", 3)?;
    let mae_limit = o.f64("mae_limit_deg", 30.0)?;
    let gains = SpatialGainMap { slow_mod_gain: o.f64("slow_mod_gain", SpatialGainMap::default().slow_mod_gain)?, ..SpatialGainMap::default() };
    let keep = ctx.keep_sessions()?;
    let seeds = ctx.seeds();
    let jobs: Vec<(usize, f64, u8)> = (0..replicates)
        .flat_map(|r| ROTATING_SPEEDS.iter().flat_map(move |&s| (1..=4u8).map(move |b| (r, s, b))))
        .collect();
    let results: Vec<(RotatingCell, Vec<Session>)> = jobs
        .par_iter()
        .map(|&(r, s, b)| rotating_cell(seeds, r, s, b, p, &gains, r == 0 && keep != super::KeepSessions::None))
        .collect::<Result<_, _>>()?;

    let mut summary = Summary::new(ExperimentId::RotatingBar, ctx.seed, o.as_map().clone());
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &speed in &ROTATING_SPEEDS {
        for bars in 1..=4u8 {
            let reps: Vec<&RotatingCell> = results
                .iter()
                .map(|(c, _)| c)
                .filter(|c| c.speed_deg_s == speed && c.bar_count == bars)
                .collect();
            let pick = |f: fn(&RotatingCell) -> f64| median(&reps.iter().map(|c| f(c)).collect::<Vec<_>>());
            let cell = (
                speed,
                bars,
                pick(|c| c.lagged.circular_mae_deg),
                pick(|c| c.lagged.bin4_accuracy),
                pick(|c| c.lagged.matched_harmonic_r2),
                pick(|c| c.instantaneous.bin4_accuracy),
                pick(|c| c.entrainment),
            );
            rows.push(vec![
                num(speed),
                bars.to_string(),
                num(cell.2),
                num(cell.3),
                num(cell.4),
                num(cell.5),
                num(cell.6),
            ]);
            cells.push(cell);
        }
    }
    let speed_acc: Vec<f64> = ROTATING_SPEEDS
        .iter()
        .map(|&s| median(&cells.iter().filter(|c| c.0 == s).map(|c| c.3).collect::<Vec<_>>()))
        .collect();
    let speed_mae: Vec<f64> = ROTATING_SPEEDS
        .iter()
        .map(|&s| median(&cells.iter().filter(|c| c.0 == s).map(|c| c.2).collect::<Vec<_>>()))
        .collect();
    for (i, s) in ROTATING_SPEEDS.iter().enumerate() {
        summary.metric(&format!("speed_{s}_bin4_accuracy"), speed_acc[i]);
        summary.metric(&format!("speed_{s}_circular_mae_deg"), speed_mae[i]);
    }
    let best = cells.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let all_mae: Vec<f64> = cells.iter().map(|c| c.2).collect();
    let acc: Vec<f64> = cells.iter().map(|c| c.3).collect();
    let ent: Vec<f64> = cells.iter().map(|c| c.6).collect();
    let r = pearson(&ent, &acc);
    summary.metric("best_condition_circular_mae_deg", best);
    summary.metric("median_circular_mae_deg", median(&all_mae));
    summary.metric("median_bin4_accuracy", median(&acc));
    summary.metric("median_matched_harmonic_r2", median(&cells.iter().map(|c| c.4).collect::<Vec<_>>()));
    summary.metric("entrainment_accuracy_r", r);
    summary.metric("replicates", replicates as f64);
    summary.check(Check::at_most("best_condition_circular_mae_deg", best, mae_limit));
    let (a1, a6, a14) = (speed_acc[0], speed_acc[1], speed_acc[2]);
    summary.check(Check::flag("speed_6_most_decodable", a6 > a1 && a6 > a14));
    summary.check(Check::flag("speed_1_least_decodable", a1 < a6 && a1 < a14));
    summary.check(Check::above("entrainment_accuracy_r", r, 0.0));

    let artifacts = vec![Artifact::csv(
        "conditions.csv",
        &[
            "speed_deg_s",
            "bar_count",
            "circular_mae_deg",
            "bin4_accuracy",
            "matched_harmonic_r2",
            "instantaneous_bin4_accuracy",
            "entrainment_index",
        ],
        rows,
    )];
    let sessions = results.into_iter().flat_map(|(_, s)| s).collect();
    Ok(BenchOutput { summary, artifacts, sessions: keep.select("rotating", sessions) })
}

// ------------------------------------------------------------- translating

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PositionMetrics {
    pub mae_mm: f64,
    pub r_squared: f64,
    pub bin4_accuracy: f64,
}

/// MAE, R^2 and equal-width quarter-bin accuracy of position estimates on
/// a panel `width_mm` wide. Predictions are clipped to the panel.
pub fn position_metrics(pred: &[f64], truth: &[f64], width_mm: f64) -> PositionMetrics {
    let clip: Vec<f64> = pred.iter().map(|p| p.clamp(0.0, width_mm)).collect();
    let n = truth.len() as f64;
    let mae = clip.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let m = mean(truth);
    let ss_res: f64 = clip.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    let bin = |v: f64| ((v / width_mm * 4.0) as usize).min(3);
    let hits = clip.iter().zip(truth).filter(|(p, t)| bin(**p) == bin(**t)).count();
    PositionMetrics {
        mae_mm: mae,
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 },
        bin4_accuracy: hits as f64 / n,
    }
}

struct TranslatingCell {
    speed: f64,
    replicate: usize,
    lagged_pred: Vec<f64>,
    instant_pred: Vec<f64>,
    truth: Vec<f64>,
    sessions: Vec<Session>,
}

fn translating_cell(
    seeds: Seeds,
    replicate: usize,
    speed: f64,
    p: MotionParams,
    gains: &SpatialGainMap,
    keep: bool,
) -> Result<TranslatingCell, ExperimentError> {
    let stim = MotionStimulus::translating(speed, PX_TO_MM, p.duration_s);
    let resp = MotionResponse::pixel();
    let lap_s = resp.panel_width_px / speed;
    let tag = format!("translating-{speed}");
    let mut designs = Vec::with_capacity(p.sessions);
    let mut sessions = Vec::new();
    for s in 0..p.sessions {
        let seed = seeds.sub(&tag, (replicate * p.sessions + s) as u64);
        let session = synth_motion(&stim, gains, &p.baseline, seed)?;
        designs.push(design(&session, p.bin_s, p.history, lap_s, |mm| Ok(vec![mm]))?);
        if keep {
            sessions.push(session);
        }
    }
    let ys: Vec<DMatrix<f64>> = designs.iter().map(|d| d.y.clone()).collect();
    let flat = |preds: Vec<DMatrix<f64>>| preds.iter().flat_map(|m| m.column(0).iter().copied().collect::<Vec<_>>()).collect();
    let lagged_pred = flat(leave_one_session_out(&designs.iter().map(|d| d.x.clone()).collect::<Vec<_>>(), &ys, p.lambda)?);
    let instant_pred =
        flat(leave_one_session_out(&designs.iter().map(|d| newest(&d.x, 4, 0)).collect::<Vec<_>>(), &ys, p.lambda)?);
    let truth = designs.iter().flat_map(|d| d.truth.iter().copied()).collect();
    Ok(TranslatingCell { speed, replicate, lagged_pred, instant_pred, truth, sessions })
}

pub fn run_translating(ctx: &Ctx<'_>) -> Result<BenchOutput, ExperimentError> {
    let o = ctx.overrides;
    let p = motion_params(ctx, 300.0, 0.25, (0.12, 1.0))?;
    let replicates = o.usize("replicates", 10)?;
    let mae_limit = o.f64("mae_limit_mm", 15.0)?;
    let r2_floor = o.f64("r2_floor", 0.70)?;
    let win_fraction = o.f64("lagged_win_fraction", 0.9)?;
    let gains = SpatialGainMap::default();
    let width_mm = MotionResponse::pixel().panel_width_px * PX_TO_MM;
    let keep = ctx.keep_sessions()?;
    let seeds = ctx.seeds();
    let jobs: Vec<(usize, f64)> =
        (0..replicates).flat_map(|r| TRANSLATING_SPEEDS.iter().map(move |&s| (r, s))).collect();
    let cells: Vec<TranslatingCell> = jobs
        .par_iter()
        .map(|&(r, s)| translating_cell(seeds, r, s, p, &gains, r == 0 && keep != super::KeepSessions::None))
        .collect::<Result<_, _>>()?;

    let mut summary = Summary::new(ExperimentId::TranslatingBar, ctx.seed, o.as_map().clone());
    let mut rows = Vec::new();
    let mut speed_mae = Vec::new();
    for &speed in &TRANSLATING_SPEEDS {
        let per: Vec<PositionMetrics> = cells
            .iter()
            .filter(|c| c.speed == speed)
            .map(|c| position_metrics(&c.lagged_pred, &c.truth, width_mm))
            .collect();
        let mae = median(&per.iter().map(|m| m.mae_mm).collect::<Vec<_>>());
        let r2 = median(&per.iter().map(|m| m.r_squared).collect::<Vec<_>>());
        let acc = median(&per.iter().map(|m| m.bin4_accuracy).collect::<Vec<_>>());
        summary.metric(&format!("speed_{speed}_mae_mm"), mae);
        summary.metric(&format!("speed_{speed}_r_squared"), r2);
        rows.push(vec![num(speed), num(mae), num(r2), num(acc)]);
        speed_mae.push(mae);
    }

    let mut pooled = Vec::new();
    let mut wins = 0usize;
    let mut lag_acc = Vec::new();
    let mut inst_acc = Vec::new();
    for r in 0..replicates {
        let mine: Vec<&TranslatingCell> = cells.iter().filter(|c| c.replicate == r).collect();
        let cat = |f: fn(&TranslatingCell) -> &Vec<f64>| mine.iter().flat_map(|c| f(c).iter().copied()).collect::<Vec<f64>>();
        let truth = cat(|c| &c.truth);
        let lag = position_metrics(&cat(|c| &c.lagged_pred), &truth, width_mm);
        let inst = position_metrics(&cat(|c| &c.instant_pred), &truth, width_mm);
        if lag.bin4_accuracy > inst.bin4_accuracy {
            wins += 1;
        }
        lag_acc.push(lag.bin4_accuracy);
        inst_acc.push(inst.bin4_accuracy);
        pooled.push(lag);
    }
    let pooled_mae = median(&pooled.iter().map(|m| m.mae_mm).collect::<Vec<_>>());
    let pooled_r2 = median(&pooled.iter().map(|m| m.r_squared).collect::<Vec<_>>());
    let win_rate = wins as f64 / replicates.max(1) as f64;
    summary.metric("pooled_mae_mm", pooled_mae);
    summary.metric("pooled_r_squared", pooled_r2);
    summary.metric("lagged_bin4_accuracy", median(&lag_acc));
    summary.metric("instantaneous_bin4_accuracy", median(&inst_acc));
    summary.metric("lagged_win_fraction", win_rate);
    summary.metric("replicates", replicates as f64);
    summary.check(Check::at_most("pooled_mae_mm", pooled_mae, mae_limit));
    summary.check(Check::at_least("pooled_r_squared", pooled_r2, r2_floor));
    summary.check(Check::flag("monotone_improvement_with_speed", speed_mae.windows(2).all(|w| w[1] < w[0])));
    summary.check(Check::at_least("lagged_win_fraction", win_rate, win_fraction));

    let mut artifacts = vec![Artifact::csv("speeds.csv", &["speed_px_s", "mae_mm", "r_squared", "bin4_accuracy"], rows)];
    if let Some(c) = cells.iter().find(|c| c.replicate == 0 && c.speed == TRANSLATING_SPEEDS[1]) {
        artifacts.push(Artifact::csv(
            "position_series.csv",
            &["actual_mm", "predicted_mm"],
            c.truth.iter().zip(&c.lagged_pred).map(|(t, p)| vec![num(*t), num(*p)]),
        ));
    }
    let sessions = cells.into_iter().flat_map(|c| c.sessions).collect();
    Ok(BenchOutput { summary, artifacts, sessions: keep.select("translating", sessions) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_positions() {
        let t = [1.0, 20.0, 40.0, 59.0];
        let m = position_metrics(&t, &t, 60.0);
        assert_eq!(m.mae_mm, 0.0);
        assert_eq!(m.r_squared, 1.0);
        assert_eq!(m.bin4_accuracy, 1.0);
    }

    #[test]
    fn clipping_and_bins() {
        let m = position_metrics(&[-5.0, 70.0], &[1.0, 59.0], 60.0);
        assert!((m.mae_mm - 1.0).abs() < 1e-12);
        assert_eq!(m.bin4_accuracy, 1.0);
    }

    #[test]
    fn newest_block_only() {
        let x = DMatrix::from_fn(2, 12, |r, c| (r * 12 + c) as f64);
        let n = newest(&x, 4, 0);
        assert_eq!(n.ncols(), 4);
        assert_eq!(n[(1, 3)], 15.0);
    }
}
