//! Self-repair: 5-s white flashes every 30 min for 7 days while the
//! response amplitude recovers along a logistic generator; flashes are
//! pooled into 6-h points and refitted.

use mindkit_core::calibrate::{fit_recovery, RecoveryFit, RecoveryReport};
use mindkit_core::synth::{synth_session, BaselineModel, KernelBank, ResponseKernel, SynthParams};
use mindkit_core::{Session, StimulusClass, StimulusEvent};
use rayon::prelude::*;

use super::{mean, median, Ctx, ExperimentError, Seeds};
use crate::config::ExperimentId;
use crate::report::{num, Artifact, BenchOutput, Check};
use crate::report::Summary;

const FLASH_S: f64 = 5.0;
const PRE_S: f64 = 2.0;
const POST_S: f64 = 1.0;
const FLASHES_PER_DAY: usize = 48;
const DAYS: usize = 7;
const POINTS_PER_DAY: usize = 4;

/// Generator: logistic recovery reaching 95% of its plateau on day 3.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryCurve {
    pub plateau: f64,
    pub t50_days: f64,
    pub steepness_per_day: f64,
}

impl Default for RecoveryCurve {
    fn default() -> Self {
        Self { plateau: 1.0, t50_days: 2.0, steepness_per_day: 19f64.ln() }
    }
}

impl RecoveryCurve {
    pub fn eval(&self, day: f64) -> f64 {
        self.plateau / (1.0 + (-self.steepness_per_day * (day - self.t50_days)).exp())
    }
}

/// Point index of each flash: nearest 6-h grid time.
fn point_of(flash: usize) -> usize {
    let per = FLASHES_PER_DAY / POINTS_PER_DAY;
    (flash + per / 2) / per
}

fn flash_session(relative: f64, sigma: f64, seed: u64) -> Result<Session, ExperimentError> {
    let white = mindkit_core::synth::survey_row(&StimulusClass::WhiteLight)
        .ok_or_else(|| ExperimentError::Invalid("white light kernel missing".into()))?;
    let kernel = ResponseKernel::new(white.dv_max_mv * relative, white.tau_1e_s);
    let params = SynthParams {
        n_channels: 1,
        duration_s: PRE_S + FLASH_S + POST_S,
        kernels: KernelBank::new().with(StimulusClass::WhiteLight, kernel),
        baseline: BaselineModel { noise_sigma_mv: sigma, ..BaselineModel::default() },
        ..SynthParams::default()
    };
    let plan = [StimulusEvent::new(StimulusClass::WhiteLight, PRE_S, FLASH_S, 100.0)];
    Ok(synth_session(&plan, &params, seed)?)
}

/// Mean during the flash minus mean before it; linear in the noise.
fn flash_response(s: &Session) -> f64 {
    let t = &s.trace;
    let x = t.channel(0);
    let b1 = t.index_at_or_after(PRE_S);
    let e = t.index_at_or_before(PRE_S + FLASH_S) + 1;
    mean(&x[b1..e]) - mean(&x[..b1])
}

fn sample_counts(fs: f64) -> (f64, f64) {
    let n_pre = (PRE_S * fs).ceil();
    let n_on = (FLASH_S * fs).floor() + 1.0;
    (n_pre, n_on)
}

struct Replicate {
    points: Vec<(f64, f64)>,
    fit: RecoveryFit,
    first: Option<Session>,
}

fn replicate(
    seeds: Seeds,
    index: u64,
    curve: RecoveryCurve,
    noise_frac: f64,
    unit_response: f64,
    keep_first: bool,
) -> Result<Replicate, ExperimentError> {
    let n_flash = DAYS * FLASHES_PER_DAY + 1;
    let n_points = DAYS * POINTS_PER_DAY + 1;
    let mut counts = vec![0usize; n_points];
    for f in 0..n_flash {
        counts[point_of(f)] += 1;
    }
    let (n_pre, n_on) = sample_counts(mindkit_core::session::DEFAULT_SAMPLE_RATE_HZ);
    let var_unit = 1.0 / n_pre + 1.0 / n_on;
    let stream = format!("repair-{index}");
    let mut sums = vec![0.0; n_points];
    let mut first = None;
    for f in 0..n_flash {
        let day = f as f64 / FLASHES_PER_DAY as f64;
        let p = point_of(f);
        // per-flash noise so each pooled point carries `noise_frac` of the plateau
        let sigma = noise_frac * unit_response * curve.plateau * (counts[p] as f64 / var_unit).sqrt();
        let s = flash_session(curve.eval(day), sigma, seeds.sub(&stream, f as u64))?;
        sums[p] += flash_response(&s) / unit_response;
        if keep_first && f == 0 {
            first = Some(s);
        }
    }
    let points: Vec<(f64, f64)> = (0..n_points)
        .map(|p| (p as f64 / POINTS_PER_DAY as f64, sums[p] / counts[p] as f64))
        .collect();
    let fit = fit_recovery(&points)?;
    Ok(Replicate { points, fit, first })
}

pub fn run(ctx: &Ctx<'_>) -> Result<BenchOutput, ExperimentError> {
    let replicates = ctx.overrides.usize("replicates", 100)?;
    let noise_frac = ctx.overrides.f64("noise_frac", 0.05)?;
    let tol = ctx.overrides.f64("t95_tol_days", 0.5)?;
    let keep = ctx.keep_sessions()?;
    let curve = RecoveryCurve::default();
    let mut summary = Summary::new(ExperimentId::Repair, ctx.seed, ctx.overrides.as_map().clone());
    let seeds = ctx.seeds();

    // response of a full-strength flash under this measurement
    let unit_response = flash_response(&flash_session(1.0, 0.0, 0)?);
    summary.metric("unit_flash_response_mv", unit_response);

    let clean = replicate(seeds, u64::MAX, curve, 0.0, unit_response, false)?;
    summary.metric("noise_free_t95_days", clean.fit.t95_days);
    summary.check(Check::near("noise_free_t95_days", clean.fit.t95_days, 3.0, 0.1));

    let reps: Vec<Replicate> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| replicate(seeds, i, curve, noise_frac, unit_response, i == 0 && keep != super::KeepSessions::None))
        .collect::<Result<_, _>>()?;
    let t95: Vec<f64> = reps.iter().map(|r| r.fit.t95_days).collect();
    let within = t95.iter().filter(|t| (**t - 3.0).abs() <= tol).count() as f64 / t95.len().max(1) as f64;
    let worst = t95.iter().map(|t| (t - 3.0).abs()).fold(0.0, f64::max);
    summary.metric("median_t95_days", median(&t95));
    summary.metric("worst_t95_error_days", worst);
    summary.metric("fraction_t95_within_tol", within);
    summary.metric("non_monotone_replicates", reps.iter().filter(|r| r.fit.non_monotone).count() as f64);
    summary.check(Check::at_least("fraction_t95_within_tol", within, 1.0));

    let mut artifacts = vec![Artifact::csv(
        "t95_by_replicate.csv",
        &["replicate", "t95_days", "plateau", "r_squared"],
        reps.iter().enumerate().map(|(i, r)| {
            vec![i.to_string(), num(r.fit.t95_days), num(r.fit.plateau_mv), num(r.fit.r_squared)]
        }),
    )];
    let mut sessions = Vec::new();
    if let Some(r) = reps.into_iter().next() {
        let report = RecoveryReport::new(r.fit, &r.points);
        artifacts.push(Artifact::csv(
            "recovery_curve.csv",
            &["day", "observed", "predicted", "residual"],
            report.points.iter().map(|p| vec![num(p.x), num(p.observed), num(p.predicted), num(p.residual)]),
        ));
        if let Some(s) = r.first {
            sessions = keep.select("flash", vec![s]);
        }
    }
    Ok(BenchOutput { summary, artifacts, sessions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_day_three() {
        let c = RecoveryCurve::default();
        assert!((c.eval(3.0) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn pooling_grid() {
        let mut counts = [0usize; 29];
        for f in 0..=336 {
            counts[point_of(f)] += 1;
        }
        assert_eq!(counts[0], 6);
        assert_eq!(counts[1], 12);
        assert_eq!(counts[28], 7);
        assert_eq!(counts.iter().sum::<usize>(), 337);
    }
}
