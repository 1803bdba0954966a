//! Co-occurring white and green light. Template fits of the paired response
//! onto the single-stimulus responses, and presence-bit decoding of trials
//! holding none, one or both stimuli.

use mindkit_core::decode::{joint_bit_accuracy, template_fit_pair, PairFit};
use mindkit_core::features::spectral_features;
use mindkit_core::synth::{synth_pair, synth_session, synth_single, BaselineModel, PairTrial, SynthParams};
use mindkit_core::{Session, StimulusClass, StimulusEvent, Trace};
use rayon::prelude::*;

use super::classify::{leave_one_group_out, matrix, Scheme};
use super::{mean, median, Ctx, ExperimentError};
use crate::config::ExperimentId;
use crate::report::{num, Artifact, BenchOutput, Check, Summary};

const WINDOW_S: f64 = 25.0;
const PRE_S: f64 = 2.0;

fn classes() -> (StimulusClass, StimulusClass) {
    (StimulusClass::WhiteLight, StimulusClass::GreenLight)
}

fn trial() -> PairTrial {
    PairTrial { onset_s: 20.0, ..PairTrial::default() }
}

fn params(noise_mv: f64) -> SynthParams {
    SynthParams {
        duration_s: trial().onset_s + WINDOW_S,
        // flat baseline so pre-onset subtraction is exact
        baseline: BaselineModel { noise_sigma_mv: noise_mv, intercept_mv: 0.0, drift_mv_per_s: 0.0, ..BaselineModel::default() },
        ..SynthParams::default()
    }
}

/// Post-onset window with the pre-onset mean of each channel removed,
/// averaged over bins of `bin` samples.
fn window(s: &Session, bin: usize) -> Trace {
    let t = &s.trace;
    let onset = trial().onset_s;
    let i0 = t.index_at_or_after(onset);
    let b0 = t.index_at_or_after(onset - PRE_S);
    let base: Vec<f64> = (0..t.n_channels()).map(|c| mean(&t.channel(c)[b0..i0])).collect();
    let mut c = 0;
    t.slice_rows(i0, t.n_samples()).map_channels(|x| {
        let b = base[c];
        c += 1;
        x.chunks_exact(bin.max(1)).map(|w| mean(w) - b).collect()
    })
}

/// Noise-free single-stimulus templates.
fn templates(bin: usize) -> Result<(Trace, Trace), ExperimentError> {
    let (a, b) = classes();
    let p = params(0.0);
    Ok((window(&synth_single(&a, &p, trial(), 0)?, bin), window(&synth_single(&b, &p, trial(), 0)?, bin)))
}

/// Weights expected when the green response never exceeds the white one:
/// the coupled sum is then `T_A + (1 - c) T_B` exactly.
pub fn dominated_weights(coupling: f64) -> (f64, f64) {
    (1.0, 1.0 - coupling)
}

fn fit_trial(
    coupling: f64,
    noise_mv: f64,
    seed: u64,
    t: &(Trace, Trace),
    bin: usize,
) -> Result<(PairFit, Session), ExperimentError> {
    let (a, b) = classes();
    let s = synth_pair(&a, &b, coupling, &params(noise_mv), trial(), seed)?;
    Ok((template_fit_pair(&window(&s, bin), &t.0, &t.1)?, s))
}

/// Trial holding any subset of the two stimuli.
fn bits_trial(bits: (bool, bool), coupling: f64, noise_mv: f64, seed: u64) -> Result<Session, ExperimentError> {
    let (a, b) = classes();
    let tr = trial();
    let class = match bits {
        (true, true) => Some(StimulusClass::pair(a, b)),
        (true, false) => Some(a),
        (false, true) => Some(b),
        (false, false) => None,
    };
    let plan: Vec<StimulusEvent> =
        class.into_iter().map(|c| StimulusEvent::new(c, tr.onset_s, tr.duration_s, tr.intensity)).collect();
    let p = SynthParams { pair_coupling: coupling, ..params(noise_mv) };
    Ok(synth_session(&plan, &p, seed)?)
}

fn features(s: &Session, n_bins: usize) -> Result<Vec<f64>, ExperimentError> {
    Ok(spectral_features(&window(s, 1), n_bins)?.into_iter().flatten().collect())
}

const CONDITIONS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

pub fn run(ctx: &Ctx<'_>) -> Result<BenchOutput, ExperimentError> {
    let o = ctx.overrides;
    let coupling = o.f64("coupling", 0.3)?;
    let noise_mv = o.f64("noise_mv", BaselineModel::for_class(&StimulusClass::WhiteLight).noise_sigma_mv)?;
    let fit_trials = o.usize("fit_trials", 30)?;
    let per_condition = o.usize("trials_per_condition", 30)?;
    let sessions_n = o.usize("sessions_per_experiment", 3)?;
    let n_bins = o.usize("spectral_bins", 16)?;
    let weight_tol = o.f64("weight_tol", 0.1)?;
    let r2_floor = o.f64("r2_floor", 0.7)?;
    let fit_bin_s = o.f64("fit_bin_s", 0.25)?;
    let keep = ctx.keep_sessions()?;
    let seeds = ctx.seeds();
    let bin = ((fit_bin_s * mindkit_core::session::DEFAULT_SAMPLE_RATE_HZ).round() as usize).max(1);
    let t = templates(bin)?;
    let mut summary = Summary::new(ExperimentId::Pairs, ctx.seed, o.as_map().clone());

    // exact superposition
    let (exact, _) = fit_trial(0.0, 0.0, seeds.sub("pairs-exact", 0), &t, bin)?;
    summary.metric("uncoupled_w_white", exact.w_a);
    summary.metric("uncoupled_w_green", exact.w_b);
    summary.metric("uncoupled_r_squared", exact.r_squared);
    summary.check(Check::near("uncoupled_w_white", exact.w_a, 1.0, 1e-9));
    summary.check(Check::near("uncoupled_w_green", exact.w_b, 1.0, 1e-9));
    summary.check(Check::near("uncoupled_r_squared", exact.r_squared, 1.0, 1e-9));

    // coupled fits on noisy trials
    let (ea, eb) = dominated_weights(coupling);
    let (clean, _) = fit_trial(coupling, 0.0, seeds.sub("pairs-clean", 0), &t, bin)?;
    summary.metric("coupled_noise_free_w_white", clean.w_a);
    summary.metric("coupled_noise_free_w_green", clean.w_b);
    summary.metric("coupled_noise_free_r_squared", clean.r_squared);
    let fits: Vec<(PairFit, Session)> = (0..fit_trials as u64)
        .into_par_iter()
        .map(|i| fit_trial(coupling, noise_mv, seeds.sub("pairs-fit", i), &t, bin))
        .collect::<Result<_, _>>()?;
    let wa = median(&fits.iter().map(|f| f.0.w_a).collect::<Vec<_>>());
    let wb = median(&fits.iter().map(|f| f.0.w_b).collect::<Vec<_>>());
    let r2 = median(&fits.iter().map(|f| f.0.r_squared).collect::<Vec<_>>());
    summary.metric("coupled_w_white", wa);
    summary.metric("coupled_w_green", wb);
    summary.metric("coupled_r_squared", r2);
    summary.check(Check::near("coupled_w_white", wa, ea, weight_tol));
    summary.check(Check::near("coupled_w_green", wb, eb, weight_tol));
    summary.check(Check::at_least("coupled_r_squared", r2, r2_floor));

    // presence bits
    let jobs: Vec<(usize, usize)> = (0..per_condition * CONDITIONS.len()).map(|i| (i % CONDITIONS.len(), i)).collect();
    let trials: Vec<(Vec<f64>, PairFit, Session)> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let s = bits_trial(CONDITIONS[c], coupling, noise_mv, seeds.sub("pairs-bits", i as u64))?;
            let f = template_fit_pair(&window(&s, bin), &t.0, &t.1)?;
            Ok((features(&s, n_bins)?, f, s))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let labels: Vec<usize> = jobs.iter().map(|j| j.0).collect();
    let groups: Vec<usize> = jobs.iter().map(|j| j.1 % sessions_n.max(2)).collect();
    let x = matrix(&trials.iter().map(|t| t.0.clone()).collect::<Vec<_>>());
    let decoded = leave_one_group_out(&x, &labels, 4, &groups, &jobs.iter().map(|j| j.1).collect::<Vec<_>>(), None, false, Scheme::OneHot)?;
    let truth: Vec<(bool, bool)> = labels.iter().map(|&l| CONDITIONS[l]).collect();
    let spectral: Vec<(bool, bool)> = decoded.predictions.iter().map(|&p| CONDITIONS[p]).collect();
    let spectral_acc = joint_bit_accuracy(&spectral, &truth)?;
    // template route: a stimulus is present when its weight clears half its expected value
    let by_template: Vec<(bool, bool)> = trials.iter().map(|t| (t.1.w_a > 0.5 * ea, t.1.w_b > 0.5 * eb)).collect();
    let template_acc = joint_bit_accuracy(&by_template, &truth)?;
    summary.metric("spectral_joint_bit_accuracy", spectral_acc);
    summary.metric("template_joint_bit_accuracy", template_acc);
    summary.check(Check::above("spectral_joint_bit_accuracy", spectral_acc, 0.25));
    summary.check(Check::above("template_joint_bit_accuracy", template_acc, 0.25));

    let artifacts = vec![Artifact::csv(
        "pair_fits.csv",
        &["trial", "w_white", "w_green", "r_squared"],
        fits.iter().enumerate().map(|(i, f)| vec![i.to_string(), num(f.0.w_a), num(f.0.w_b), num(f.0.r_squared)]),
    )];
    let sessions = fits.into_iter().map(|f| f.1).collect();
    Ok(BenchOutput { summary, artifacts, sessions: keep.select("pair", sessions) })
}
