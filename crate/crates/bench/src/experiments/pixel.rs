//! Static illumination on the four-pixel panel: quadrant identity from
//! single-pixel events, and ON/OFF direction of full-panel transitions at
//! random brightness levels.

use mindkit_core::preprocess::{fit_linear_drift, remove_drift};
use mindkit_core::synth::{synth_session, BaselineModel, HillResponse, SpatialGainMap, SynthParams};
use mindkit_core::{Session, StimulusClass, StimulusEvent, Target};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::classify::{event_vector, matrix, run_task, smoothing, EventWindowSpec, Scheme};
use super::hill::pixel_levels;
use super::{Ctx, ExperimentError, Seeds};
use crate::config::ExperimentId;
use crate::report::{Artifact, BenchOutput, Check, Summary};

const ONSET_S: f64 = 20.0;

#[derive(Debug, Clone, Copy)]
struct PixelParams {
    events_per_pixel: usize,
    transitions: usize,
    duration_s: f64,
    isi_s: f64,
    intensity: f64,
    wander_mv: f64,
    wander_tau_s: f64,
    amplitude_cv: f64,
    noise_mv: f64,
}

type Labelled = Vec<(Vec<f64>, usize)>;

struct Block {
    quadrant: Labelled,
    transition: Labelled,
    session: Session,
}

fn block(seeds: Seeds, index: usize, p: PixelParams, spec: &EventWindowSpec) -> Result<Block, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.sub("pixel-plan", index as u64));
    // None marks a full-panel transition event
    let mut kinds: Vec<Option<usize>> = (0..4).flat_map(|k| std::iter::repeat_n(Some(k), p.events_per_pixel)).collect();
    kinds.extend(std::iter::repeat_n(None, p.transitions));
    kinds.shuffle(&mut rng);
    let levels = pixel_levels();
    let mut plan = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.iter().enumerate() {
        let onset = ONSET_S + p.isi_s * i as f64;
        plan.push(match kind {
            Some(k) => StimulusEvent::new(StimulusClass::WhiteLight, onset, p.duration_s, p.intensity)
                .with_target(Target::Pixel(*k as u8)),
            None => {
                let level = *levels[1..].choose(&mut rng).unwrap_or(&p.intensity);
                StimulusEvent::new(StimulusClass::WhiteLight, onset, p.duration_s, level)
            }
        });
    }
    let params = SynthParams {
        duration_s: ONSET_S + p.isi_s * kinds.len() as f64,
        baseline: BaselineModel {
            noise_sigma_mv: p.noise_mv,
            wander_sigma_mv: p.wander_mv,
            wander_tau_s: p.wander_tau_s,
            ..BaselineModel::default()
        },
        gains: SpatialGainMap::default().with_effect_sizes(1.16, 1.31),
        hill: Some(HillResponse::PIXEL),
        amplitude_cv: p.amplitude_cv,
        ..SynthParams::default()
    };
    let session = synth_session(&plan, &params, seeds.sub("pixel-session", index as u64))?;
    let fits = fit_linear_drift(&session.trace, session.baseline_window_s)?;
    let flat = remove_drift(&session.trace, &fits);
    let smooth = smoothing(&flat, 0.25)?;
    let mut quadrant = Vec::new();
    let mut transition = Vec::new();
    for (i, kind) in kinds.iter().enumerate() {
        let onset = ONSET_S + p.isi_s * i as f64;
        match kind {
            Some(k) => quadrant.push((event_vector(&flat, &smooth, onset, spec), *k)),
            None => {
                transition.push((event_vector(&flat, &smooth, onset, spec), 0));
                transition.push((event_vector(&flat, &smooth, onset + p.duration_s, spec), 1));
            }
        }
    }
    Ok(Block { quadrant, transition, session })
}

pub fn run(ctx: &Ctx<'_>) -> Result<BenchOutput, ExperimentError> {
    let o = ctx.overrides;
    let sessions_n = o.usize("sessions_per_experiment", 3)?;
    let repeats = o.usize("repeats", 3)?;
    let white_noise = BaselineModel::for_class(&StimulusClass::WhiteLight).noise_sigma_mv;
    let p = PixelParams {
        events_per_pixel: o.usize("events_per_pixel", 5)?,
        transitions: o.usize("transitions", 10)?,
        duration_s: o.f64("event_duration_s", 10.0)?,
        isi_s: o.f64("isi_s", 30.0)?,
        intensity: o.f64("intensity", 255.0)?,
        wander_mv: o.f64("wander_mv", 0.2)?,
        wander_tau_s: o.f64("wander_tau_s", 5.0)?,
        amplitude_cv: o.f64("amplitude_cv", 0.1)?,
        noise_mv: o.f64("noise_mv", white_noise)?,
    };
    if p.isi_s < p.duration_s + 5.0 {
        return Err(ExperimentError::Invalid("isi_s must exceed event_duration_s by at least 5 s".into()));
    }
    let spec = EventWindowSpec {
        pre_s: o.f64("pre_s", 2.0)?,
        bin_s: o.f64("bin_s", 1.0)?,
        n_bins: o.usize("bins", 5)?,
        slope_s: o.f64("slope_s", 0.5)?,
    };
    let lambda = match o.f64("lambda", -1.0)? {
        l if l >= 0.0 => Some(l),
        _ => None,
    };
    let keep = ctx.keep_sessions()?;
    let seeds = ctx.seeds();
    let blocks: Vec<Block> = (0..sessions_n * repeats)
        .into_par_iter()
        .map(|b| block(seeds, b, p, &spec))
        .collect::<Result<_, _>>()?;

    let mut summary = Summary::new(ExperimentId::StaticPixel, ctx.seed, o.as_map().clone());
    let gather = |pick: fn(&Block) -> &Labelled| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut outer = Vec::new();
        let mut inner = Vec::new();
        for (b, blk) in blocks.iter().enumerate() {
            for (f, l) in pick(blk) {
                rows.push(f.clone());
                labels.push(*l);
                outer.push(b / repeats);
                inner.push(b);
            }
        }
        (matrix(&rows), labels, outer, inner)
    };
    let (xq, lq, oq, iq) = gather(|b| &b.quadrant);
    let quad = run_task(&mut summary, "quadrant", &xq, &lq, &["pixel0", "pixel1", "pixel2", "pixel3"], &oq, &iq, lambda, false, Scheme::OneHot)?;
    let (xt, lt, ot, it) = gather(|b| &b.transition);
    let trans = run_task(&mut summary, "transition", &xt, &lt, &["on", "off"], &ot, &it, lambda, false, Scheme::OneHot)?;
    summary.check(Check::above("quadrant_accuracy_above_chance", quad.metrics.accuracy, 0.25));
    summary.check(Check::above("transition_accuracy_above_chance", trans.metrics.accuracy, 0.5));

    let mut artifacts = Vec::new();
    for (name, r) in [("quadrant", &quad), ("transition", &trans)] {
        let labels = &r.confusion.labels;
        let rows: Vec<Vec<String>> = r
            .confusion
            .counts
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().map(move |(c, n)| vec![labels[t].clone(), labels[c].clone(), n.to_string()]))
            .collect();
        artifacts.push(Artifact::csv(&format!("{name}_confusion.csv"), &["truth", "predicted", "count"], rows));
    }
    let sessions = blocks.into_iter().map(|b| b.session).collect();
    Ok(BenchOutput { summary, artifacts, sessions: keep.select("block", sessions) })
}
