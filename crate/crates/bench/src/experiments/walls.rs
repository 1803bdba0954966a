//! Static wall illumination on the tube: one to four walls lit together
//! for 1, 5 or 10 s. Decodes wall identity (single-wall events), wall
//! count and duration class with grouped one-hot ridge.

use mindkit_core::preprocess::{fit_linear_drift, remove_drift};
use mindkit_core::synth::{synth_session, BaselineModel, HillResponse, SpatialGainMap, SynthParams};
use mindkit_core::{Session, StimulusClass, StimulusEvent, Target};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::classify::{band_checks, event_vector, matrix, run_task, smoothing, EventWindowSpec, Scheme};
use super::{Ctx, ExperimentError, Seeds};
use crate::config::ExperimentId;
use crate::report::{Artifact, BenchOutput, Summary};

pub const DURATIONS_S: [f64; 3] = [1.0, 5.0, 10.0];
const ONSET_S: f64 = 20.0;

/// One condition: the lit walls and a duration index.
#[derive(Debug, Clone)]
struct Condition {
    walls: Vec<usize>,
    duration: usize,
}

/// Seven wall patterns (four singles, one pair, one triple, all four)
/// crossed with three durations. Multi-wall subsets are drawn per block.
fn block_plan(rng: &mut ChaCha8Rng) -> Vec<Condition> {
    let all = [0usize, 1, 2, 3];
    let mut out = Vec::with_capacity(21);
    for duration in 0..3 {
        for w in 0..4 {
            out.push(Condition { walls: vec![w], duration });
        }
        for k in [2usize, 3] {
            let mut walls: Vec<usize> = all.choose_multiple(rng, k).copied().collect();
            walls.sort_unstable();
            out.push(Condition { walls, duration });
        }
        out.push(Condition { walls: all.to_vec(), duration });
    }
    out.shuffle(rng);
    out
}

#[derive(Debug, Clone, Copy)]
pub struct WallsParams {
    pub isi_s: f64,
    pub wander_mv: f64,
    pub wander_tau_s: f64,
    pub amplitude_cv: f64,
    pub slow_mod_gain: f64,
    pub noise_mv: f64,
    pub intensity: f64,
}

struct BlockResult {
    rows: Vec<(Vec<f64>, Condition)>,
    session: Session,
}

fn block(seeds: Seeds, index: usize, p: WallsParams, spec: &EventWindowSpec) -> Result<BlockResult, ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.sub("walls-plan", index as u64));
    let conditions = block_plan(&mut rng);
    let mut plan = Vec::new();
    for (i, c) in conditions.iter().enumerate() {
        let onset = ONSET_S + p.isi_s * i as f64;
        for &w in &c.walls {
            plan.push(
                StimulusEvent::new(StimulusClass::WhiteLight, onset, DURATIONS_S[c.duration], p.intensity)
                    .with_target(Target::Wall(w as u8)),
            );
        }
    }
    let gains = SpatialGainMap { slow_mod_gain: p.slow_mod_gain, ..SpatialGainMap::default() }.with_effect_sizes(1.16, 1.31);
    let params = SynthParams {
        duration_s: ONSET_S + p.isi_s * conditions.len() as f64,
        baseline: BaselineModel {
            noise_sigma_mv: p.noise_mv,
            wander_sigma_mv: p.wander_mv,
            wander_tau_s: p.wander_tau_s,
            ..BaselineModel::default()
        },
        gains,
        hill: Some(HillResponse::TUBE),
        amplitude_cv: p.amplitude_cv,
        ..SynthParams::default()
    };
    let session = synth_session(&plan, &params, seeds.sub("walls-session", index as u64))?;
    let fits = fit_linear_drift(&session.trace, session.baseline_window_s)?;
    let flat = remove_drift(&session.trace, &fits);
    let smooth = smoothing(&flat, 0.25)?;
    let rows = conditions
        .into_iter()
        .enumerate()
        .map(|(i, c)| (event_vector(&flat, &smooth, ONSET_S + p.isi_s * i as f64, spec), c))
        .collect();
    Ok(BlockResult { rows, session })
}

pub fn run(ctx: &Ctx<'_>) -> Result<BenchOutput, ExperimentError> {
    let o = ctx.overrides;
    let sessions_n = o.usize("sessions_per_experiment", 3)?;
    let repeats = o.usize("repeats", 3)?;
    let white_noise = BaselineModel::for_class(&StimulusClass::WhiteLight).noise_sigma_mv;
    let p = WallsParams {
        isi_s: o.f64("isi_s", 27.0)?,
        wander_mv: o.f64("wander_mv", 0.2)?,
        wander_tau_s: o.f64("wander_tau_s", 5.0)?,
        amplitude_cv: o.f64("amplitude_cv", 0.1)?,
        slow_mod_gain: o.f64("slow_mod_gain", SpatialGainMap::default().slow_mod_gain)?,
        noise_mv: o.f64("noise_mv", white_noise)?,
        intensity: o.f64("intensity", 100.0)?,
    };
    let spec = EventWindowSpec {
        pre_s: o.f64("pre_s", 2.0)?,
        bin_s: o.f64("bin_s", 1.0)?,
        n_bins: o.usize("bins", 15)?,
        slope_s: o.f64("slope_s", 0.5)?,
    };
    let lambda = match o.f64("lambda", -1.0)? {
        l if l >= 0.0 => Some(l),
        _ => None,
    };
    let balance = o.bool("balance_count", true)?;
    let scheme_name = o.string("count_decoder", "ordinal");
    let count_scheme = Scheme::parse(&scheme_name).ok_or_else(|| crate::config::ConfigError::BadValue {
        key: "count_decoder".into(),
        value: scheme_name.clone(),
        kind: "onehot or ordinal",
    })?;
    let keep = ctx.keep_sessions()?;
    let seeds = ctx.seeds();
    let n_blocks = sessions_n * repeats;
    let blocks: Vec<BlockResult> = (0..n_blocks)
        .into_par_iter()
        .map(|b| block(seeds, b, p, &spec))
        .collect::<Result<_, _>>()?;

    let mut feats = Vec::new();
    let mut conds = Vec::new();
    let mut outer = Vec::new();
    let mut inner = Vec::new();
    for (b, r) in blocks.iter().enumerate() {
        for (f, c) in &r.rows {
            feats.push(f.clone());
            conds.push(c.clone());
            outer.push(b / repeats);
            inner.push(b);
        }
    }
    let x = matrix(&feats);
    let mut summary = Summary::new(ExperimentId::StaticWalls, ctx.seed, o.as_map().clone());

    let count: Vec<usize> = conds.iter().map(|c| c.walls.len() - 1).collect();
    let duration: Vec<usize> = conds.iter().map(|c| c.duration).collect();
    let counts = run_task(&mut summary, "count", &x, &count, &["1", "2", "3", "4"], &outer, &inner, lambda, balance, count_scheme)?;
    let durs = run_task(&mut summary, "duration", &x, &duration, &["1s", "5s", "10s"], &outer, &inner, lambda, false, Scheme::OneHot)?;

    let single: Vec<usize> = (0..conds.len()).filter(|&i| conds[i].walls.len() == 1).collect();
    let xs = super::classify::take_rows(&x, &single);
    let identity: Vec<usize> = single.iter().map(|&i| conds[i].walls[0]).collect();
    let so: Vec<usize> = single.iter().map(|&i| outer[i]).collect();
    let si: Vec<usize> = single.iter().map(|&i| inner[i]).collect();
    let ident = run_task(&mut summary, "identity", &xs, &identity, &["wall0", "wall1", "wall2", "wall3"], &so, &si, lambda, false, Scheme::OneHot)?;

    band_checks(&mut summary, "identity_accuracy", ident.metrics.accuracy, 0.732, 0.10, 0.25);
    band_checks(&mut summary, "duration_balanced_accuracy", durs.metrics.balanced_accuracy, 0.793, 0.10, 1.0 / 3.0);
    band_checks(&mut summary, "count_balanced_accuracy", counts.metrics.balanced_accuracy, 0.595, 0.10, 0.25);

    let mut artifacts = Vec::new();
    for (name, r) in [("count", &counts), ("duration", &durs), ("identity", &ident)] {
        artifacts.push(Artifact::csv(
            &format!("{name}_confusion.csv"),
            &["truth", "predicted", "count"],
            r.confusion.counts.iter().enumerate().flat_map(|(t, row)| {
                let labels = &r.confusion.labels;
                row.iter()
                    .enumerate()
                    .map(move |(pcol, n)| vec![labels[t].clone(), labels[pcol].clone(), n.to_string()])
                    .collect::<Vec<_>>()
            }),
        ));
    }
    let sessions = blocks.into_iter().map(|b| b.session).collect();
    Ok(BenchOutput { summary, artifacts, sessions: keep.select("block", sessions) })
}
