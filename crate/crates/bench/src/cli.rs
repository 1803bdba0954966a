//! Command-line front end. Every command writes under `--out` and finishes
//! with a `manifest.json` listing the files it produced.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mindkit_core::calibrate::{fit_hill, fit_recovery, HillReport, RecoveryReport};
use mindkit_core::decode::{classification_metrics, ConfusionMatrix, DecoderReport};
use mindkit_core::features::{extract_event_features, write_feature_csv, FeatureConfig, FeatureRow};
use mindkit_core::preprocess::{fit_linear_drift, remove_drift};
use mindkit_core::synth::{
    synth_motion, synth_pair, synth_session, BaselineModel, PairTrial, SpatialGainMap, SynthParams,
};
use mindkit_core::synth::MotionStimulus;
use mindkit_core::{load_session, save_session, Session, StimulusClass, StimulusEvent};
use nalgebra::DMatrix;

use crate::config::{read_key_values, ExperimentId, Overrides};
use crate::experiments::classify::{leave_one_group_out, Scheme};
use crate::experiments::{median, sd};
use crate::report::{num, write_text, Artifact, Manifest};
use crate::{run_bench_threads, write_bundle, BenchConfig};

/// Exit code when every acceptance check passes.
pub const EXIT_PASS: i32 = 0;
/// Exit code for execution errors.
pub const EXIT_ERROR: i32 = 1;
/// Exit code when a metric is out of tolerance.
pub const EXIT_TOLERANCE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mindkit", version, about = "Simulate, analyse and benchmark multichannel mycelial recordings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Plain-text `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "mindkit-out")]
    pub out: PathBuf,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate sessions (stimulus class events, a moving bar or a stimulus pair).
    Synth(Common),
    /// Remove per-channel linear drift and optionally smooth.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Session trace CSV.
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-event, per-channel transient features.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Fit a Hill or recovery curve to two-column CSV data.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Grouped ridge classification of stimulus class from feature CSVs.
    Decode {
        #[command(flatten)]
        common: Common,
        /// One or more feature CSVs, pooled.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
    /// Run a bench experiment, or `bench list` to enumerate them.
    Bench {
        /// Experiment id or `list`.
        experiment: String,
        #[command(flatten)]
        common: Common,
        /// Worker threads (0 = machine default). Results do not depend on it.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Collect bench summaries under `--input` into one pass/fail table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

/// Parse arguments, run, print errors, and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            EXIT_ERROR
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(c) => synth(&c),
        Command::Preprocess { common, input } => preprocess(&common, &input),
        Command::Features { common, input } => features(&common, &input),
        Command::Calibrate { common, input } => calibrate(&common, &input),
        Command::Decode { common, input } => decode(&common, &input),
        Command::Bench { experiment, common, threads } => bench(&experiment, &common, threads),
        Command::Report { common, input } => report(&common, &input),
    }
}

fn settings(c: &Common) -> Result<BTreeMap<String, String>> {
    let mut map = match &c.config {
        Some(p) => read_key_values(p)?,
        None => BTreeMap::new(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn finish(manifest: &mut Manifest, root: &Path, written: &[PathBuf]) -> Result<()> {
    for p in written {
        manifest.add(root, p)?;
    }
    let path = manifest.write(root)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn save(session: &Session, path: &Path) -> Result<Vec<PathBuf>> {
    if let Some(dir) = path.parent() {
        create(dir)?;
    }
    let p = save_session(session, path)?;
    Ok(vec![p.trace_csv, p.events_json, p.meta_json])
}

// ------------------------------------------------------------------ synth

fn synth(c: &Common) -> Result<i32> {
    let o = Overrides::new(settings(c)?);
    let seed = c.seed.ok_or_else(|| anyhow!("synth needs --seed"))?;
    let stimulus = o.string("stimulus", "white_light");
    let sessions: Vec<Session> = match stimulus.as_str() {
        "rotating-bar" | "translating-bar" => {
            let duration = o.f64("duration_s", 600.0)?;
            let stim = if stimulus == "rotating-bar" {
                let bars = o.usize("bars", 1)?;
                MotionStimulus::rotating(o.f64("speed", 6.0)?, u8::try_from(bars).unwrap_or(u8::MAX), duration)
            } else {
                MotionStimulus::translating(o.f64("speed", 10.0)?, o.f64("px_to_mm", crate::experiments::motion::PX_TO_MM)?, duration)
            };
            let baseline = BaselineModel {
                noise_sigma_mv: o.f64("noise_mv", BaselineModel::for_class(&StimulusClass::WhiteLight).noise_sigma_mv)?,
                ..BaselineModel::default()
            };
            vec![synth_motion(&stim, &SpatialGainMap::default(), &baseline, seed)?]
        }
        s if s.contains('+') => {
            let (a, b) = s.split_once('+').unwrap_or((s, s));
            let (a, b): (StimulusClass, StimulusClass) =
                (a.parse().map_err(|e: String| anyhow!(e))?, b.parse().map_err(|e: String| anyhow!(e))?);
            let params = SynthParams {
                duration_s: 60.0,
                baseline: BaselineModel { noise_sigma_mv: o.f64("noise_mv", 0.02)?, ..BaselineModel::default() },
                ..SynthParams::default()
            };
            vec![synth_pair(&a, &b, o.f64("coupling", 0.3)?, &params, PairTrial::default(), seed)?]
        }
        name => {
            let class: StimulusClass = name.parse().map_err(|e: String| anyhow!(e))?;
            class_sessions(&o, class, seed)?
        }
    };
    o.ensure_consumed()?;
    create(&c.out)?;
    let mut written = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        written.extend(save(s, &c.out.join("sessions").join(format!("session-{i:03}.csv")))?);
    }
    finish(&mut Manifest::new(&format!("synth {stimulus}"), Some(seed)), &c.out, &written)?;
    Ok(EXIT_PASS)
}

/// Evenly spaced events of one class, split so no session runs past
/// `max_session_s`.
fn class_sessions(o: &Overrides, class: StimulusClass, seed: u64) -> Result<Vec<Session>> {
    let events = o.usize("events", 30)?;
    let duration = o.f64("event_duration_s", 5.0)?;
    let tau = mindkit_core::synth::survey_row(&class).map_or(5.0, |r| r.tau_1e_s);
    let isi = o.f64("isi_s", (duration + 5.0 * tau).clamp(20.0, 300.0))?;
    let intensity = o.f64("intensity", 100.0)?;
    let max_s = o.f64("max_session_s", 600.0)?;
    let lead = mindkit_core::session::DEFAULT_BASELINE_WINDOW_S.1;
    let per = (((max_s - lead) / isi).floor() as usize).max(1);
    let baseline = BaselineModel {
        noise_sigma_mv: o.f64("noise_mv", BaselineModel::for_class(&class).noise_sigma_mv)?,
        ..BaselineModel::default()
    };
    let mut out = Vec::new();
    let mut left = events;
    let mut k = 0u64;
    while left > 0 {
        let n = left.min(per);
        let plan: Vec<StimulusEvent> =
            (0..n).map(|i| StimulusEvent::new(class.clone(), lead + isi * i as f64, duration, intensity)).collect();
        let params = SynthParams { duration_s: (lead + isi * n as f64).min(max_s.max(lead + isi)), baseline, ..SynthParams::default() };
        out.push(synth_session(&plan, &params, crate::experiments::Seeds(seed).sub("synth", k))?);
        left -= n;
        k += 1;
    }
    Ok(out)
}

// ------------------------------------------------------------- preprocess

fn preprocess(c: &Common, input: &Path) -> Result<i32> {
    let o = Overrides::new(settings(c)?);
    let smooth_s = o.f64("smooth_s", 0.0)?;
    o.ensure_consumed()?;
    let mut session = load_session(input)?;
    let fits = fit_linear_drift(&session.trace, session.baseline_window_s)?;
    let mut trace = remove_drift(&session.trace, &fits);
    if smooth_s > 0.0 {
        trace = crate::experiments::classify::smoothing(&trace, smooth_s)?;
    }
    session.trace = trace;
    session.provenance.insert("preprocess".into(), format!("drift removed; smoothing {smooth_s} s"));
    create(&c.out)?;
    let mut written = save(&session, &c.out.join("preprocessed.csv"))?;
    let drift = c.out.join("drift.json");
    write_text(&drift, &(serde_json::to_string_pretty(&fits)? + "\n"))?;
    written.push(drift);
    finish(&mut Manifest::new("preprocess", c.seed), &c.out, &written)?;
    Ok(EXIT_PASS)
}

// --------------------------------------------------------------- features

fn features(c: &Common, input: &Path) -> Result<i32> {
    let o = Overrides::new(settings(c)?);
    let pre_s = o.f64("pre_s", 2.0)?;
    let post_s = o.f64("post_s", 30.0)?;
    let config = FeatureConfig {
        onset_threshold_sigma: o.f64("onset_threshold_sigma", 3.0)?,
        slope_window_s: o.f64("slope_window_s", 0.5)?,
        n_spectral_bins: o.usize("spectral_bins", 32)?,
        ..FeatureConfig::default()
    };
    o.ensure_consumed()?;
    let session = load_session(input)?;
    let fits = fit_linear_drift(&session.trace, session.baseline_window_s)?;
    let flat = remove_drift(&session.trace, &fits);
    let (b0, b1) = session.baseline_window_s;
    let (i0, i1) = (flat.index_at_or_after(b0), flat.index_at_or_before(b1));
    let sigma: Vec<f64> = (0..flat.n_channels())
        .map(|ch| sd(&flat.channel(ch)[i0..=i1.max(i0)]).max(1e-9))
        .collect();
    let mut per_event = Vec::new();
    for (i, e) in session.events.iter().enumerate() {
        let start = flat.index_at_or_after(e.onset_s - pre_s);
        let end = (flat.index_at_or_before(e.offset_s() + post_s) + 1).min(flat.n_samples());
        let window = flat.slice_rows(start, end);
        per_event.push((i, e.class.name(), extract_event_features(&window, &sigma, e.onset_s, e.duration_s, &config)?));
    }
    let rows: Vec<FeatureRow<'_>> = per_event
        .iter()
        .flat_map(|(i, class, feats)| {
            feats.iter().zip(&flat.channels).map(move |(f, ch)| FeatureRow {
                event_index: *i,
                class: class.clone(),
                channel: ch,
                features: f,
            })
        })
        .collect();
    create(&c.out)?;
    let path = c.out.join("features.csv");
    write_feature_csv(&path, &rows)?;
    finish(&mut Manifest::new("features", c.seed), &c.out, &[path])?;
    Ok(EXIT_PASS)
}

// -------------------------------------------------------------- calibrate

fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
            bail!("{}:{}: expected two columns", path.display(), n + 1);
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(x), Ok(y)) => out.push((x, y)),
            _ if n == 0 => continue, // header
            _ => bail!("{}:{}: not numeric", path.display(), n + 1),
        }
    }
    Ok(out)
}

fn calibrate(c: &Common, input: &Path) -> Result<i32> {
    let o = Overrides::new(settings(c)?);
    let model = o.string("model", "hill");
    let endpoint = o.bool("endpoint_normalized", false)?;
    o.ensure_consumed()?;
    let data = read_pairs(input)?;
    let (json, points) = match model.as_str() {
        "hill" => {
            let r = HillReport::new(fit_hill(&data, endpoint)?, &data);
            (serde_json::to_string_pretty(&r)?, r.points)
        }
        "recovery" => {
            let r = RecoveryReport::new(fit_recovery(&data)?, &data);
            (serde_json::to_string_pretty(&r)?, r.points)
        }
        other => bail!("model must be hill or recovery, got `{other}`"),
    };
    create(&c.out)?;
    let fit = c.out.join("fit.json");
    write_text(&fit, &(json + "\n"))?;
    let curve = Artifact::csv(
        "curve.csv",
        &["x", "observed", "predicted", "residual"],
        points.iter().map(|p| vec![num(p.x), num(p.observed), num(p.predicted), num(p.residual)]),
    );
    let curve_path = c.out.join(&curve.name);
    write_text(&curve_path, &curve.contents)?;
    finish(&mut Manifest::new(&format!("calibrate {model}"), c.seed), &c.out, &[fit, curve_path])?;
    Ok(EXIT_PASS)
}

// ----------------------------------------------------------------- decode

const DECODE_COLUMNS: [&str; 4] = ["dv_max_mV", "peak_mV", "snr_mean", "initial_slope_mV_per_s"];

/// One row per event: the chosen feature columns of every channel.
fn event_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("{} is empty", path.display()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| anyhow!("missing column {name}"));
    let (ev, cl) = (col("event")?, col("class")?);
    let feats: Vec<usize> = DECODE_COLUMNS.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let mut events: BTreeMap<usize, (String, Vec<f64>)> = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let id: usize = f[ev].parse()?;
        let entry = events.entry(id).or_insert_with(|| (f[cl].to_string(), Vec::new()));
        for &k in &feats {
            entry.1.push(f[k].parse()?);
        }
    }
    Ok(events.into_values().collect())
}

fn decode(c: &Common, inputs: &[PathBuf]) -> Result<i32> {
    let o = Overrides::new(settings(c)?);
    let folds = o.usize("folds", 3)?;
    let lambda = match o.f64("lambda", -1.0)? {
        l if l >= 0.0 => Some(l),
        _ => None,
    };
    o.ensure_consumed()?;
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for p in inputs {
        for r in event_rows(p)? {
            groups.push(rows.len() % folds.max(2));
            rows.push(r);
        }
    }
    let mut names: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    names.sort();
    names.dedup();
    if names.len() < 2 {
        bail!("decode needs at least two stimulus classes, found {}", names.len());
    }
    let width = rows[0].1.len();
    if rows.iter().any(|r| r.1.len() != width) {
        bail!("feature files disagree on channel count");
    }
    let labels: Vec<usize> = rows.iter().map(|r| names.binary_search(&r.0).unwrap_or(0)).collect();
    let x = DMatrix::from_fn(rows.len(), width, |r, k| rows[r].1[k]);
    let inner: Vec<usize> = (0..rows.len()).collect();
    let g = leave_one_group_out(&x, &labels, names.len(), &groups, &inner, lambda, false, Scheme::OneHot)?;
    let confusion = ConfusionMatrix::from_predictions(&labels, &g.predictions, &names)?;
    let metrics = classification_metrics(&confusion)?;
    println!(
        "accuracy {:.4}  balanced {:.4}  kappa {:.4}  ({} events)",
        metrics.accuracy,
        metrics.balanced_accuracy,
        metrics.cohens_kappa,
        rows.len()
    );
    let report = DecoderReport {
        lambda: Some(median(&g.lambdas)),
        confusion: Some(confusion),
        classification: Some(metrics),
        ..DecoderReport::default()
    };
    create(&c.out)?;
    let path = c.out.join("decode.json");
    write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    finish(&mut Manifest::new("decode", c.seed), &c.out, &[path])?;
    Ok(EXIT_PASS)
}

// ------------------------------------------------------------------ bench

fn bench(experiment: &str, c: &Common, threads: usize) -> Result<i32> {
    if experiment == "list" {
        for id in ExperimentId::ALL {
            println!("{:<16} {}", id.name(), id.anchor());
        }
        return Ok(EXIT_PASS);
    }
    let id: ExperimentId = experiment.parse()?;
    let mut map = settings(c)?;
    map.remove("experiment");
    let file_seed = map.remove("seed").map(|s| s.parse::<u64>()).transpose().context("seed in config")?;
    let seed = c.seed.or(file_seed).ok_or_else(|| anyhow!("bench needs --seed (or seed= in the config)"))?;
    let config = BenchConfig { experiment: id, seed, overrides: map };
    let output = run_bench_threads(&config, threads)?;
    for check in &output.summary.checks {
        println!("{} {}", if check.pass { "PASS" } else { "FAIL" }, check.name);
    }
    let manifest = write_bundle(&output, &c.out)?;
    println!("wrote {}", manifest.display());
    Ok(if output.summary.pass { EXIT_PASS } else { EXIT_TOLERANCE })
}

// ----------------------------------------------------------------- report

fn report(c: &Common, input: &Path) -> Result<i32> {
    let o = Overrides::new(settings(c)?);
    o.ensure_consumed()?;
    let mut found = Vec::new();
    let mut dirs = vec![input.to_path_buf()];
    while let Some(d) = dirs.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                dirs.push(p);
            } else if p.file_name().is_some_and(|n| n == "summary.json") {
                found.push(p);
            }
        }
    }
    found.sort();
    if found.is_empty() {
        bail!("no summary.json under {}", input.display());
    }
    let mut rows = Vec::new();
    let mut all_pass = true;
    for p in &found {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p)?)?;
        let exp = v["experiment"].as_str().unwrap_or("?").to_string();
        let seed = v["seed"].as_u64().map_or(String::new(), |s| s.to_string());
        for chk in v["checks"].as_array().into_iter().flatten() {
            let pass = chk["pass"].as_bool().unwrap_or(false);
            all_pass &= pass;
            let value = chk["value"].as_f64().map_or(String::new(), num);
            rows.push(vec![exp.clone(), seed.clone(), chk["name"].as_str().unwrap_or("?").to_string(), value, pass.to_string()]);
        }
        println!("{} {}", if v["pass"].as_bool().unwrap_or(false) { "PASS" } else { "FAIL" }, exp);
    }
    create(&c.out)?;
    let table = Artifact::csv("report.csv", &["experiment", "seed", "check", "value", "pass"], rows);
    let path = c.out.join(&table.name);
    write_text(&path, &table.contents)?;
    finish(&mut Manifest::new("report", c.seed), &c.out, &[path])?;
    Ok(if all_pass { EXIT_PASS } else { EXIT_TOLERANCE })
}
