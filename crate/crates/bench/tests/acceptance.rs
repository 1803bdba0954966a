//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mindkit_bench::experiments::motion::position_metrics;
use mindkit_bench::{run_bench_threads, write_bundle, BenchConfig, BenchOutput, ExperimentId};
use mindkit_core::decode::{circular_metrics, classification_metrics, joint_bit_accuracy, ConfusionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;

struct Run {
    output: BenchOutput,
    elapsed: Duration,
}

fn run(id: ExperimentId, threads: usize) -> Run {
    let start = Instant::now();
    let output = run_bench_threads(&BenchConfig::new(id, SEED), threads).unwrap_or_else(|e| panic!("{id}: {e}"));
    Run { output, elapsed: start.elapsed() }
}

/// Failing checks whose name satisfies `pick`; an empty selection counts as failure.
fn failing(out: &BenchOutput, pick: impl Fn(&str) -> bool) -> Vec<String> {
    let picked: Vec<_> = out.summary.checks.iter().filter(|c| pick(&c.name)).collect();
    if picked.is_empty() {
        return vec![format!("{}: no matching checks", out.summary.experiment)];
    }
    picked
        .into_iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{}:{}={:.6}", out.summary.experiment, c.name, c.value))
        .collect()
}

fn all_checks(out: &BenchOutput) -> Vec<String> {
    failing(out, |_| true)
}

fn bundle_bytes(out: &BenchOutput) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().expect("tempdir");
    write_bundle(out, dir.path()).expect("bundle");
    let mut files = BTreeMap::new();
    collect(dir.path(), dir.path(), &mut files);
    files
}

fn collect(root: &Path, dir: &Path, files: &mut BTreeMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).expect("read_dir") {
        let path = entry.expect("entry").path();
        if path.is_dir() {
            collect(root, &path, files);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            files.insert(rel, fs::read(&path).expect("read"));
        }
    }
}

fn metric_oracles() -> Vec<String> {
    let mut bad = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs().is_nan() || (got - want).abs() > tol {
            bad.push(format!("{name}={got:.6} expected {want}±{tol}"));
        }
    };
    let m = classification_metrics(&ConfusionMatrix::new(vec![vec![45, 5], vec![15, 35]])).unwrap();
    expect("kappa", m.cohens_kappa, 0.60, 1e-12);
    expect("balanced_accuracy", m.balanced_accuracy, 0.8, 1e-12);
    let m = classification_metrics(&ConfusionMatrix::new(vec![vec![90, 10, 0], vec![0, 5, 5], vec![0, 0, 10]])).unwrap();
    expect("balanced_accuracy_imbalanced", m.balanced_accuracy, (0.9 + 0.5 + 1.0) / 3.0, 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let truth: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>() * TAU).collect();
    let guess: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>() * TAU).collect();
    expect("uniform_circular_mae_deg", circular_metrics(&guess, &truth, 4).unwrap().circular_mae_deg, 90.0, 2.0);
    let exact = circular_metrics(&truth[..1000], &truth[..1000], 4).unwrap();
    expect("circular_identity_mae", exact.circular_mae_deg, 0.0, 1e-12);
    expect("matched_harmonic_r2_identity", exact.matched_harmonic_r2, 1.0, 1e-12);
    expect("bin4_identity", exact.bin4_accuracy, 1.0, 0.0);

    let bits = |rng: &mut ChaCha8Rng| (rng.random::<bool>(), rng.random::<bool>());
    let t: Vec<(bool, bool)> = (0..10_000).map(|_| bits(&mut rng)).collect();
    let p: Vec<(bool, bool)> = (0..10_000).map(|_| bits(&mut rng)).collect();
    expect("independent_joint_bit", joint_bit_accuracy(&p, &t).unwrap(), 0.25, 0.01);
    expect("joint_bit_identity", joint_bit_accuracy(&t, &t).unwrap(), 1.0, 0.0);

    let pos: Vec<f64> = (0..200).map(|i| i as f64 * 0.3).collect();
    expect("position_r2_identity", position_metrics(&pos, &pos, 60.0).r_squared, 1.0, 1e-12);
    bad
}

fn main() -> ExitCode {
    let mut outcomes: Vec<(&str, Vec<String>)> = Vec::new();
    let mut runs: Vec<Run> = Vec::new();
    let get = |runs: &[Run], id: ExperimentId| runs.iter().position(|r| r.output.summary.experiment == id).unwrap();
    for id in ExperimentId::ALL {
        runs.push(run(id, 0));
    }

    // 1
    let (tube, pixel) = (&runs[get(&runs, ExperimentId::HillTube)], &runs[get(&runs, ExperimentId::HillPixel)]);
    let mut bad = all_checks(&tube.output);
    bad.extend(all_checks(&pixel.output));
    let hill_time = tube.elapsed + pixel.elapsed;
    if hill_time >= Duration::from_secs(10) {
        bad.push(format!("runtime {hill_time:?}"));
    }
    outcomes.push(("1 hill recovery", bad));

    // 2, 3
    let survey = &runs[get(&runs, ExperimentId::StimuliSurvey)].output;
    outcomes.push(("2 baseline drift", failing(survey, |n| n.starts_with("drift_"))));
    let mut bad = failing(survey, |n| n.starts_with("kinetics_"));
    let rows = survey.summary.checks.iter().filter(|c| c.name.starts_with("kinetics_") && c.name.ends_with("_dv")).count();
    if rows != 14 {
        bad.push(format!("{rows} kinetics rows, expected 14"));
    }
    outcomes.push(("3 stimulus kinetics", bad));

    // 4
    let walls = &runs[get(&runs, ExperimentId::StaticWalls)];
    let mut bad = all_checks(&walls.output);
    if walls.elapsed >= Duration::from_secs(300) {
        bad.push(format!("runtime {:?}", walls.elapsed));
    }
    outcomes.push(("4 static-wall decoding", bad));

    // 5
    let mut bad = all_checks(&runs[get(&runs, ExperimentId::RotatingBar)].output);
    bad.extend(all_checks(&runs[get(&runs, ExperimentId::TranslatingBar)].output));
    outcomes.push(("5 continuous decoding", bad));

    // 6, 7, 8
    outcomes.push(("6 metric oracles", metric_oracles()));
    outcomes.push(("7 superposition", all_checks(&runs[get(&runs, ExperimentId::Pairs)].output)));
    let mut bad = all_checks(&runs[get(&runs, ExperimentId::Strains)].output);
    bad.extend(all_checks(&runs[get(&runs, ExperimentId::Repair)].output));
    outcomes.push(("8 strains and repair", bad));

    // 9: a second run on one worker and a third on four, compared byte for byte
    let mut bad = Vec::new();
    for first in &runs {
        let id = first.output.summary.experiment;
        let reference = bundle_bytes(&first.output);
        for threads in [1, 4] {
            if bundle_bytes(&run(id, threads).output) != reference {
                bad.push(format!("{id} differs on {threads} thread(s)"));
            }
        }
    }
    outcomes.push(("9 determinism", bad));

    let mut ok = true;
    for (name, bad) in &outcomes {
        if bad.is_empty() {
            println!("PASS {name}");
        } else {
            ok = false;
            println!("FAIL {name}: {}", bad.join("; "));
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
