use std::fs;
use std::path::Path;

use mindkit_bench::cli::{main_with, EXIT_ERROR, EXIT_PASS, EXIT_TOLERANCE};
use serde_json::Value;

fn mindkit(args: &[&str]) -> i32 {
    main_with(std::iter::once("mindkit").chain(args.iter().copied()))
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn bench_list_and_bad_arguments() {
    assert_eq!(mindkit(&["bench", "list"]), EXIT_PASS);
    assert_eq!(mindkit(&["--help"]), EXIT_PASS);
    assert_eq!(mindkit(&["no-such-command"]), EXIT_ERROR);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(mindkit(&["bench", "no-such-experiment", "--seed", "1", "--out", out]), EXIT_ERROR);
    assert_eq!(mindkit(&["bench", "strains", "--seed", "1", "--out", out, "--set", "unused_key=3"]), EXIT_ERROR);
}

#[test]
fn bench_writes_bundle_and_flags_tolerance_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pass");
    assert_eq!(mindkit(&["bench", "hill-tube", "--seed", "7", "--out", out.to_str().unwrap()]), EXIT_PASS);
    let summary = json(&out.join("hill-tube/summary.json"));
    assert_eq!(summary["pass"], Value::Bool(true));
    assert!(out.join("hill-tube/manifest.json").exists());

    let strict = dir.path().join("strict");
    let code = mindkit(&["bench", "hill-tube", "--seed", "7", "--out", strict.to_str().unwrap(), "--set", "closed_loop_tol=1e-9"]);
    assert_eq!(code, EXIT_TOLERANCE);
    assert_eq!(mindkit(&["report", "--input", strict.to_str().unwrap(), "--out", strict.to_str().unwrap()]), EXIT_TOLERANCE);
    assert_eq!(mindkit(&["report", "--input", out.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_PASS);
}

#[test]
fn synth_features_decode_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut feature_files = Vec::new();
    for (i, class) in ["white_light", "pressure"].iter().enumerate() {
        let sim = root.join(format!("sim-{class}"));
        let seed = (i + 1).to_string();
        let code = mindkit(&["synth", "--seed", &seed, "--out", sim.to_str().unwrap(), "--set", &format!("stimulus={class}"), "--set", "events=8"]);
        assert_eq!(code, EXIT_PASS);
        let trace = sim.join("sessions/session-000.csv");
        assert!(trace.exists());

        let pre = root.join(format!("pre-{class}"));
        assert_eq!(mindkit(&["preprocess", "--input", trace.to_str().unwrap(), "--out", pre.to_str().unwrap()]), EXIT_PASS);
        assert!(pre.join("drift.json").exists());

        let feat = root.join(format!("feat-{class}"));
        assert_eq!(mindkit(&["features", "--input", trace.to_str().unwrap(), "--out", feat.to_str().unwrap()]), EXIT_PASS);
        feature_files.push(feat.join("features.csv"));
    }
    let dec = root.join("decode");
    let mut args = vec!["decode", "--out", dec.to_str().unwrap(), "--input"];
    args.extend(feature_files.iter().map(|p| p.to_str().unwrap()));
    assert_eq!(mindkit(&args), EXIT_PASS);
    let report = json(&dec.join("decode.json"));
    let accuracy = report["classification"]["accuracy"].as_f64().unwrap();
    assert!(accuracy > 0.5, "accuracy {accuracy}");
}

#[test]
fn calibrate_recovers_noise_free_hill_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (a, e, n): (f64, f64, f64) = (1.22, 5.40, 0.94);
    let mut csv = String::from("level,response\n");
    for x in [0.5_f64, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        csv += &format!("{x},{}\n", a * x.powf(n) / (e.powf(n) + x.powf(n)));
    }
    let input = dir.path().join("curve.csv");
    fs::write(&input, csv).unwrap();
    let out = dir.path().join("fit");
    assert_eq!(mindkit(&["calibrate", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_PASS);
    assert!(out.join("curve.csv").exists());
    let fit = &json(&out.join("fit.json"))["fit"];
    for (key, want) in [("amplitude_mv", a), ("half_level", e), ("exponent", n)] {
        let got = fit[key].as_f64().unwrap();
        assert!((got - want).abs() < 1e-6, "{key}: {got}");
    }
}
