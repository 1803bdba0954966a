use std::fs;

use mindkit_core::session::{SessionPaths, VOLTAGE_QUANTUM_MV};
use mindkit_core::synth::{synth_session, SynthParams};
use mindkit_core::{load_session, save_session, SessionError, StimulusClass, StimulusEvent};
use proptest::prelude::*;

fn small_session(seed: u64) -> mindkit_core::Session {
    let plan = [StimulusEvent::new(StimulusClass::WhiteLight, 1.0, 0.5, 100.0)];
    let params = SynthParams { duration_s: 2.0, ..SynthParams::default() };
    synth_session(&plan, &params, seed).unwrap()
}

#[test]
fn million_sample_round_trip() {
    let plan: Vec<StimulusEvent> = (0..20)
        .map(|i| StimulusEvent::new(StimulusClass::Pressure, 25.0 + 30.0 * i as f64, 2.0, 1.0))
        .collect();
    // 4 channels x 250 000 rows
    let params = SynthParams { duration_s: 625.0, ..SynthParams::default() };
    let session = synth_session(&plan, &params, 21).unwrap();
    assert_eq!(session.trace.samples.len(), 1_000_000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("long.csv");
    save_session(&session, &path).unwrap();
    let back = load_session(&path).unwrap();
    assert_eq!(back.events, session.events);
    assert_eq!(back.baseline_window_s, session.baseline_window_s);
    assert_eq!(back.trace.sample_rate_hz, session.trace.sample_rate_hz);
    let worst = (&back.trace.samples - &session.trace.samples).amax();
    assert!(worst <= VOLTAGE_QUANTUM_MV * 0.5 + 1e-12, "worst {worst}");
}

#[test]
fn missing_meta_infers_rate() {
    let session = small_session(2);
    let dir = tempfile::tempdir().unwrap();
    let paths = save_session(&session, &dir.path().join("s.csv")).unwrap();
    fs::remove_file(&paths.meta_json).unwrap();
    let back = load_session(&paths.trace_csv).unwrap();
    assert!((back.trace.sample_rate_hz - 400.0).abs() < 1e-6);
}

#[derive(Debug, Clone)]
enum Corruption {
    Text(usize, usize),
    DropField(usize),
    ExtraField(usize),
    Nan(usize, usize),
}

fn corruption() -> impl Strategy<Value = Corruption> {
    prop_oneof![
        (1usize..800, 0usize..5).prop_map(|(r, c)| Corruption::Text(r, c)),
        (1usize..800).prop_map(Corruption::DropField),
        (1usize..800).prop_map(Corruption::ExtraField),
        (1usize..800, 1usize..5).prop_map(|(r, c)| Corruption::Nan(r, c)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn corrupted_rows_are_rejected(c in corruption()) {
        let session = small_session(5);
        let dir = tempfile::tempdir().unwrap();
        let paths = SessionPaths::from_trace_path(&dir.path().join("c.csv"));
        save_session(&session, &paths.trace_csv).unwrap();
        let text = fs::read_to_string(&paths.trace_csv).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut edit = |row: usize, f: &dyn Fn(&mut Vec<String>)| {
            let mut fields: Vec<String> = lines[row].split(',').map(str::to_string).collect();
            f(&mut fields);
            lines[row] = fields.join(",");
        };
        match c {
            Corruption::Text(r, col) => edit(r, &|f| f[col] = "abc".into()),
            Corruption::DropField(r) => edit(r, &|f| { f.pop(); }),
            Corruption::ExtraField(r) => edit(r, &|f| f.push("1.0".into())),
            Corruption::Nan(r, col) => edit(r, &|f| f[col] = "NaN".into()),
        }
        fs::write(&paths.trace_csv, lines.join("\n") + "\n").unwrap();
        let err = load_session(&paths.trace_csv).unwrap_err();
        let located = matches!(err, SessionError::RowLength { .. } | SessionError::BadValue { .. });
        prop_assert!(located, "{err}");
    }
}
