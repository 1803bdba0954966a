use mindkit_core::features::{extract_event_features, FeatureConfig};
use mindkit_core::preprocess::{fit_linear_drift, remove_drift};
use mindkit_core::synth::{default_rise_s, synth_session, BaselineModel, SynthParams, SURVEY_TABLE};
use mindkit_core::{slice_events, StimulusEvent};

const ONSET: f64 = 20.0;

#[test]
fn survey_rows_recovered_within_one_sample() {
    let cfg = FeatureConfig::default();
    for row in &SURVEY_TABLE {
        let rise = default_rise_s(row.tau_1e_s);
        let params = SynthParams {
            duration_s: ONSET + rise + 4.0 * row.tau_1e_s + 5.0,
            baseline: BaselineModel::noiseless(),
            n_channels: 1,
            ..SynthParams::default()
        };
        let dt = 1.0 / params.sample_rate_hz;
        let plan = [StimulusEvent::new(row.class.clone(), ONSET, 0.0, 1.0)];
        let session = synth_session(&plan, &params, 3).unwrap();
        let fits = fit_linear_drift(&session.trace, session.baseline_window_s).unwrap();
        let flat = remove_drift(&session.trace, &fits);
        let window = flat.slice_rows(flat.index_at_or_after(ONSET - 1.0), flat.n_samples());
        let f = &extract_event_features(&window, &[1e-3], ONSET, 0.0, &cfg).unwrap()[0];

        let name = row.class.name();
        // one sample of the rise ramp bounds the sampled-peak error
        let dv_tol = row.dv_max_mv * dt / rise + 1e-9;
        assert!((f.dv_max_mv - row.dv_max_mv).abs() <= dv_tol, "{name}: dv {}", f.dv_max_mv);
        let unresolvable = row.tau_1e_s < cfg.tau_resolution_samples * dt;
        if unresolvable {
            assert!(f.tau_below_resolution, "{name}: tau {:?} not flagged", f.tau_1e_s);
        } else {
            let tau = f.tau_1e_s.unwrap();
            assert!(!f.tau_below_resolution, "{name}");
            assert!((tau - row.tau_1e_s).abs() <= dt, "{name}: tau {tau} vs {}", row.tau_1e_s);
        }
    }
}

#[test]
fn slicing_thirty_events() {
    let plan: Vec<StimulusEvent> = (0..30)
        .map(|i| StimulusEvent::new(mindkit_core::StimulusClass::Touch, 25.0 + 15.0 * i as f64, 1.0, 1.0))
        .collect();
    let params = SynthParams { duration_s: 480.0, ..SynthParams::default() };
    let session = synth_session(&plan, &params, 11).unwrap();
    let windows = slice_events(&session, 2.0, 10.0);
    assert_eq!(windows.len(), 30);
    for (event, w) in &windows {
        assert_eq!(w.n_samples(), 13 * 400 + 1);
        assert!((w.t0_s - (event.onset_s - 2.0)).abs() < 1e-9);
    }
}
