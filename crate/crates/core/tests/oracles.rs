use std::f64::consts::TAU;

use mindkit_core::calibrate::{fit_hill, fit_recovery};
use mindkit_core::decode::{
    circular_metrics, classification_metrics, entrainment_index, joint_bit_accuracy, ConfusionMatrix,
};
use mindkit_core::preprocess::{fit_line, slope_standard_error};
use mindkit_core::synth::{hill, HillResponse};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const INTERCEPT: f64 = 3.17e-3;
const SLOPE: f64 = 7.93e-7;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    r.sample::<f64, _>(StandardNormal)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn drift_exact_line() {
    let t: Vec<f64> = (0..8640).map(|i| i as f64 * 5.0).collect();
    let y: Vec<f64> = t.iter().map(|t| INTERCEPT + SLOPE * t).collect();
    let fit = fit_line(&t, &y).unwrap();
    assert!((fit.slope_mv_per_s - SLOPE).abs() <= 8.0 * f64::EPSILON * SLOPE);
    assert!((fit.intercept_mv - INTERCEPT).abs() <= 1e-16);
}

#[test]
fn drift_slope_within_three_se() {
    let t: Vec<f64> = (0..8640).map(|i| i as f64 * 5.0).collect();
    let span = t[t.len() - 1];
    // R^2 = var_signal / (var_signal + sigma^2) for a uniform design
    let var_signal = SLOPE * SLOPE * span * span / 12.0;
    let sigma = (var_signal * (1.0 / 0.947 - 1.0)).sqrt();
    let mut misses = 0;
    let mut r2 = Vec::new();
    for seed in 0..100 {
        let mut r = rng(seed);
        let y: Vec<f64> = t.iter().map(|t| INTERCEPT + SLOPE * t + sigma * gauss(&mut r)).collect();
        let fit = fit_line(&t, &y).unwrap();
        let se = slope_standard_error(&t, &y, &fit);
        if (fit.slope_mv_per_s - SLOPE).abs() > 3.0 * se {
            misses += 1;
        }
        r2.push(fit.r_squared);
    }
    assert!((median(r2) - 0.947).abs() < 0.01);
    // a 3 SE miss has probability 0.0027 per seed
    assert!(misses <= 2, "{misses} misses");
}

/// Noise SD that gives an expected R^2 of `target` for a 3-parameter fit.
fn hill_sigma(levels: &[f64], h: &HillResponse, target: f64) -> f64 {
    let y: Vec<f64> = levels.iter().map(|&l| h.eval(l)).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let n = levels.len() as f64;
    let k = 1.0 - target;
    (k * ss / ((n - 3.0) - k * (n - 1.0))).sqrt()
}

#[test]
fn noisy_pixel_half_level_median() {
    let h = HillResponse::PIXEL;
    let levels: Vec<f64> = (0..=10).map(|i| 25.5 * i as f64).collect();
    let sigma = hill_sigma(&levels, &h, 0.93);
    let mut es = Vec::new();
    let mut r2 = Vec::new();
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let pts: Vec<(f64, f64)> = levels.iter().map(|&l| (l, h.eval(l) + sigma * gauss(&mut r))).collect();
        let fit = fit_hill(&pts, false).unwrap();
        es.push(fit.half_level);
        r2.push(fit.r_squared);
    }
    let e = median(es);
    let q = median(r2);
    assert!((q - 0.93).abs() < 0.03, "median R^2 {q}");
    assert!((e - h.half_level).abs() / h.half_level <= 0.10, "median E {e}");
}

#[test]
fn strain_refits() {
    let levels = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];
    for (e, n) in [(6.75, 0.90), (6.97, 1.10), (61.09, 0.95), (62.29, 2.59), (117.06, 1.73)] {
        let pts: Vec<(f64, f64)> = levels.iter().map(|&l| (l, hill(1.0, e, n, l) / hill(1.0, e, n, 100.0))).collect();
        let fit = fit_hill(&pts, true).unwrap();
        assert!((fit.half_level - e).abs() / e <= 0.01, "{fit:?}");
        assert!((fit.exponent - n).abs() / n <= 0.02, "{fit:?}");
    }
}

#[test]
fn recovery_t95_under_noise() {
    let k = 19f64.ln();
    let days: Vec<f64> = (0..29).map(|i| i as f64 * 0.25).collect();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut r = rng(5000 + seed);
        let pts: Vec<(f64, f64)> = days
            .iter()
            .map(|&d| (d, 1.0 / (1.0 + (-k * (d - 2.0)).exp()) + 0.05 * gauss(&mut r)))
            .collect();
        let fit = fit_recovery(&pts).unwrap();
        worst = worst.max((fit.t95_days - 3.0).abs());
    }
    assert!(worst <= 0.5, "worst t95 error {worst}");
}

#[test]
fn kappa_hand_value() {
    let m = classification_metrics(&ConfusionMatrix::new(vec![vec![45, 5], vec![15, 35]])).unwrap();
    assert_eq!(m.accuracy, 0.8);
    assert_eq!(m.expected_agreement, 0.5);
    assert!((m.cohens_kappa - 0.6).abs() < 1e-15);
}

#[test]
fn uniform_guess_circular_error() {
    let mut r = rng(77);
    let truth = vec![1.0; 100_000];
    let pred: Vec<f64> = (0..100_000).map(|_| r.random::<f64>() * TAU).collect();
    let m = circular_metrics(&pred, &truth, 4).unwrap();
    assert!((m.circular_mae_deg - 90.0).abs() <= 2.0, "{m:?}");
}

#[test]
fn independent_guess_joint_bits() {
    let mut r = rng(78);
    let draw = |r: &mut ChaCha8Rng| (r.random::<bool>(), r.random::<bool>());
    let truth: Vec<(bool, bool)> = (0..10_000).map(|_| draw(&mut r)).collect();
    let pred: Vec<(bool, bool)> = (0..10_000).map(|_| draw(&mut r)).collect();
    let acc = joint_bit_accuracy(&pred, &truth).unwrap();
    assert!((acc - 0.25).abs() <= 0.01, "{acc}");
}

#[test]
fn entrainment_noise_floor_and_mixture() {
    let fs = 20.0;
    let n = 4000;
    let f0 = 0.5;
    let mut floor = Vec::new();
    let mut mixed = Vec::new();
    for seed in 0..100 {
        let mut r = rng(9000 + seed);
        let noise: Vec<f64> = (0..n).map(|_| gauss(&mut r)).collect();
        floor.push(entrainment_index(&noise, fs, f0).unwrap());
        // unit-amplitude sine has power 1/2; match it with noise SD sqrt(1/2)
        let x: Vec<f64> = (0..n)
            .map(|i| (TAU * f0 * i as f64 / fs).sin() + noise[i] * 0.5f64.sqrt())
            .collect();
        mixed.push(entrainment_index(&x, fs, f0).unwrap());
    }
    let mean_floor = floor.iter().sum::<f64>() / 100.0;
    let bins = (n / 2) as f64;
    assert!((mean_floor - 3.0 / bins).abs() < 1.5 / bins, "{mean_floor}");
    let mean_mixed = mixed.iter().sum::<f64>() / 100.0;
    assert!((mean_mixed - 0.5).abs() <= 0.05, "{mean_mixed}");
}
