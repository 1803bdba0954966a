//! One module per experiment id; each returns a full output bundle.

use mindkit_core::calibrate::CalibrateError;
use mindkit_core::decode::DecodeError;
use mindkit_core::features::FeatureError;
use mindkit_core::preprocess::PreprocessError;
use mindkit_core::synth::SynthError;
use mindkit_core::{Session, SessionError, StimulusEvent};
use thiserror::Error;

use crate::config::{ConfigError, Overrides};
use crate::report::ReportError;

pub mod classify;
pub mod hill;
pub mod motion;
pub mod pairs;
pub mod pixel;
pub mod repair;
pub mod survey;
pub mod walls;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}")]
    Invalid(String),
}

/// Shared inputs of every experiment.
pub struct Ctx<'a> {
    pub seed: u64,
    pub overrides: &'a Overrides,
}

/// Copyable seed source that can be shared with worker threads.
#[derive(Debug, Clone, Copy)]
pub struct Seeds(pub u64);

impl Seeds {
    /// Independent seed for the `index`-th unit of a named stream, so
    /// results never depend on scheduling order.
    pub fn sub(self, stream: &str, index: u64) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in stream.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        splitmix(splitmix(self.0 ^ h).wrapping_add(index))
    }
}

impl Ctx<'_> {
    pub fn seeds(&self) -> Seeds {
        Seeds(self.seed)
    }

    pub fn sub_seed(&self, stream: &str, index: u64) -> u64 {
        self.seeds().sub(stream, index)
    }

    /// Which generated sessions to keep in the bundle: `none`, `first` or `all`.
    pub fn keep_sessions(&self) -> Result<KeepSessions, ExperimentError> {
        match self.overrides.string("sessions", "first").as_str() {
            "none" => Ok(KeepSessions::None),
            "first" => Ok(KeepSessions::First),
            "all" => Ok(KeepSessions::All),
            other => Err(ConfigError::BadValue {
                key: "sessions".into(),
                value: other.into(),
                kind: "none, first or all",
            }
            .into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepSessions {
    None,
    First,
    All,
}

impl KeepSessions {
    pub fn select(self, prefix: &str, sessions: Vec<Session>) -> Vec<(String, Session)> {
        let take = match self {
            KeepSessions::None => 0,
            KeepSessions::First => 1,
            KeepSessions::All => sessions.len(),
        };
        sessions
            .into_iter()
            .take(take)
            .enumerate()
            .map(|(i, s)| (format!("{prefix}-{i:03}"), s))
            .collect()
    }
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Midpoint median.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Mean over channels of (mean over the last `tail_s` of the stimulus)
/// minus (mean over `pre_s` before onset).
pub fn steady_response(session: &Session, event: &StimulusEvent, tail_s: f64, pre_s: f64) -> f64 {
    let t = &session.trace;
    let on = t.index_at_or_after(event.offset_s() - tail_s);
    let off = t.index_at_or_before(event.offset_s()) + 1;
    let b0 = t.index_at_or_after(event.onset_s - pre_s);
    let b1 = t.index_at_or_after(event.onset_s);
    let per_channel: Vec<f64> = (0..t.n_channels())
        .map(|c| {
            let x = t.channel(c);
            mean(&x[on..off]) - mean(&x[b0..b1])
        })
        .collect();
    mean(&per_channel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn sub_seeds_are_distinct_and_stable() {
        let o = Overrides::new(BTreeMap::new());
        let ctx = Ctx { seed: 7, overrides: &o };
        let a: Vec<u64> = (0..100).map(|i| ctx.sub_seed("walls", i)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_ne!(ctx.sub_seed("walls", 0), ctx.sub_seed("pairs", 0));
        assert_eq!(a[3], ctx.sub_seed("walls", 3));
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
        assert!((sd(&[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) - 0.9986).abs() < 1e-3);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }
}
