//! Simulation and analysis toolkit for multichannel extracellular voltage
//! recordings from living mycelial sensors.
//!
//! The pipeline runs `synth` (or recorded data loaded through `session`)
//! through `preprocess` and `features`, then into `calibrate` for
//! intensity/recovery curves or `decode` for stimulus decoding.

pub mod calibrate;
pub mod decode;
pub mod features;
pub mod preprocess;
pub mod session;
pub mod synth;

pub use session::{
    load_session, save_session, slice_events, Session, SessionError, StimulusClass,
    StimulusEvent, Target, Trace,
};
