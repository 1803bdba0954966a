//! Closed-loop experiment harness behind the `mindkit` command-line tool.
//!
//! Each experiment simulates sessions, runs them through preprocessing,
//! feature extraction and fitting or decoding, and returns a summary with
//! pass/fail checks plus CSV plot data and the generated sessions.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod report;

use thiserror::Error;

pub use config::{BenchConfig, ConfigError, ExperimentId, Overrides};
pub use experiments::{Ctx, ExperimentError};
pub use report::{write_bundle, BenchOutput, Check, Summary};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{experiment}: {source}")]
    Experiment {
        experiment: ExperimentId,
        #[source]
        source: ExperimentError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Run one experiment on the default number of worker threads.
pub fn run_bench(config: &BenchConfig) -> Result<BenchOutput, BenchError> {
    run_bench_threads(config, 0)
}

/// Run one experiment on `threads` workers (0 picks the machine default).
/// Results do not depend on the thread count.
pub fn run_bench_threads(config: &BenchConfig, threads: usize) -> Result<BenchOutput, BenchError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    let experiment = config.experiment;
    let seed = config.seed;
    let values = config.overrides.clone();
    pool.install(move || {
        let overrides = Overrides::new(values);
        let ctx = Ctx { seed, overrides: &overrides };
        let wrap = |source| BenchError::Experiment { experiment, source };
        let out = dispatch(&ctx, experiment).map_err(wrap)?;
        overrides.ensure_consumed()?;
        Ok(out)
    })
}

fn dispatch(ctx: &Ctx<'_>, id: ExperimentId) -> Result<BenchOutput, ExperimentError> {
    use experiments::*;
    match id {
        ExperimentId::StimuliSurvey => survey::run(ctx),
        ExperimentId::HillTube | ExperimentId::HillPixel => hill::run(ctx, id),
        ExperimentId::StaticWalls => walls::run(ctx),
        ExperimentId::StaticPixel => pixel::run(ctx),
        ExperimentId::RotatingBar => motion::run_rotating(ctx),
        ExperimentId::TranslatingBar => motion::run_translating(ctx),
        ExperimentId::Pairs => pairs::run(ctx),
        ExperimentId::Strains => hill::run_strains(ctx),
        ExperimentId::Repair => repair::run(ctx),
    }
}
