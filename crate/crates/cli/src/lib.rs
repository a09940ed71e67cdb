//! Pipeline behind the `sparseset` binary: config resolution and the
//! generate / train / fit / evaluate / report stages.

mod config;
mod error;
mod pipeline;

pub use config::{parse_set, resolve, EvalSettings, Overrides, Preset, RunConfig, SMOKE_ECOLI_FIT_LIMIT};
pub use error::CliError;
pub use pipeline::{
    evaluate, execute, fit, generate, init_threads, report, train, Command, Paths, PLOTS_FILE, RESOLVED_CONFIG,
    SCORES_FILE,
};
