use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("time {t} outside the allowed range [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("integration became stiff at t = {t} (step {h:e}) for {params}")]
    Stiffness { t: f64, h: f64, params: String },
    #[error("integration failed for {params}: {reason}")]
    Integration { reason: String, params: String },
    #[error("channel {0} has fewer than 2 values in the training split")]
    SparseChannel(String),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("format version mismatch: file has {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("{}:{line}: {msg}", file.display())]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("scoring error: {0}")]
    Scoring(String),
    #[error("non-finite training loss at step {step} (batch seed {batch_seed})")]
    NonFiniteLoss { step: usize, batch_seed: u64 },
    #[error(transparent)]
    Nn(#[from] sparseset_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CoreError {
    /// Whether this error reflects a numerical failure rather than bad
    /// input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::Stiffness { .. }
                | CoreError::Integration { .. }
                | CoreError::NonFiniteLoss { .. }
                | CoreError::Scoring(_)
                | CoreError::Nn(sparseset_nn::NnError::NonFinite(_))
        )
    }
}
