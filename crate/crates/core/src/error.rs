use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("degenerate batch in batch_norm: {count} values per channel, need at least 2 in train mode")]
    DegenerateBatch { count: usize },
    #[error("target index {target} out of range for {classes} classes")]
    Index { target: usize, classes: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("mix error: {0}")]
    Mix(String),
    #[error("training diverged at step {step}: loss_y={loss_y}, loss_z={loss_z} ({diagnostics})")]
    Divergence {
        step: usize,
        loss_y: f64,
        loss_z: f64,
        diagnostics: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
