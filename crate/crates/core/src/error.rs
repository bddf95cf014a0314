use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("degenerate axis: {0}")]
    DegenerateAxis(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("vocab error: token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(
        "calibration error: target WER {target:.4} unreachable, closest achieved {achieved:.4}"
    )]
    Calibration { target: f64, achieved: f64 },

    #[error("undefined reference: {0}")]
    UndefinedReference(String),

    #[error("migration error: checkpoint version {found}, this build reads version {expected}")]
    Migration { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short category name, used for CLI exit codes and messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) | Error::Rank(_) | Error::DegenerateAxis(_) => "shape",
            Error::Label(_) | Error::Vocab { .. } => "label",
            Error::Optimizer(_) => "optimizer",
            Error::Config(_) => "config",
            Error::Corpus(_) | Error::Data(_) | Error::UndefinedReference(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Calibration { .. } => "calibration",
            Error::Migration { .. } | Error::Corruption(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

/// Adapter for `map_err` that prefixes an I/O error with the path involved.
pub fn at_path(path: &std::path::Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
