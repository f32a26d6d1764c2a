use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid point cloud: {0}")]
    InvalidPointCloud(String),

    #[error("degenerate affine: |det| = {0:e}")]
    DegenerateAffine(f64),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("mask not simply connected: {0}")]
    NotSimplyConnected(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("undefined HD: {0}")]
    UndefinedHausdorff(&'static str),

    #[error("infeasible config: {0}")]
    InfeasibleConfig(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
