use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::GroupId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("{what} = {value} must be divisible by {divisor}")]
    Divisibility {
        what: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("normal equations are not positive definite (pivot {index} = {pivot:e})")]
    Singular { index: usize, pivot: f64 },

    #[error("gradient descent diverged at epoch {epoch} (loss {loss:e}, initial {initial:e})")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("closed form is singular: psi1={psi1}, psi2={psi2}, psi3={psi3}")]
    TheorySingular { psi1: f64, psi2: f64, psi3: f64 },

    #[error("group {0} has no rows")]
    EmptyGroup(GroupId),

    #[error("group {0} is not in the universe")]
    UnknownGroup(GroupId),

    #[error("class {0} is absent from the data")]
    UnknownClass(i8),

    #[error("requested {requested} rows from group {group}, which has {available}")]
    GroupTooSmall {
        group: GroupId,
        requested: usize,
        available: usize,
    },

    #[error("{path}: malformed header: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    /// `row` counts data rows from 0, excluding the header.
    #[error("{path}: row {row}: expected {expected} fields, found {found}")]
    RowLength {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: row {row}: {reason}")]
    BadField {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("{path}: unknown group encoding `{value}` at row {row}")]
    BadGroup {
        path: PathBuf,
        row: usize,
        value: String,
    },

    #[error("{path}: byte {offset}: {reason}")]
    BadBinary {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::Diverged { .. }
                | Error::TheorySingular { .. }
        )
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
