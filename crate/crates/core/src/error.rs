//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("row {row}: expected {expected} cells, found {found}")]
    RowArity {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("label column {column}: {reason}")]
    LabelColumn { column: String, reason: String },
    #[error("identifier column missing: {0}")]
    IdentifierMissing(String),
    #[error("non-finite value in column {column}, row {row}")]
    NonFiniteInput { column: String, row: usize },
    #[error("schema column missing: {0}")]
    SchemaColumnMissing(String),
    #[error("class {label} has only {count} samples, fewer than {splits} splits")]
    EmptyClass {
        label: u8,
        count: usize,
        splits: usize,
    },
    #[error("expected vector of length {expected}, got {found}")]
    WrongLength { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("missing activation range for tensor {0}")]
    RangeMissing(String),
    #[error("model structures differ: {0}")]
    StructureMismatch(String),
    #[error("int32 accumulator overflow in layer {layer}")]
    AccumulatorOverflow { layer: usize },
    #[error("underdetermined fit: {observations} observations for {params} free parameters")]
    Underdetermined { observations: usize, params: usize },
    #[error("profile fit did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("empty table")]
    EmptyTable,
    #[error("output not writable: {0}")]
    UnwritableOutput(String),
    #[error("model file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
