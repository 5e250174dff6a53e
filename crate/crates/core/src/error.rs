//! Error type shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Variants are deliberately fine-grained so callers (and tests) can match on
/// the exact failure instead of parsing message strings.
#[derive(Debug, Error)]
pub enum Error {
    /// Two volumes/fields that must share a grid do not.
    #[error("grid mismatch in {context}")]
    GridMismatch { context: &'static str },

    /// A buffer length does not match the voxel count implied by its grid.
    #[error("length mismatch in {context}: expected {expected}, got {actual}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A value violates the stated range for its role (mask values, weights,
    /// sigma, spacing, percentile, ...). `detail` names the offending value.
    #[error("invalid value in {context}: {detail}")]
    ValueOutOfRange { context: &'static str, detail: String },

    /// NaN or infinity where a finite number is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// A volume of the wrong kind for an operation.
    #[error("{context} expects a {expected} volume, got {actual}")]
    KindMismatch {
        context: &'static str,
        expected: &'static str,
        actual: &'static str,
    },

    /// A mask with no voxels of the class an operation needs.
    #[error("empty mask in {context}")]
    EmptyMask { context: &'static str },

    /// A warped landmark carries no mass on the target grid.
    #[error("zero mass in {context}")]
    ZeroMass { context: &'static str },

    /// Grid too small for a finite-difference stencil.
    #[error("{context} requires at least {min} voxels per axis")]
    GridTooSmall { context: &'static str, min: usize },

    /// Upsampling target is coarser than the source field.
    #[error("upsample target is coarser than the source along axis {axis}")]
    TargetCoarser { axis: usize },

    /// The objective became NaN/inf during optimization.
    #[error("loss became non-finite at stage {stage}, iteration {iteration}")]
    NanLoss { stage: usize, iteration: usize },

    /// Phantom generation kept producing folded deformations.
    #[error("phantom field still folds after {attempts} attempts")]
    FoldedField { attempts: usize },

    /// A landmark id present on one side of a pairing but not the other.
    #[error("landmark {id:?} has no partner")]
    UnpairedLandmark { id: String },

    /// A referenced file does not exist.
    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },

    /// OS-level I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON (config, manifest or metrics file).
    #[error("invalid JSON in {path}: {detail}")]
    Json { path: PathBuf, detail: String },

    /// A required MetaImage header key is absent.
    #[error("{path}: missing required header key {key}")]
    MhdMissingKey { path: PathBuf, key: &'static str },

    /// A MetaImage header key outside the supported set.
    #[error("{path}: unknown header key {key:?}")]
    MhdUnknownKey { path: PathBuf, key: String },

    /// A MetaImage header key has a value we cannot handle.
    #[error("{path}: unsupported value {value:?} for header key {key}")]
    MhdUnsupportedValue {
        path: PathBuf,
        key: &'static str,
        value: String,
    },

    /// Raw payload size disagrees with the header (truncated or padded file).
    #[error("{path}: payload holds {actual} bytes, header implies {expected}")]
    MhdPayloadSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    /// A header line that is not `Key = value`.
    #[error("{path}: malformed header line {line}")]
    MhdMalformedLine { path: PathBuf, line: usize },
}
