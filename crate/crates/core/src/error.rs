use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the analysis kernels and the on-disk loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("malformed npy file {path}: {reason}")]
    Npy { path: PathBuf, reason: String },

    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("label array `{attribute}` has length {found}, expected {expected}")]
    LabelLength {
        attribute: String,
        expected: usize,
        found: usize,
    },

    #[error("label ids for `{attribute}` are not dense in [0, {classes}): {reason}")]
    NonDenseLabels {
        attribute: String,
        classes: usize,
        reason: String,
    },

    #[error("data contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty embedding set")]
    Empty,

    #[error("unknown attribute `{0}`")]
    MissingAttribute(String),

    #[error("class {class} of `{attribute}` has {count} sample(s); at least {required} needed")]
    UnsplittableClass {
        attribute: String,
        class: usize,
        count: usize,
        required: usize,
    },

    #[error("`{attribute}` has {classes} class(es); at least 2 needed")]
    DegenerateClasses { attribute: String, classes: usize },

    #[error("stratum multisets differ between modal and text laws")]
    StratumMismatch,

    #[error("stratum {stratum} has {count} sample(s) in the {law} law; at least {required} needed")]
    SparseStratum {
        stratum: usize,
        law: &'static str,
        count: usize,
        required: usize,
    },

    #[error("missing stratum ids for the {0} law")]
    MissingStrata(&'static str),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("need at least {required} samples, got {found}")]
    TooFewSamples { required: usize, found: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix has a negative eigenvalue {0:e}")]
    NotPositiveSemidefinite(f64),

    #[error("requested {k} eigenpairs from a {dim}-dimensional matrix")]
    TooManyModes { k: usize, dim: usize },

    #[error("spectrum is identically zero")]
    ZeroSpectrum,

    #[error("input vector is constant; rank correlation undefined")]
    ConstantInput,

    #[error("sample standard deviation is zero")]
    ZeroVariance,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("exact transport limited to {limit} points per side, got {n}x{m}; use the sliced or sinkhorn estimator")]
    TransportTooLarge { n: usize, m: usize, limit: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("context {context} out of range ({contexts} contexts)")]
    ContextOutOfRange { context: usize, contexts: usize },

    #[error("decoder gradients vanish on every mode; isotropy undefined")]
    EmptyGradient,

    #[error("spectrum has no {0} modes")]
    EmptyModeClass(&'static str),

    #[error("mutual information unavailable: supply an estimate or ground-truth densities")]
    UnknownDensities,

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}
