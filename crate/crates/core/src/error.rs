use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the decomposition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: {msg} (row {row}, column {col})")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        msg: String,
    },
    #[error("non-uniform time grid at row {row}: step {step} differs from {expected}")]
    NonUniformTimeGrid {
        row: usize,
        step: f64,
        expected: f64,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("archive format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("window is rank deficient: numerical rank {rank} cannot support rank {requested}")]
    RankDeficientWindow { rank: usize, requested: usize },
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("window length {window_length} exceeds record length {n_time}")]
    WindowTooLong { window_length: usize, n_time: usize },
    #[error("time index {index} is not covered by any surviving window (nearest failed window: {window:?})")]
    UncoveredTime { index: usize, window: Option<usize> },
    #[error("reconstruction has imaginary residue {ratio:.3e} (relative) in window {window}")]
    ImaginaryResidue { window: usize, ratio: f64 },

    #[error(
        "too few points for clustering: {points} distinct values, {clusters} clusters requested"
    )]
    TooFewPoints { points: usize, clusters: usize },
    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),

    #[error("all {0} windows failed to fit")]
    AllWindowsFailed(usize),
    #[error("band {band} out of range (model has {n_bands} bands)")]
    BandOutOfRange { band: usize, n_bands: usize },
    #[error(
        "window lengths must strictly increase across levels (level {level}: {prev} -> {next})"
    )]
    NonIncreasingWindows {
        level: usize,
        prev: usize,
        next: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model has no global band assignment; run global separation first")]
    MissingGlobalBands,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
