use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cell index ({row}, {col}) outside {rows}x{cols} grid")]
    CellOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid grid spec: {0}")]
    InvalidGridSpec(String),
    #[error("invalid class value {0} (expected 0..=3)")]
    InvalidClass(u8),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed {format} data: {reason}")]
    Malformed { format: &'static str, reason: String },
    #[error("invalid disparity {0} (must be > 0)")]
    InvalidDisparity(f64),
    #[error("nonpositive depth {0}")]
    NonPositiveDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("source field of view narrower than reference ({src:.4} < {reference:.4} rad)")]
    FovTooNarrow { src: f64, reference: f64 },
    #[error("class mapping has no label for ground class {0}")]
    EmptyMapping(u8),
    #[error("angle {degrees} deg outside allowed range (|angle| {bound})")]
    AngleOutOfRange { degrees: f64, bound: &'static str },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("spec mismatch between predicted and truth grids")]
    SpecMismatch,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
