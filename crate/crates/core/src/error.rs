use std::path::PathBuf;

/// Errors raised by every stage of the stain classification pipelines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid label `{0}`")]
    InvalidLabel(String),
    #[error("cannot project `{label}` onto class set `{set}`: no matching class and no `other` bucket")]
    Projection { label: String, set: String },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("slide metadata error in {path}: {msg}")]
    Metadata { path: PathBuf, msg: String },
    #[error("tiff decode error in {path}: {msg}")]
    Tiff { path: PathBuf, msg: String },
    #[error("refusing to upsample: requested {requested:?} exceeds level-0 size {available:?}")]
    UpsampleRefused {
        requested: (u32, u32),
        available: (u32, u32),
    },
    #[error("patch at ({x}, {y}) with extent {extent:.1}px exceeds slide bounds {width}x{height}")]
    Bounds {
        x: u32,
        y: u32,
        extent: f64,
        width: u32,
        height: u32,
    },
    #[error("override mask {path} is {found:?}, expected {expected:?}")]
    OverrideShape {
        path: PathBuf,
        expected: (u32, u32),
        found: (u32, u32),
    },

    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty bag: {0}")]
    EmptyBag(String),
    #[error("stage error: {0}")]
    Stage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("refusing to write into non-empty directory {0} (use --force)")]
    Refused(PathBuf),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png error: {0}")]
    Png(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attach a path to `std::io` failures.
pub(crate) trait IoContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
