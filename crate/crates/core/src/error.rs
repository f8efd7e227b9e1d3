use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty filter")]
    EmptyFilter,
    #[error("non-finite weight at index {0}")]
    NonFiniteWeight(usize),
    #[error("invalid clip: {0} (must be > 0 and finite)")]
    InvalidClip(f64),
    #[error("wrong scheme: uniform quantizer needs bitwidth >= 3, got {0}")]
    WrongScheme(u8),
    #[error("unsupported bitwidth {0}")]
    UnsupportedBitwidth(u8),
    #[error("shape mismatch in {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("candidate grid too coarse: {0} points (need at least 50)")]
    GridTooCoarse(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no calibration entry for {0}-bit weights")]
    MissingCalibration(u8),
    #[error("layer {0} has no bitwidth assignment")]
    MissingBitwidth(String),
    #[error("layer {layer} rounds to zero channels at width multiplier {multiplier}")]
    ZeroChannels { layer: String, multiplier: f64 },
    #[error("target size {target} bits is unreachable; nearest achievable size is {nearest} bits")]
    UnreachableTarget { target: u64, nearest: u64 },
    #[error("non-finite loss at epoch {epoch} (first non-finite activation in {layer})")]
    NonFiniteLoss { epoch: usize, layer: String },
    #[error("mismatched runs: {0}")]
    MismatchedRuns(String),
    #[error("missing triplet member: {0}")]
    MissingTripletMember(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub(crate) fn shape(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { layer: layer.into(), detail: detail.into() }
    }
}
