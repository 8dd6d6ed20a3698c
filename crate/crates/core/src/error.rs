use rgbh_tensor::{FormatError, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("spatial extent {extent} not divisible by patch size {patch}")]
    IndivisibleSpatialExtent { extent: usize, patch: usize },
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("token streams differ in length: {rgb} vs {height}")]
    TokenCountMismatch { rgb: usize, height: usize },
    #[error("modality {0} is required by this paradigm but missing")]
    ModalityMissing(&'static str),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("class count mismatch: {0} vs {1}")]
    ClassCountMismatch(usize, usize),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no point falls inside the grid")]
    NoOverlapWithGrid,
    #[error("no ground-classified points")]
    NoGroundPoints,
    #[error("grid specifications differ")]
    GridSpecMismatch,
    #[error("tiles have mixed sizes")]
    MixedTileSizes,
    #[error("unknown group `{0}`")]
    UnknownGroup(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("dataset missing: {0}")]
    DatasetMissing(String),
    #[error("dataset corrupt: {0}")]
    DatasetCorrupt(String),
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable kind, used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "Tensor",
            Error::Format(_) => "Format",
            Error::IndivisibleSpatialExtent { .. } => "IndivisibleSpatialExtent",
            Error::ChannelMismatch { .. } => "ChannelMismatch",
            Error::TokenCountMismatch { .. } => "TokenCountMismatch",
            Error::ModalityMissing(_) => "ModalityMissing",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::ClassCountMismatch(..) => "ClassCountMismatch",
            Error::EmptyCloud => "EmptyCloud",
            Error::NoOverlapWithGrid => "NoOverlapWithGrid",
            Error::NoGroundPoints => "NoGroundPoints",
            Error::GridSpecMismatch => "GridSpecMismatch",
            Error::MixedTileSizes => "MixedTileSizes",
            Error::UnknownGroup(_) => "UnknownGroup",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::DatasetMissing(_) => "DatasetMissing",
            Error::DatasetCorrupt(_) => "DatasetCorrupt",
            Error::CheckpointCorrupt(_) => "CheckpointCorrupt",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
