use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("volume has zero standard deviation")]
    ConstantVolume,
    #[error("volume axis {axis} has {size} voxels, smaller than the output tile ({tile})")]
    VolumeTooSmall { axis: usize, size: usize, tile: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("feature window around proposal {index} is empty")]
    EmptyWindow { index: usize },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("aleatoric map must be strictly positive (voxel {index} = {value})")]
    NonPositiveAleatoric { index: usize, value: f64 },
    #[error("no Monte-Carlo samples supplied")]
    EmptySampleList,
    #[error("structure mask has no foreground voxel")]
    EmptyStructure,
    #[error("tissue mask has no background voxel outside the structure")]
    DegenerateEsd,
    #[error("cell set is empty")]
    EmptyCells,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("could not place {requested} points with separation {separation} um (placed {placed})")]
    PackingInfeasible { requested: usize, placed: usize, separation: f64 },
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name, used by the CLI error JSON and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ConstantVolume => "ConstantVolume",
            Error::VolumeTooSmall { .. } => "VolumeTooSmall",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::EmptyWindow { .. } => "EmptyWindow",
            Error::SingleClass => "SingleClass",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ShapeMismatch(..) => "ShapeMismatch",
            Error::NonPositiveAleatoric { .. } => "NonPositiveAleatoric",
            Error::EmptySampleList => "EmptySampleList",
            Error::EmptyStructure => "EmptyStructure",
            Error::DegenerateEsd => "DegenerateESD",
            Error::EmptyCells => "EmptyCells",
            Error::AllZeroDifferences => "AllZeroDifferences",
            Error::PackingInfeasible { .. } => "PackingInfeasible",
            Error::Format(_) => "Format",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}
