use std::path::PathBuf;

/// Every failure the toolkit can report.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("crop {crop_w}x{crop_h} does not fit in a {width}x{height} image")]
    CropTooLarge {
        crop_w: usize,
        crop_h: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("gamma must be positive and finite, got {0}")]
    NonPositiveGamma(f64),
    #[error("gamma == 1 is the identity mapping; the quantity is undefined")]
    GammaIsOne,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad range: {0}")]
    BadRange(String),
    #[error("image listed in manifest is missing: {0}")]
    MissingImage(PathBuf),
    #[error("both class labels must be present")]
    DegenerateLabels,

    #[error("image dimensions {width}x{height} are not multiples of 8")]
    DimensionNotMultipleOf8 { width: usize, height: usize },
    #[error("JPEG quality must be in [1, 100], got {0}")]
    QualityOutOfRange(i64),

    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward called without a matching train-mode forward")]
    StaleCache,
    #[error("not a checkpoint (bad magic or version)")]
    BadMagic,
    #[error("network spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input {height}x{width} is too small (minimum {min}x{min})")]
    InputTooSmall { height: usize, width: usize, min: usize },

    #[error("need {needed} source images, only {available} available")]
    InsufficientSources { needed: usize, available: usize },
    #[error("unknown scenario: {0}")]
    UnknownScenario(String),
    #[error("requested sizes need {needed} sources, data has {available}")]
    SizesExceedData { needed: usize, available: usize },
    #[error("split {0} is empty")]
    EmptySplit(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    DivergedLoss { iteration: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
