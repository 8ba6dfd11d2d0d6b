use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid gaussian spec: {0}")]
    InvalidSpec(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("shape mismatch in tensor `{tensor}`: {message}")]
    ShapeMismatch { tensor: String, message: String },

    #[error("kernel {kernel_h}x{kernel_w} does not fit patch {patch_h}x{patch_w}")]
    KernelTooLarge {
        kernel_h: usize,
        kernel_w: usize,
        patch_h: usize,
        patch_w: usize,
    },

    #[error("ill-posed system: {0}")]
    IllPosed(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-sum kernel cannot be normalized")]
    ZeroSum,

    #[error("kernel sum {0} outside the accepted range [0.9, 1.1]")]
    KernelSum(f64),

    #[error("incomplete solver configuration: {0}")]
    ConfigIncomplete(String),

    #[error("source image {height}x{width} is smaller than crop {crop}")]
    SourceTooSmall {
        height: usize,
        width: usize,
        crop: usize,
    },

    #[error("refinement needs at least one calibration pair")]
    NoPairs,

    #[error("image {height}x{width} too small; minimum side is {min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn dims(message: impl Into<String>) -> Self {
        Error::DimensionMismatch(message.into())
    }
}
