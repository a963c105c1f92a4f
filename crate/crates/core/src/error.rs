use thiserror::Error;

/// Errors raised anywhere in the codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter constraint violated: {0}")]
    Constraint(String),

    #[error("sqrt of non-positive value {value} at element {index}")]
    NonPositiveSqrt { index: usize, value: f64 },

    #[error("image {height}x{width} too small for {scales}-scale MS-SSIM with window {window}; use at most {max_scales} scales")]
    TooSmallForMsSsim {
        height: usize,
        width: usize,
        scales: usize,
        window: usize,
        max_scales: usize,
    },

    #[error("truncated data at byte {offset}")]
    Truncated { offset: usize },

    #[error("corrupt data at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },

    #[error("bad magic number")]
    BadMagic,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch in {section} at byte {offset}")]
    Checksum { section: String, offset: usize },

    #[error("config hash mismatch: expected {expected:016x}, found {found:016x}")]
    ConfigMismatch { expected: u64, found: u64 },

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: u64, diagnostics: String },

    #[error("config parse error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn corrupt(offset: usize, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            offset,
            reason: reason.into(),
        }
    }
}
