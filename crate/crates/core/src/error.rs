use bf_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid sensor metadata: {0}")]
    InvalidMeta(String),
    #[error("radiance scale is undefined for an all-zero image")]
    ZeroImage,
    #[error("invalid exposure list: {0}")]
    InvalidEvList(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidMeta(_) => "invalid_meta",
            Error::ZeroImage => "zero_image",
            Error::InvalidEvList(_) => "invalid_ev_list",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
