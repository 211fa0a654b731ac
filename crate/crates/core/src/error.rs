use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value at timestep {timestep} of the forward pass")]
    NonFiniteForward { timestep: usize },

    #[error("non-finite update in parameter array {array}")]
    NonFiniteUpdate { array: &'static str },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("non-finite loss while perturbing {array}[{index}]")]
    NonFiniteCheck { array: String, index: usize },

    #[error("pooled covariance is singular after adding ridge {ridge:e}; try a larger ridge")]
    SingularCovariance { ridge: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
