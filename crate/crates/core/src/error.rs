use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        /// 1-based data row (the header is row 0).
        row: usize,
        column: String,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("column '{0}' has zero variance and cannot be standardized")]
    ZeroVariance(String),

    #[error("tree structure error: {0}")]
    Structure(String),

    #[error("random-effect penalty undefined: sigma_b2 is 0 but b_hat is non-zero")]
    PenaltyUndefined,

    #[error("singular system: {0}")]
    Singular(String),

    #[error("not enough degrees of freedom: N = {n} but the model has {params} fixed-effect parameters")]
    DegreesOfFreedom { n: usize, params: usize },

    #[error(
        "region {region} holds {count} observations but needs at least {needed} \
         for its regression; lower max_leaves"
    )]
    IllPosedRegion {
        region: usize,
        count: usize,
        needed: usize,
    },

    #[error("stochastic gradient ascent diverged in epoch {0}")]
    Divergence(usize),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("experiment error: {0}")]
    Experiment(String),

    #[error("model file error (line {line}): {message}")]
    ModelFormat { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Singular(_)
            | Error::DegreesOfFreedom { .. }
            | Error::IllPosedRegion { .. }
            | Error::Divergence(_)
            | Error::PenaltyUndefined
            | Error::Experiment(_) => 3,
            _ => 2,
        }
    }
}
