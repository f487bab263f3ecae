use thiserror::Error;

/// Everything that can go wrong between reading prices and writing fits.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("frame {frame}: zero variance for ticker {ticker}")]
    ZeroVariance { frame: usize, ticker: String },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("kernel error: {0}")]
    Kernel(String),

    #[error("trajectory left the domain at t = {t}: {msg}")]
    Domain { t: f64, msg: String },

    #[error("config error in `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn fit(msg: impl Into<String>) -> Self {
        Error::Fit(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code: 2 config, 3 data, 4 fit, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Dimension(_)
            | Error::ZeroVariance { .. }
            | Error::Kernel(_) => 3,
            Error::Fit(_) | Error::Domain { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
