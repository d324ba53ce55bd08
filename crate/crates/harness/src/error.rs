use std::path::PathBuf;

/// Harness failures. [`HarnessError::exit_code`] maps them onto the CLI exit
/// status: 2 for bad input (config, missing or malformed traces), 3 for a
/// numeric failure during a run, 1 for anything else.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot read {}: {source}", path.display())]
    Input {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad trace {}: {msg}", path.display())]
    Trace { path: PathBuf, msg: String },
    #[error("numeric failure in {} run(s); first: {run_id}: {source}", failed)]
    Numeric {
        run_id: String,
        failed: usize,
        #[source]
        source: errdiag::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Input { .. } | HarnessError::Trace { .. } => 2,
            HarnessError::Numeric { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Output { path, source }
    }
}

impl From<errdiag::Error> for HarnessError {
    fn from(e: errdiag::Error) -> Self {
        HarnessError::Config(e.to_string())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
