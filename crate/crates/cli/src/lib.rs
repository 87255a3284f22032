//! Experiment harness: corpus synthesis, metric tables, detector training,
//! hybrid evaluation and report generation.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod experiment;
pub mod ledger;
pub mod metrics;

pub use config::ExperimentConfig;
pub use ledger::{PredictionRecord, RunLedger, RunRecord};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("run {run} (seed {seed}): {source}")]
    Run {
        run: usize,
        seed: u64,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Run { source, .. } => source.exit_code(),
        }
    }

    pub fn in_run(self, run: usize, seed: u64) -> Self {
        CliError::Run {
            run,
            seed,
            source: Box::new(self),
        }
    }
}

impl From<hysteg::Error> for CliError {
    fn from(e: hysteg::Error) -> Self {
        use hysteg::Error as E;
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            E::InvalidConfig(_) | E::PayloadOutOfRange(_) | E::EmptyRange { .. } | E::InvalidDimension(_) | E::EvenWindow(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}
