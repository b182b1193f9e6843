//! Experiment harness: corpus generation, training grids, iterated-learning
//! lineages, checkpoint evaluation and SVG reports.

pub mod commands;
pub mod config;
pub mod plot;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(wordorder::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<wordorder::Error> for CliError {
    fn from(e: wordorder::Error) -> Self {
        match e {
            wordorder::Error::InvalidConfig(m) => CliError::Config(m),
            wordorder::Error::UnsupportedLanguage(m) => CliError::Config(format!("language: requires {m}")),
            other => CliError::Core(other),
        }
    }
}
