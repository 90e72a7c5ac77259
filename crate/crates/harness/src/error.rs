//! Harness errors and their process exit codes.

use std::path::PathBuf;

use mri_robust::attack::AttackError;
use mri_robust::phantom::DataError;
use mri_robust::recon::ReconError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {}; run `{stage}` first", artifact.display())]
    Dependency {
        artifact: PathBuf,
        stage: &'static str,
    },
    #[error("{} was produced from a different config; rerun `{stage}`", artifact.display())]
    Stale {
        artifact: PathBuf,
        stage: &'static str,
    },
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Recon(ReconError),
    #[error(transparent)]
    Attack(AttackError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::EmptyInput(_) => 2,
            Self::Dependency { .. } | Self::Stale { .. } => 3,
            Self::Divergence(_) => 4,
            Self::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Self::Stage { .. } => self,
            other => Self::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

fn recon_diverged(e: &ReconError) -> bool {
    matches!(e, ReconError::Diverged { .. })
}

fn attack_diverged(e: &AttackError) -> bool {
    match e {
        AttackError::Recon(r) => recon_diverged(r),
        AttackError::Target { source, .. } => attack_diverged(source),
        _ => false,
    }
}

impl From<ReconError> for HarnessError {
    fn from(e: ReconError) -> Self {
        match e {
            ReconError::Config(msg) => Self::Config(msg),
            e if recon_diverged(&e) => Self::Divergence(e.to_string()),
            e => Self::Recon(e),
        }
    }
}

impl From<AttackError> for HarnessError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Config(msg) => Self::Config(msg),
            e if attack_diverged(&e) => Self::Divergence(e.to_string()),
            e => Self::Attack(e),
        }
    }
}
