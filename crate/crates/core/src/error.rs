use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::bplp::BplpError;
use crate::eval::EvalError;
use crate::fusion::FusionError;
use crate::geometry::GeometryError;
use crate::motion::{FlowError, FrameError};
use crate::similarity::SimilarityError;
use crate::synth::SceneError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("missing flow {from}->{to}")]
    MissingFlow { from: usize, to: usize },
    #[error("unknown classes: {}", .0.join(", "))]
    UnknownClasses(Vec<String>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Propagation(#[from] BplpError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for filesystem failures, false for bad input or configuration.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Flow(FlowError::Io { .. })
                | Error::Frame(FrameError::Io { .. })
                | Error::Similarity(SimilarityError::Io { .. })
                | Error::Fusion(FusionError::Similarity(SimilarityError::Io { .. }))
        )
    }

    /// Process exit code: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_io() {
            2
        } else {
            1
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
