use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::layers::LayerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Exit code for usage, resolution and parse failures.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for conflict and validation failures.
pub const EXIT_CONFLICT: i32 = 3;
/// Exit code for I/O and transport failures.
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer id {item:?}: {reason}")]
    InvalidLayerId { item: String, reason: &'static str },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no configuration search roots given")]
    NoSearchRoots,

    #[error("no layers selected")]
    NoLayersSelected,

    #[error("unknown layer {id}{}", required_by.as_ref().map(|r| format!(" (required by {r})")).unwrap_or_default())]
    UnknownLayer {
        id: LayerId,
        required_by: Option<LayerId>,
    },

    #[error("dependency cycle: {}", cycle.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" -> "))]
    Cycle { cycle: Vec<LayerId> },

    #[error("invalid workspace name {0:?}")]
    InvalidWorkspace(String),

    #[error("overlay conflict at {}: {first_kind} from {first} vs {second_kind} from {second}", path.display())]
    OverlayConflict {
        path: PathBuf,
        first: String,
        first_kind: &'static str,
        second: String,
        second_kind: &'static str,
    },

    #[error("overlay apply failed at {} after {completed} entries: {source}", path.display())]
    OverlayApply {
        path: PathBuf,
        completed: usize,
        #[source]
        source: io::Error,
    },

    #[error("yaml: {0}")]
    Yaml(#[from] serde_yaml::Error),

    #[error("invalid core configuration:\n  {}", .0.join("\n  "))]
    CoreValidation(Vec<String>),

    #[error("no session route for user {0:?}")]
    Routing(String),

    #[error("cannot acquire image {image}: {reason}")]
    Acquisition { image: String, reason: String },

    #[error("container runtime: {0}")]
    Runtime(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("digest mismatch for {name}: expected {expected}, got {actual}")]
    DigestMismatch {
        name: String,
        expected: String,
        actual: String,
    },

    #[error("transport: {0}")]
    Transport(String),

    #[error("target is locked by another session")]
    TargetBusy,

    #[error("target has no active manifest")]
    NoActiveManifest,

    #[error("target has no previous manifest to roll back to")]
    NoPreviousManifest,

    #[error("layout: {0}")]
    Layout(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("command failed: {0}")]
    Exec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Maps the error onto the shared CLI exit-code table.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidLayerId { .. }
            | Error::Parse { .. }
            | Error::NoSearchRoots
            | Error::NoLayersSelected
            | Error::UnknownLayer { .. }
            | Error::Cycle { .. }
            | Error::InvalidWorkspace(_)
            | Error::Yaml(_)
            | Error::Routing(_)
            | Error::Usage(_) => EXIT_USAGE,
            Error::OverlayConflict { .. }
            | Error::CoreValidation(_)
            | Error::Acquisition { .. }
            | Error::Manifest(_)
            | Error::NoActiveManifest
            | Error::NoPreviousManifest
            | Error::Layout(_) => EXIT_CONFLICT,
            Error::OverlayApply { .. }
            | Error::Runtime(_)
            | Error::DigestMismatch { .. }
            | Error::Transport(_)
            | Error::TargetBusy
            | Error::Io { .. }
            | Error::Exec(_) => EXIT_IO,
        }
    }
}
