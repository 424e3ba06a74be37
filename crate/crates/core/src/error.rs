use std::path::PathBuf;

use thiserror::Error;

/// Structural problems found while validating a joint tree.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology has no joints")]
    Empty,
    #[error("joint_names has {names} entries but parent has {parents}")]
    NameCount { names: usize, parents: usize },
    #[error("parent index {parent} of joint {joint} is out of range")]
    ParentOutOfRange { joint: usize, parent: usize },
    #[error("no root joint (no parent sentinel)")]
    NoRoot,
    #[error("multiple roots: joints {first} and {second} both have no parent")]
    MultipleRoots { first: usize, second: usize },
    #[error("cycle detected through joint {joint}")]
    Cycle { joint: usize },
    #[error("expected {expected} limbs, found {found}")]
    LimbCount { expected: usize, found: usize },
    #[error("duplicate child: joint {joint} appears as a limb child more than once")]
    DuplicateChild { joint: usize },
    #[error("limb {limb} ({parent}->{child}) disagrees with the parent array")]
    LimbParentMismatch { limb: usize, parent: usize, child: usize },
    #[error("root joint {joint} cannot be a limb child")]
    RootAsChild { joint: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    Topology(#[from] TopologyError),

    #[error("{what}: expected length {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("schema error in {path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("version mismatch in {path}: expected {expected}, found {found}")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("image codec error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by non-finite numbers during computation
    /// (as opposed to bad input files or arguments).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
