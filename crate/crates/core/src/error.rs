use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("decomposition cycle through edge {parent} -> {child}")]
    Cycle { parent: String, child: String },

    #[error("dependency edge {u} -> {v} joins level {u_level} to level {v_level}")]
    CrossLevelDependency { u: String, v: String, u_level: u8, v_level: u8 },

    #[error("node {child} has more than one parent ({first} and {second})")]
    MultiParent { child: String, first: String, second: String },

    #[error("label schema: {0}")]
    LabelSchema(String),

    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("unknown label values {0:?}")]
    UnknownLabel(Vec<u32>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0} has no children")]
    EmptyChildren(String),

    #[error("{0} has no dependency siblings")]
    EmptySiblings(String),

    #[error("mask has no set pixels")]
    EmptyMask,

    #[error("edge {0} has no incoming embedding")]
    MissingEdge(String),

    #[error("edge {0} has more than one incoming embedding")]
    DuplicateEdge(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("dataset schema version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt manifest at {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
