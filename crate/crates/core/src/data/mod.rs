//! Canonical records, schema registry, ingestion, filtering, windowing and
//! the synthetic generator.

mod filter;
mod load;
mod records;
mod registry;
mod sidecar;
pub mod synthetic;
mod windows;

use thiserror::Error;

pub use filter::{k_core, k_core_edges, FIVE_CORE};
pub use load::{write_records, AttrValue, Dataset, Event, Item, LoadOptions, LoadReport, UserHistory};
pub use records::{InteractionRecord, ItemRecord, Location, Record, Review};
pub use registry::{AttributeSpec, Level, ParseRule, SchemaRegistry, INTERACTION_FIELDS};
pub use sidecar::{review_entity_id, Sidecar, SidecarRecord, REVIEW_IMAGE_ATTRIBUTE};
pub use windows::{make_windows, Sample, Split, UserSplit, MAX_HISTORY};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: unknown attribute `{name}`")]
    UnknownAttribute { line: usize, name: String },
    #[error("line {line}: attribute `{name}`: {msg}")]
    BadValue { line: usize, name: String, msg: String },
    #[error("line {line}: interaction references unknown item `{item}`")]
    DanglingItem { line: usize, item: String },
    #[error("line {line}: duplicate item `{item}`")]
    DuplicateItem { line: usize, item: String },
    #[error("item `{0}` has no usable attributes")]
    EmptyItem(String),
    #[error("schema registry: {0}")]
    Registry(String),
    #[error("sidecar line {line}: {msg}")]
    Sidecar { line: usize, msg: String },
    #[error("dataset is empty after {0}")]
    Empty(&'static str),
    #[error("synthetic spec: {0}")]
    Spec(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}
