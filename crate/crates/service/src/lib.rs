//! Review backend: images, proposals and an append-only log of annotator
//! decisions, with the state of every proposal folded from that log.

pub mod api;
pub mod derive;
pub mod event;
pub mod export;
pub mod log;
pub mod state;

use thiserror::Error;

pub use api::{router, Preview, Service};
pub use derive::{derive_weak_labels, label_point, DerivedLabels};
pub use event::{Action, InteractionEvent};
pub use export::{export_annotations, import_native, ExportFormat, NativeExport};
pub use log::{read_log, EventLog};
pub use state::{Outcome, ProposalState, ReviewStore, Status};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Conflict(String),
    #[error("event log: {0}")]
    Storage(String),
    #[error("{0}")]
    Unavailable(String),
}

impl ServiceError {
    /// Short machine-readable code used in HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Self::NotFound(_) => "not_found",
            Self::Invalid(_) => "invalid",
            Self::Conflict(_) => "conflict",
            Self::Storage(_) => "storage",
            Self::Unavailable(_) => "unavailable",
        }
    }
}
