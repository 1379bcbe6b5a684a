//! The labeling loop as commands: synthesize or ingest clicks, build crop
//! datasets, train per-class classifiers, propose instance masks, review
//! them over HTTP, and turn the review log into new clicks.

pub mod commands;
pub mod config;
pub mod error;

pub use config::CampaignConfig;
pub use error::{exit_code, UserError};
