//! Batch evaluation and data curation for LLM depression-screening responses.
//!
//! The pipeline decomposes a screening decision into eleven binary subtasks
//! (speaker self-reference, the nine PHQ-9 symptoms, and the final depression
//! call), scores free-text model diagnoses against expert annotations, and
//! curates SFT/DPO training data from the graded responses.
//!
//! Modules follow the pipeline stages:
//!
//! - [`corpus`] - annotated dataset ingestion, filtering, keyword grouping
//! - [`prompt`] - instruction and few-shot message assembly
//! - [`gateway`] - chat/embedding endpoint dispatch with caching and retries
//! - [`parse`] - label extraction and adherence judgment over raw responses
//! - [`metrics`] - linguistic-quality and reasoning metrics
//! - [`curation`] - correctness partitioning and SFT/DPO dataset emission
//! - [`report`] - table rendering and review exports
//! - [`stub`] - a deterministic local endpoint for offline runs and tests

pub mod corpus;
pub mod curation;
pub mod error;
pub mod gateway;
pub mod metrics;
pub mod parse;
pub mod prompt;
pub mod report;
pub mod stub;
pub mod subtask;
pub mod util;

pub use error::{Error, Result};
pub use subtask::{ExtractionScheme, LabelValue, Subtask, SubtaskLabelSet};
