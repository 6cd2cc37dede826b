//! Core of the video referring pipeline: feature storage, pooling, RoI alignment, tracking,
//! RoI selection, diversity statistics, prompt assembly, caption metrics and data curation.

pub mod caption_metrics;
pub mod curation;
pub mod diversity_analysis;
pub mod error;
pub mod feature_store;
pub mod geometry;
pub mod jsonl;
pub mod pipeline;
pub mod prompt_assembly;
pub mod roi_align;
pub mod roi_selection;
pub mod slicing;
pub mod synthetic;
pub mod tracking;

pub use error::{Error, Result};
