//! Chapter-aligned behavioural engagement from VLE event logs.
//!
//! The pipeline runs `ingest` → `sessionizer` → `chapter_metric` (plus the
//! retrospective `coursewide_metric` baseline) → `evaluation`. `cohort_sim`
//! produces seeded synthetic cohorts and `report` wires the stages to files.

pub mod chapter_metric;
pub mod cohort_sim;
pub mod coursewide_metric;
mod error;
pub mod evaluation;
pub mod ingest;
pub mod report;
pub mod sessionizer;

pub use error::{Error, Result};
