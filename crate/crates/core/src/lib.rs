//! Core data model and algorithms for distilling region-grounded
//! question/answer/rationale data from images.

pub mod augment;
pub mod backend;
pub mod critic;
pub mod curation;
pub mod dedup;
pub mod embedding;
pub mod filter;
pub mod fixtures;
pub mod generate;
pub mod mentions;
pub mod model;
pub mod stats;
pub mod store;
pub mod util;
pub mod verbalize;
