//! Pseudo-label generation for video scene graphs from captions, and a
//! Recall@K evaluator for scene-graph predictions.
//!
//! Stages, in pipeline order: [`tcs`] segments captions into temporally
//! ordered sentences, [`adv`] aligns each sentence with a frame interval,
//! [`sgparse`] extracts and grounds triplets, and [`plm`] adds negative
//! labels from motion over unaligned frames. [`pipeline`] runs them end to
//! end; [`eval`] scores predictions.

pub mod adv;
pub mod eval;
pub mod exec;
pub mod ingest;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod plm;
pub mod sgparse;
pub mod stats;
pub mod tcs;
