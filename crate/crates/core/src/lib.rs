//! Sample-wise forgetting and backward transfer between two evaluation
//! snapshots of a model, with chance correction under a know/guess
//! response model.

pub mod extraction;
pub mod ingest;
pub mod knowsim;
pub mod merge;
pub mod pipeline;
pub mod report;
pub mod taxonomy;
pub mod transition;
pub mod uncertainty;
