//! Retrieval evaluation under the single-query, cross-camera protocol:
//! embeddings, distance matrix, CMC and mAP.

mod metrics;
mod report;

pub use metrics::{cmc_map, distance_matrix, l2_normalize, Cmc, Meta};
pub use report::{evaluate, extract_embeddings, EvalReport, RANKS};

#[cfg(test)]
mod tests;
