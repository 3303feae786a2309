//! Embedding extraction, feature concatenation and verification /
//! identification metrics.

mod embeddings;
mod extract;
mod metrics;
mod report;

pub use embeddings::{concat_features, EmbeddingSet, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use extract::{extract_embeddings, Extraction};
pub use metrics::{cosine, identification_top1, tar_at_far, tar_at_far_brute_force, verification_scores, weighted_mfr, FarPoint};
pub use report::{evaluate_pairs, MetricReport};
