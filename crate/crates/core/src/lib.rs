//! Multi-vector retrieval with dynamic lexical routing.
//!
//! Token vectors are routed by a lexical router to a few weighted keys; a
//! query token only interacts with document tokens routed to the same key.
//! The crate covers routing, the four token-routing similarity functions,
//! inverted-index construction and pruning, product quantization, the
//! staged query pipeline, training-loss mathematics with analytic gradients,
//! and evaluation utilities.

mod binio;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod index;
pub mod quantizer;
pub mod retrieval;
pub mod router;
pub mod scoring;
pub mod synthetic;
pub mod training;

pub use binio::atomic_write;
pub use embeddings::{read_embeddings, write_embeddings, EmbeddingFormat};
pub use error::{Error, Result};
pub use index::{build_index, index_stats, load_index, prune_index, save_index, IndexConfig, IndexStats, InvertedIndex};
pub use quantizer::{pq_decode, pq_encode, train_pq, PqCodebook, PqTrainConfig};
pub use retrieval::{
    count_dot_products, measure_latency, search, verify_against_brute_force, LatencyReport, OracleReport, SearchResult,
    Searcher,
};
pub use router::{
    pool_router_representations, router_representation, select_top_keys, Route, RoutedToken, RouterParams,
    RouterRepresentation,
};
pub use scoring::{
    brute_force_rank, score_all_to_all, score_dynamic, score_single_vector, score_static_lexical, EncodedDocument,
    EncodedQuery, EncodedSequence, Scheme, TokenEmbedding,
};
pub use synthetic::{generate_synthetic, lexical_router, SyntheticConfig, SyntheticData};
pub use training::{toy_train, total_loss, LossWeights, ToyTrainConfig};
