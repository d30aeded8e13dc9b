//! Embedding of test cases (error message followed by code) and exact
//! cosine top-r retrieval over a knowledge base.

mod embed;
mod index;

pub use embed::{
    chunk, chunk_spans, embed_test, embedding_input, l2_normalize, Embedder, EmbeddingRecord,
    NgramHashEmbedder, CHUNK_OVERLAP_FRACTION,
};
pub use index::{
    cosine, load_index, read_sidecar, save_index, sidecar_from_json, sidecar_to_json,
    write_sidecar, EmbeddingIndex, NeighborSearch, SimilarityHit,
};
