//! Retrieval-augmented fault localization for test code.
//!
//! A failing test is compared with previously diagnosed failures; lines
//! resembling their faulty lines are annotated before the test is handed to
//! a language model for ranking. The crate covers the whole flow, from
//! corpus preparation through leave-one-out evaluation.

pub mod annotator;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod fsutil;
pub mod http;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod simsearch;
pub mod synth;
pub mod unitmap;

pub use annotator::{
    annotate, AnnotatedTest, AnnotatorConfig, FaultPatternSet, LabelSource, Normalizer,
    ANNOTATION_MESSAGE, DEFAULT_EPSILON,
};
pub use corpus::{Corpus, FaultLabel, RawTestCase, TestCase, Timestamp};
pub use error::{Error, Result};
pub use evaluation::{EvalConfig, Evaluator, MetricsReport, QueryResult, SweepAxis, SweepReport};
pub use filtering::{FilterPolicy, KnowledgeBase};
pub use llm::{LlmClient, LlmResponse};
pub use metrics::Scores;
pub use pipeline::{Pipeline, QueryConfig, QueryOutcome, RunMode, PIPELINE_ID};
pub use prompting::{
    HeuristicTokenizer, PromptBundle, PromptSettings, PromptTemplate, RankedPrediction, Tokenizer,
};
pub use simsearch::{Embedder, EmbeddingIndex, NeighborSearch, NgramHashEmbedder, SimilarityHit};
pub use unitmap::{Granularity, UnitMap, UnitMapper};
