//! One localization request end to end: filter the corpus into a knowledge
//! base, retrieve neighbours, collect their fault patterns, annotate the
//! query, render the prompt, ask the model and parse its ranking.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotator::{annotate, retrieve_context, AnnotatedTest, AnnotatorConfig, FaultPatternSet, LabelSource};
use crate::corpus::{Corpus, TestCase};
use crate::error::{Error, Result};
use crate::filtering::{filter, FilterPolicy, KnowledgeBase};
use crate::llm::{invoke, LlmClient, LlmResponse};
use crate::prompting::{
    parse_ranking, render_prompt, PromptBundle, PromptContext, PromptSettings, PromptTemplate,
    RankedPrediction, RetrievedExample, Tokenizer,
};
use crate::simsearch::{NeighborSearch, SimilarityHit};

pub const PIPELINE_ID: &str = concat!("spark-pipeline/", env!("CARGO_PKG_VERSION"));

/// How the knowledge base is queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retrieval {
    None,
    Similarity,
    /// Uniform draw from the knowledge base, seeded per query.
    Random,
}

/// Pipeline variant: which stages run and which template is rendered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    #[default]
    Default,
    Random,
    AnnotationFree,
    Directive,
    /// No retrieval at all.
    Baseline,
    /// Whole retrieved cases pasted into the prompt, no annotation.
    NaiveRag,
}

impl RunMode {
    pub const ALL: [RunMode; 6] = [
        RunMode::Default,
        RunMode::Random,
        RunMode::AnnotationFree,
        RunMode::Directive,
        RunMode::Baseline,
        RunMode::NaiveRag,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Default => "default",
            RunMode::Random => "random",
            RunMode::AnnotationFree => "annotation-free",
            RunMode::Directive => "directive",
            RunMode::Baseline => "baseline",
            RunMode::NaiveRag => "naive-rag",
        }
    }

    pub fn retrieval(&self) -> Retrieval {
        match self {
            RunMode::Baseline => Retrieval::None,
            RunMode::Random => Retrieval::Random,
            _ => Retrieval::Similarity,
        }
    }

    pub fn annotates(&self) -> bool {
        matches!(self, RunMode::Default | RunMode::Random | RunMode::Directive)
    }

    pub fn template(&self) -> PromptTemplate {
        match self {
            RunMode::Default | RunMode::Random | RunMode::Baseline => PromptTemplate::Baseline,
            RunMode::AnnotationFree => PromptTemplate::AnnotationFree,
            RunMode::Directive => PromptTemplate::Directive,
            RunMode::NaiveRag => PromptTemplate::NaiveRag,
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Settings of a single query run.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryConfig {
    pub mode: RunMode,
    pub policy: FilterPolicy,
    pub annotator: AnnotatorConfig,
    pub r: usize,
    /// Number of elements requested from the model.
    pub k: usize,
    pub seed: u64,
    pub settings: PromptSettings,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            mode: RunMode::Default,
            policy: FilterPolicy::All,
            annotator: AnnotatorConfig::default(),
            r: 1,
            k: 5,
            seed: 0,
            settings: PromptSettings::default(),
        }
    }
}

/// Label access for one query. Every read is logged, and reading the
/// query's own labels is refused.
pub struct AuditedLabels<'a> {
    corpus: &'a Corpus,
    query_id: String,
    reads: Mutex<Vec<String>>,
}

impl<'a> AuditedLabels<'a> {
    pub fn new(corpus: &'a Corpus, query_id: impl Into<String>) -> Self {
        AuditedLabels {
            corpus,
            query_id: query_id.into(),
            reads: Mutex::new(Vec::new()),
        }
    }

    fn access(&self, id: &str) -> Result<&'a TestCase> {
        self.reads.lock().expect("audit lock").push(id.to_string());
        if id == self.query_id {
            return Err(Error::LabelLeak(id.to_string()));
        }
        self.corpus
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// A retrieved case in full, as shown by the naive RAG template.
    pub fn example(&self, id: &str) -> Result<RetrievedExample> {
        let tc = self.access(id)?;
        Ok(RetrievedExample {
            error_message: tc.error_message.clone(),
            lines: tc.lines.clone(),
            faulty_lines: tc.faulty_lines.iter().copied().collect(),
        })
    }

    /// Ids whose labels were read, in order.
    pub fn reads(&self) -> Vec<String> {
        self.reads.lock().expect("audit lock").clone()
    }
}

impl LabelSource for AuditedLabels<'_> {
    fn faulty_line_contents(&self, id: &str) -> Result<Vec<String>> {
        let tc = self.access(id)?;
        Ok(crate::annotator::faulty_contents(tc))
    }
}

/// Deterministic per-query generator: ChaCha8 keyed by
/// SHA-256(seed little-endian || query id).
pub fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Everything one run produced, including the audit trail.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub query_id: String,
    pub kb: KnowledgeBase,
    pub retrieved: Vec<SimilarityHit>,
    /// Retrieved cases that carried no labels.
    pub unlabeled_hits: Vec<String>,
    pub patterns: FaultPatternSet,
    pub annotated: AnnotatedTest,
    pub prompt: PromptBundle,
    pub response: LlmResponse,
    pub prediction: RankedPrediction,
    pub label_reads: Vec<String>,
}

impl QueryOutcome {
    /// True when the prompt was rendered without any retrieval context.
    pub fn no_context(&self) -> bool {
        self.patterns.is_empty()
    }
}

/// Borrowed collaborators of a run.
pub struct Pipeline<'a> {
    /// Labeled history to retrieve from; may contain the query itself.
    pub corpus: &'a Corpus,
    pub search: &'a dyn NeighborSearch,
    pub client: &'a dyn LlmClient,
    pub tokenizer: &'a dyn Tokenizer,
}

impl Pipeline<'_> {
    /// Runs one query. `query` must already be stripped of labels;
    /// `query_vector` is its embedding. Errors carry the stage name.
    pub fn run(&self, query: &TestCase, query_vector: &[f32], cfg: &QueryConfig) -> Result<QueryOutcome> {
        if query.is_labeled() {
            return Err(Error::LabelLeak(query.id.clone()).at_stage("input"));
        }
        let mode = cfg.mode;
        let kb = match mode.retrieval() {
            Retrieval::None => KnowledgeBase {
                query_id: query.id.clone(),
                members: Vec::new(),
            },
            _ => filter(query, self.corpus, cfg.policy),
        };
        let retrieved = self.retrieve(query, query_vector, &kb, cfg).map_err(|e| e.at_stage("retrieve"))?;

        let labels = AuditedLabels::new(self.corpus, query.id.clone());
        let (patterns, unlabeled_hits) =
            retrieve_context(&retrieved, &labels).map_err(|e| e.at_stage("context"))?;
        let examples = if mode == RunMode::NaiveRag {
            retrieved
                .iter()
                .map(|h| labels.example(&h.test_id))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.at_stage("context"))?
        } else {
            Vec::new()
        };

        let annotated = if mode.annotates() {
            annotate(query, &patterns, &cfg.annotator).map_err(|e| e.at_stage("annotate"))?
        } else {
            let mut plain = AnnotatedTest::plain(query.clone());
            plain.message = cfg.annotator.message.clone();
            plain
        };

        let ctx = PromptContext {
            patterns: Some(&patterns),
            examples: &examples,
        };
        let prompt = render_prompt(
            &annotated,
            &ctx,
            mode.template(),
            cfg.k,
            &cfg.settings,
            self.tokenizer,
        )
        .map_err(|e| e.at_stage("render"))?;
        let response = invoke(self.client, &prompt).map_err(|e| e.at_stage("invoke"))?;
        let prediction =
            parse_ranking(&response.text, prompt.k, prompt.max_element_id).map_err(|e| e.at_stage("parse"))?;

        Ok(QueryOutcome {
            query_id: query.id.clone(),
            kb,
            retrieved,
            unlabeled_hits,
            patterns,
            annotated,
            prompt,
            response,
            prediction,
            label_reads: labels.reads(),
        })
    }

    fn retrieve(
        &self,
        query: &TestCase,
        query_vector: &[f32],
        kb: &KnowledgeBase,
        cfg: &QueryConfig,
    ) -> Result<Vec<SimilarityHit>> {
        if kb.contains(&query.id) {
            return Err(Error::LabelLeak(query.id.clone()));
        }
        let hits = match cfg.mode.retrieval() {
            Retrieval::None => Vec::new(),
            Retrieval::Similarity => self.search.search(query_vector, kb, cfg.r, self.corpus)?,
            Retrieval::Random => {
                let mut rng = query_rng(cfg.seed, &query.id);
                let members: Vec<String> = kb
                    .members
                    .choose_multiple(&mut rng, cfg.r)
                    .cloned()
                    .collect();
                // scores are still reported, so score the drawn subset
                let drawn = KnowledgeBase {
                    query_id: kb.query_id.clone(),
                    members,
                };
                self.search.search(query_vector, &drawn, cfg.r, self.corpus)?
            }
        };
        if hits.iter().any(|h| h.test_id == query.id) {
            return Err(Error::LabelLeak(query.id.clone()));
        }
        Ok(hits)
    }
}
