//! Leave-one-out evaluation, report assembly and parameter sweeps.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotator::{AnnotatorConfig, Normalizer, DEFAULT_EPSILON};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::filtering::FilterPolicy;
use crate::llm::LlmClient;
use crate::metrics::Scores;
use crate::pipeline::{Pipeline, QueryConfig, QueryOutcome, RunMode, PIPELINE_ID};
use crate::prompting::{ParseWarning, PromptSettings, Tokenizer};
use crate::simsearch::{EmbeddingIndex, SimilarityHit};
use crate::unitmap::{lift_ground_truth, lift_ranking, Granularity};

pub const DEFAULT_KS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: RunMode,
    pub policy: FilterPolicy,
    pub epsilon: f64,
    pub normalizer: Normalizer,
    pub trim: bool,
    pub r: usize,
    pub ks: Vec<usize>,
    pub granularities: Vec<Granularity>,
    pub seed: u64,
    /// Worker threads; defaults to the client's parallelism.
    pub parallelism: Option<usize>,
    pub settings: PromptSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: RunMode::Default,
            policy: FilterPolicy::All,
            epsilon: DEFAULT_EPSILON,
            normalizer: Normalizer::Max,
            trim: false,
            r: 1,
            ks: DEFAULT_KS.to_vec(),
            granularities: Granularity::ALL.to_vec(),
            seed: 0,
            parallelism: None,
            settings: PromptSettings::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("k values must be non-empty and ≥ 1".into()));
        }
        if self.r == 0 {
            return Err(Error::Config("r must be ≥ 1".into()));
        }
        if self.granularities.is_empty() {
            return Err(Error::Config("at least one granularity is required".into()));
        }
        if self.parallelism == Some(0) {
            return Err(Error::Config("parallelism must be ≥ 1".into()));
        }
        self.policy.validate()?;
        self.annotator().validate()
    }

    pub fn annotator(&self) -> AnnotatorConfig {
        AnnotatorConfig {
            epsilon: self.epsilon,
            normalizer: self.normalizer,
            trim: self.trim,
            ..AnnotatorConfig::default()
        }
    }

    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }

    /// Per-query settings; the model is asked for `min(max k, n)` elements.
    fn query_config(&self, line_count: usize) -> QueryConfig {
        QueryConfig {
            mode: self.mode,
            policy: self.policy,
            annotator: self.annotator(),
            r: self.r,
            k: self.max_k().min(line_count),
            seed: self.seed,
            settings: self.settings.clone(),
        }
    }
}

/// Scores of one query at every `(k, granularity)`.
pub type ScoreTable = BTreeMap<usize, BTreeMap<Granularity, Scores>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub kb_size: usize,
    pub retrieved: Vec<SimilarityHit>,
    pub pattern_count: usize,
    pub annotated_lines: Vec<usize>,
    pub annotated_count: usize,
    /// Number of elements requested in the prompt.
    pub prompt_k: usize,
    pub prediction: Vec<usize>,
    pub unit_predictions: BTreeMap<Granularity, Vec<usize>>,
    pub warnings: Vec<String>,
    /// Fewer elements returned than requested.
    pub short_prediction: bool,
    /// The held-out labels were empty, so recall is reported as 0.
    pub empty_truth: bool,
    pub scores: ScoreTable,
    pub prompt_chars: usize,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency_ms: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pipeline: String,
    pub embedder: String,
    pub client: String,
    pub tokenizer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub avg_in: f64,
    pub avg_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub avg_ms: f64,
    pub sum_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTally {
    /// Queries whose answer could not be parsed; scored as misses.
    pub unparseable: usize,
    /// Queries that failed before an answer was parsed.
    pub failed: usize,
    pub short_predictions: usize,
    pub empty_truth: usize,
}

impl ErrorTally {
    /// Failures other than unusable answers.
    pub fn hard_failures(&self) -> usize {
        self.failed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub provenance: Provenance,
    pub per_query: Vec<QueryResult>,
    pub aggregates: ScoreTable,
    pub tokens: TokenStats,
    pub time: TimeStats,
    pub errors: ErrorTally,
    /// Mapper used for each unit granularity.
    pub mapper: BTreeMap<Granularity, String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `k,granularity,precision,recall,hit,map,mrr` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(["k", "granularity", "precision", "recall", "hit", "map", "mrr"])
            .map_err(csv_err)?;
        for row in aggregate_rows(&self.aggregates) {
            w.write_record(&row).map_err(csv_err)?;
        }
        csv_string(w)
    }

    pub fn mean_annotated(&self) -> f64 {
        let n = self.per_query.len().max(1) as f64;
        self.per_query.iter().map(|q| q.annotated_count as f64).sum::<f64>() / n
    }
}

fn aggregate_rows(aggregates: &ScoreTable) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (k, by_gran) in aggregates {
        for (g, s) in by_gran {
            rows.push(vec![
                k.to_string(),
                g.name().to_string(),
                s.precision.to_string(),
                s.recall.to_string(),
                s.hit.to_string(),
                s.map.to_string(),
                s.mrr.to_string(),
            ]);
        }
    }
    rows
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn warning_text(w: &ParseWarning) -> String {
    match w {
        ParseWarning::OutOfRange { id } => format!("out-of-range id {id} dropped"),
        ParseWarning::Duplicate { id } => format!("duplicate id {id} dropped"),
        ParseWarning::Truncated { dropped } => format!("{dropped} surplus id(s) truncated"),
    }
}

fn zero_table(cfg: &EvalConfig) -> ScoreTable {
    cfg.ks
        .iter()
        .map(|&k| {
            (
                k,
                cfg.granularities
                    .iter()
                    .map(|&g| (g, Scores::default()))
                    .collect(),
            )
        })
        .collect()
}

/// Scores a finished outcome against the held-out labels.
fn score(
    cfg: &EvalConfig,
    truth_case: &crate::corpus::TestCase,
    outcome: QueryOutcome,
) -> QueryResult {
    let truth = &truth_case.faulty_lines;
    let prediction = outcome.prediction.element_ids.clone();
    let mut warnings: Vec<String> = outcome.prediction.warnings.iter().map(warning_text).collect();
    if cfg.max_k() > outcome.prompt.k {
        warnings.push(format!(
            "requested k={} exceeds the {} lines; asked for {}",
            cfg.max_k(),
            truth_case.len(),
            outcome.prompt.k
        ));
    }
    let mut unit_predictions = BTreeMap::new();
    let mut scores = zero_table(cfg);
    for &g in &cfg.granularities {
        let um = g.mapper().map(truth_case);
        let pred_units = lift_ranking(&prediction, &um);
        let truth_units: BTreeSet<usize> = lift_ground_truth(truth, &um);
        for &k in &cfg.ks {
            scores
                .get_mut(&k)
                .expect("k row")
                .insert(g, Scores::compute(&pred_units, &truth_units, k));
        }
        if g != Granularity::Line {
            unit_predictions.insert(g, pred_units);
        }
    }
    QueryResult {
        query_id: outcome.query_id,
        kb_size: outcome.kb.len(),
        retrieved: outcome.retrieved,
        pattern_count: outcome.patterns.len(),
        annotated_count: outcome.annotated.annotated.len(),
        annotated_lines: outcome.annotated.annotated.iter().copied().collect(),
        prompt_k: outcome.prompt.k,
        short_prediction: prediction.len() < outcome.prompt.k,
        prediction,
        unit_predictions,
        warnings,
        empty_truth: truth.is_empty(),
        scores,
        prompt_chars: outcome.prompt.char_count,
        prompt_tokens: outcome.response.prompt_tokens,
        completion_tokens: outcome.response.completion_tokens,
        latency_ms: outcome.response.latency_ms,
        error: None,
    }
}

fn failed(cfg: &EvalConfig, tc: &crate::corpus::TestCase, err: &Error) -> QueryResult {
    QueryResult {
        query_id: tc.id.clone(),
        kb_size: 0,
        retrieved: Vec::new(),
        pattern_count: 0,
        annotated_lines: Vec::new(),
        annotated_count: 0,
        prompt_k: cfg.max_k().min(tc.len()),
        prediction: Vec::new(),
        unit_predictions: BTreeMap::new(),
        warnings: Vec::new(),
        short_prediction: false,
        empty_truth: tc.faulty_lines.is_empty(),
        scores: zero_table(cfg),
        prompt_chars: 0,
        prompt_tokens: 0,
        completion_tokens: 0,
        latency_ms: 0,
        error: Some(err.to_string()),
    }
}

/// Means over all queries; failed queries count as zeros.
pub fn aggregate(cfg: &EvalConfig, results: &[QueryResult]) -> Result<ScoreTable> {
    if results.is_empty() {
        return Err(Error::EmptyRun);
    }
    let mut out = ScoreTable::new();
    for &k in &cfg.ks {
        let row = out.entry(k).or_default();
        for &g in &cfg.granularities {
            let all: Vec<Scores> = results.iter().map(|q| q.scores[&k][&g]).collect();
            row.insert(g, Scores::mean(&all)?);
        }
    }
    Ok(out)
}

/// Collaborators shared by every query of a run.
pub struct Evaluator<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a EmbeddingIndex,
    pub client: &'a dyn LlmClient,
    pub tokenizer: &'a dyn Tokenizer,
}

impl Evaluator<'_> {
    /// Runs every corpus case as a query against the rest of the corpus,
    /// with its own labels withheld. Per-query failures are logged in the
    /// report and do not stop the run.
    pub fn leave_one_out(&self, cfg: &EvalConfig) -> Result<MetricsReport> {
        self.leave_one_out_with(cfg, |_| ())
    }

    /// Like [`Evaluator::leave_one_out`], also handing every successful
    /// outcome to `observe` (which may be called from several threads).
    pub fn leave_one_out_with<F>(&self, cfg: &EvalConfig, observe: F) -> Result<MetricsReport>
    where
        F: Fn(&QueryOutcome) + Sync,
    {
        cfg.validate()?;
        if self.corpus.is_empty() {
            return Err(Error::EmptyRun);
        }
        self.index.covers(self.corpus)?;
        let pipeline = Pipeline {
            corpus: self.corpus,
            search: self.index,
            client: self.client,
            tokenizer: self.tokenizer,
        };
        let threads = cfg.parallelism.unwrap_or_else(|| self.client.parallelism()).max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut per_query: Vec<(QueryResult, bool)> = pool.install(|| {
            self.corpus
                .cases()
                .par_iter()
                .map(|tc| {
                    let query = tc.without_labels();
                    let vector = &self.index.get(&tc.id).expect("index covers corpus").vector;
                    match pipeline.run(&query, vector, &cfg.query_config(tc.len())) {
                        Ok(outcome) => {
                            observe(&outcome);
                            (score(cfg, tc, outcome), false)
                        }
                        Err(e) => {
                            let unparseable = matches!(e.root(), Error::Unparseable);
                            (failed(cfg, tc, &e), unparseable)
                        }
                    }
                })
                .collect()
        });
        per_query.sort_by(|a, b| a.0.query_id.cmp(&b.0.query_id));

        let mut errors = ErrorTally::default();
        for (q, unparseable) in &per_query {
            if q.error.is_some() {
                if *unparseable {
                    errors.unparseable += 1;
                } else {
                    errors.failed += 1;
                }
            }
            errors.short_predictions += usize::from(q.short_prediction);
            errors.empty_truth += usize::from(q.empty_truth);
        }
        let per_query: Vec<QueryResult> = per_query.into_iter().map(|(q, _)| q).collect();
        let n = per_query.len() as f64;
        let answered: Vec<&QueryResult> = per_query.iter().filter(|q| q.error.is_none()).collect();
        let denom = answered.len().max(1) as f64;
        let tokens = TokenStats {
            avg_in: answered.iter().map(|q| q.prompt_tokens as f64).sum::<f64>() / denom,
            avg_out: answered.iter().map(|q| q.completion_tokens as f64).sum::<f64>() / denom,
        };
        let sum_ms: u64 = per_query.iter().map(|q| q.latency_ms).sum();
        let time = TimeStats {
            avg_ms: sum_ms as f64 / n,
            sum_ms,
        };
        Ok(MetricsReport {
            aggregates: aggregate(cfg, &per_query)?,
            config: cfg.clone(),
            provenance: Provenance {
                pipeline: PIPELINE_ID.to_string(),
                embedder: self.index.embedder.clone(),
                client: self.client.identity(),
                tokenizer: self.tokenizer.name().to_string(),
            },
            per_query,
            tokens,
            time,
            errors,
            mapper: cfg
                .granularities
                .iter()
                .map(|g| (*g, g.mapper().name().to_string()))
                .collect(),
        })
    }

    /// One leave-one-out run per axis value, reusing the same index.
    pub fn sweep(&self, base: &EvalConfig, axis: &SweepAxis) -> Result<SweepReport> {
        let configs = axis.configs(base)?;
        let mut rows = Vec::with_capacity(configs.len());
        for (value, cfg) in configs {
            let report = self.leave_one_out(&cfg)?;
            let annotation = AnnotationStats::of(&report.per_query);
            rows.push(SweepRow {
                value,
                annotation,
                report,
            });
        }
        Ok(SweepReport {
            axis: axis.name().to_string(),
            rows,
        })
    }
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "lowercase")]
pub enum SweepAxis {
    Epsilon(Vec<f64>),
    Policy(Vec<FilterPolicy>),
    Mode(Vec<RunMode>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Epsilon(_) => "epsilon",
            SweepAxis::Policy(_) => "policy",
            SweepAxis::Mode(_) => "mode",
        }
    }

    fn configs(&self, base: &EvalConfig) -> Result<Vec<(String, EvalConfig)>> {
        let out: Vec<(String, EvalConfig)> = match self {
            SweepAxis::Epsilon(values) => values
                .iter()
                .map(|&epsilon| (epsilon.to_string(), EvalConfig { epsilon, ..base.clone() }))
                .collect(),
            SweepAxis::Policy(values) => values
                .iter()
                .map(|&policy| (policy.to_string(), EvalConfig { policy, ..base.clone() }))
                .collect(),
            SweepAxis::Mode(values) => values
                .iter()
                .map(|&mode| (mode.to_string(), EvalConfig { mode, ..base.clone() }))
                .collect(),
        };
        if out.is_empty() {
            return Err(Error::Config(format!("sweep axis `{}` has no values", self.name())));
        }
        Ok(out)
    }
}

/// Distribution of annotated-line counts over the queries of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub min: usize,
    pub median: f64,
    pub mean: f64,
    pub max: usize,
}

impl AnnotationStats {
    pub fn of(results: &[QueryResult]) -> Self {
        let mut counts: Vec<usize> = results.iter().map(|q| q.annotated_count).collect();
        counts.sort_unstable();
        if counts.is_empty() {
            return AnnotationStats { min: 0, median: 0.0, mean: 0.0, max: 0 };
        }
        let n = counts.len();
        let median = if n % 2 == 1 {
            counts[n / 2] as f64
        } else {
            (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
        };
        AnnotationStats {
            min: counts[0],
            median,
            mean: counts.iter().sum::<usize>() as f64 / n as f64,
            max: counts[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub annotation: AnnotationStats,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aggregate rows prefixed by the axis value.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record([
            self.axis.as_str(),
            "k",
            "granularity",
            "precision",
            "recall",
            "hit",
            "map",
            "mrr",
        ])
        .map_err(csv_err)?;
        for row in &self.rows {
            for mut fields in aggregate_rows(&row.report.aggregates) {
                fields.insert(0, row.value.clone());
                w.write_record(&fields).map_err(csv_err)?;
            }
        }
        csv_string(w)
    }

    /// `value,min,median,mean,max` table of annotated-line counts.
    pub fn annotation_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record([self.axis.as_str(), "min", "median", "mean", "max"])
            .map_err(csv_err)?;
        for row in &self.rows {
            let a = row.annotation;
            w.write_record([
                row.value.clone(),
                a.min.to_string(),
                a.median.to_string(),
                a.mean.to_string(),
                a.max.to_string(),
            ])
            .map_err(csv_err)?;
        }
        csv_string(w)
    }
}
