//! Implementations of the subcommands.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use spark_core::corpus::{content_key, dedup_by, flag_outliers, ingest as ingest_raw, label_against};
use spark_core::evaluation::{Evaluator, SweepAxis};
use spark_core::fsutil::atomic_write;
use spark_core::http::{HttpChatClient, HttpEmbedder};
use spark_core::llm::{EchoAnnotatedClient, OracleClient, RecordingClient, ReplayClient};
use spark_core::simsearch::{embed_test, load_index, save_index};
use spark_core::{
    Corpus, Embedder, EmbeddingIndex, FilterPolicy, HeuristicTokenizer, LlmClient, MetricsReport,
    NgramHashEmbedder, Pipeline, QueryConfig, RawTestCase, RunMode, Tokenizer, PIPELINE_ID,
};

use crate::config::FileConfig;
use crate::CliError;

/// Records from a directory of `*.json` files (one record each, sorted by
/// file name) or from a JSONL file. Unreadable records are returned as
/// messages instead of aborting.
fn read_records<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Vec<String>), CliError> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::Usage(format!("cannot list {}: {e}", path.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        files.sort();
        for file in files {
            match fs::read_to_string(&file)
                .map_err(|e| e.to_string())
                .and_then(|text| serde_json::from_str(&text).map_err(|e| e.to_string()))
            {
                Ok(record) => records.push(record),
                Err(e) => errors.push(format!("{}: {e}", file.display())),
            }
        }
    } else if path.is_file() {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(record) => records.push(record),
                Err(e) => errors.push(format!("{}:{}: {e}", path.display(), i + 1)),
            }
        }
    } else {
        return Err(CliError::Usage(format!("{} does not exist", path.display())));
    }
    Ok((records, errors))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => atomic_write(p, text.as_bytes()).map_err(CliError::from),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| CliError::Failed(format!("stdout: {e}")))
        }
    }
}

pub fn ingest(input: &Path, output: &Path) -> Result<(), CliError> {
    let (raws, mut errors) = read_records::<RawTestCase>(input)?;
    if raws.is_empty() && errors.is_empty() {
        return Err(CliError::Failed(format!("no test cases found in {}", input.display())));
    }
    let total = raws.len() + errors.len();
    let mut cases = Vec::new();
    let mut seen = HashSet::new();
    let mut blank_removed = 0;
    for raw in &raws {
        if !seen.insert(raw.id.clone()) {
            errors.push(format!("{}: duplicate id", raw.id));
            continue;
        }
        match ingest_raw(raw) {
            Ok((tc, _)) => {
                blank_removed += raw.raw_lines.len() - tc.len();
                cases.push(tc);
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    let (kept, removed) = dedup_by(cases, content_key);
    let labeled = kept.iter().filter(|tc| tc.is_labeled()).count();
    let corpus = Corpus::new(kept)?;
    if corpus.is_empty() {
        for e in &errors {
            eprintln!("  {e}");
        }
        return Err(CliError::Failed("no valid test cases".into()));
    }
    corpus.save(output)?;
    println!(
        "total {total}, kept {}, duplicates removed {}, blank lines removed {blank_removed}, labeled {labeled}",
        corpus.len(),
        removed.len()
    );
    for id in &removed {
        println!("  duplicate content dropped: {id}");
    }
    if errors.is_empty() {
        Ok(())
    } else {
        for e in &errors {
            eprintln!("  {e}");
        }
        Err(CliError::Partial(format!("{} input(s) could not be ingested", errors.len())))
    }
}

#[derive(Deserialize)]
struct RepairedVersion {
    id: String,
    #[serde(alias = "repaired_lines")]
    lines: Vec<String>,
}

pub fn label(
    corpus_path: &Path,
    repaired: &Path,
    output: &Path,
    drop_outliers: bool,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let corpus = Corpus::load(corpus_path)?;
    let (versions, errors) = read_records::<RepairedVersion>(repaired)?;
    if !errors.is_empty() {
        for e in &errors {
            eprintln!("  {e}");
        }
        return Err(CliError::Failed(format!("{} repaired version(s) unreadable", errors.len())));
    }
    let by_id: HashMap<String, Vec<String>> = versions.into_iter().map(|v| (v.id, v.lines)).collect();
    let missing: Vec<&str> = corpus
        .iter()
        .filter(|tc| !by_id.contains_key(&tc.id))
        .map(|tc| tc.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Failed(format!(
            "missing repaired version for: {}",
            missing.join(", ")
        )));
    }
    let mut cases = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for tc in corpus.iter() {
        let label = label_against(tc, &by_id[&tc.id]);
        if label.faulty_lines.is_empty() {
            eprintln!("  warning: {} has no changed lines", tc.id);
        }
        let mut labeled = tc.without_labels();
        labeled.apply_label(&label)?;
        cases.push(labeled);
        labels.push(label);
    }
    let outliers = flag_outliers(&labels);
    let mut labeled = Corpus::new(cases)?;
    if drop_outliers {
        labeled = labeled.without(&outliers);
    }
    labeled.save(output)?;
    if let Some(path) = report {
        let counts: BTreeMap<&str, usize> =
            labels.iter().map(|l| (l.test_id.as_str(), l.modified_count)).collect();
        let body = json!({"outliers": outliers, "modified_counts": counts, "dropped": drop_outliers});
        atomic_write(path, serde_json::to_string_pretty(&body).expect("json").as_bytes())?;
    }
    println!(
        "labeled {}, outliers flagged {}{}",
        labels.len(),
        outliers.len(),
        if drop_outliers { " (dropped)" } else { "" }
    );
    for id in &outliers {
        println!("  outlier: {id}");
    }
    Ok(())
}

fn build_embedder(cfg: &FileConfig) -> Result<Box<dyn Embedder>, CliError> {
    match cfg.embedder.as_deref().unwrap_or("ngram") {
        "ngram" => Ok(Box::new(NgramHashEmbedder::new(cfg.dim())?.with_chunk_len(cfg.chunk_len()))),
        "http" => Ok(Box::new(HttpEmbedder::from_env_vars(
            &cfg.env.embed_url,
            &cfg.env.embed_key,
            &cfg.env.embed_model,
            cfg.dim(),
            cfg.chunk_len(),
        )?)),
        other => Err(CliError::Usage(format!("unknown embedder `{other}`"))),
    }
}

fn build_client(cfg: &FileConfig, truth: HashMap<String, Vec<usize>>) -> Result<Box<dyn LlmClient>, CliError> {
    Ok(match cfg.client.as_deref().unwrap_or("http") {
        "echo-annotated" => Box::new(EchoAnnotatedClient::default()),
        "oracle" => Box::new(OracleClient::new(truth)),
        "replay" => {
            let path = cfg
                .fixtures
                .as_deref()
                .ok_or_else(|| CliError::Usage("the replay client needs --fixtures".into()))?;
            if !path.exists() {
                return Err(CliError::Usage(format!("fixtures {} do not exist", path.display())));
            }
            Box::new(ReplayClient::load(path)?)
        }
        "http" => {
            let mut client =
                HttpChatClient::from_env_vars(&cfg.env.llm_url, &cfg.env.llm_key, &cfg.env.llm_model)?;
            if let Some(t) = cfg.temperature {
                client = client.with_temperature(t);
            }
            if let Some(p) = cfg.parallelism {
                client = client.with_parallelism(p);
            }
            Box::new(client)
        }
        other => return Err(CliError::Usage(format!("unknown client `{other}`"))),
    })
}

/// The configured client, optionally recording replay fixtures.
enum ClientHandle {
    Plain(Box<dyn LlmClient>),
    Recording(RecordingClient<Box<dyn LlmClient>>, PathBuf),
}

impl ClientHandle {
    fn new(cfg: &FileConfig, truth: HashMap<String, Vec<usize>>) -> Result<Self, CliError> {
        let client = build_client(cfg, truth)?;
        Ok(match &cfg.record {
            Some(path) => ClientHandle::Recording(RecordingClient::new(client), path.clone()),
            None => ClientHandle::Plain(client),
        })
    }

    fn client(&self) -> &dyn LlmClient {
        match self {
            ClientHandle::Plain(c) => c.as_ref(),
            ClientHandle::Recording(c, _) => c,
        }
    }

    fn finish(&self) -> Result<(), CliError> {
        if let ClientHandle::Recording(c, path) = self {
            c.save(path)?;
        }
        Ok(())
    }
}

fn truth_map(corpus: &Corpus) -> HashMap<String, Vec<usize>> {
    corpus
        .iter()
        .map(|tc| (tc.id.clone(), tc.faulty_lines.iter().copied().collect()))
        .collect()
}

pub fn index(cfg: &FileConfig, force: bool) -> Result<(), CliError> {
    let corpus = Corpus::load(cfg.require_corpus()?)?;
    let out = cfg
        .index
        .as_deref()
        .or(cfg.output.as_deref())
        .ok_or_else(|| CliError::Usage("no sidecar path given (--index)".into()))?;
    let embedder = build_embedder(cfg)?;
    if out.exists() && !force {
        let existing = load_index(out)?;
        if existing.dimension != embedder.dimension() {
            return Err(CliError::Usage(format!(
                "{} holds {}-dimensional embeddings but {} were requested; pass --force to replace it",
                out.display(),
                existing.dimension,
                embedder.dimension()
            )));
        }
    }
    let idx = EmbeddingIndex::build(&corpus, embedder.as_ref())?;
    save_index(&idx, out)?;
    println!(
        "indexed {} cases with {} (dim {}) into {}",
        idx.len(),
        idx.embedder,
        idx.dimension,
        out.display()
    );
    Ok(())
}

fn load_corpus_and_index(cfg: &FileConfig) -> Result<(Corpus, EmbeddingIndex), CliError> {
    let corpus = Corpus::load(cfg.require_corpus()?)?;
    let index = load_index(cfg.require_index()?)?;
    index.covers(&corpus).map_err(|e| {
        CliError::Usage(format!("index does not match the corpus ({e}); re-run `spark index`"))
    })?;
    Ok((corpus, index))
}

#[derive(Serialize)]
struct LocalizeReport<'a> {
    query_id: &'a str,
    kb_size: usize,
    retrieved: &'a [spark_core::SimilarityHit],
    no_retrieval_context: bool,
    patterns: Vec<&'a str>,
    annotated_lines: Vec<usize>,
    prediction: &'a [usize],
    warnings: &'a [spark_core::prompting::ParseWarning],
    units: BTreeMap<String, Vec<usize>>,
    unit_maps: BTreeMap<String, BTreeMap<usize, [usize; 2]>>,
    prompt_chars: usize,
    prompt_tokens: usize,
    completion_tokens: usize,
    latency_ms: u64,
    pipeline: &'a str,
    client: String,
    embedder: &'a str,
    tokenizer: &'a str,
}

pub fn localize(query_path: &Path, cfg: &FileConfig) -> Result<(), CliError> {
    let text = fs::read_to_string(query_path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", query_path.display())))?;
    let raw: RawTestCase = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid query {}: {e}", query_path.display())))?;
    let (labeled_query, _) = ingest_raw(&raw)?;
    let query = labeled_query.without_labels();
    let (corpus, index) = load_corpus_and_index(cfg)?;
    let eval = cfg.eval_config()?;
    let embedder = build_embedder(cfg)?;
    if embedder.name() != index.embedder || embedder.dimension() != index.dimension {
        return Err(CliError::Usage(format!(
            "index was built with {} (dim {}), but {} (dim {}) is configured",
            index.embedder,
            index.dimension,
            embedder.name(),
            embedder.dimension()
        )));
    }
    let vector = embed_test(&query, embedder.as_ref())?.vector;

    let mut truth = truth_map(&corpus);
    if labeled_query.is_labeled() || !truth.contains_key(&query.id) {
        truth.insert(query.id.clone(), labeled_query.faulty_lines.iter().copied().collect());
    }
    let handle = ClientHandle::new(cfg, truth)?;
    let tokenizer = HeuristicTokenizer;
    let pipeline = Pipeline {
        corpus: &corpus,
        search: &index,
        client: handle.client(),
        tokenizer: &tokenizer,
    };
    let qc = QueryConfig {
        mode: eval.mode,
        policy: eval.policy,
        annotator: eval.annotator(),
        r: eval.r,
        k: eval.max_k().min(query.len()),
        seed: eval.seed,
        settings: eval.settings.clone(),
    };
    let out = pipeline.run(&query, &vector, &qc)?;
    handle.finish()?;

    let mut units = BTreeMap::new();
    let mut unit_maps = BTreeMap::new();
    for g in &eval.granularities {
        let um = g.mapper().map(&query);
        units.insert(g.name().to_string(), spark_core::unitmap::lift_ranking(&out.prediction.element_ids, &um));
        unit_maps.insert(g.name().to_string(), um.to_json_map());
    }

    println!("query: {} ({} lines, knowledge base {})", query.id, query.len(), out.kb.len());
    if out.no_context() {
        println!("retrieved: none (no retrieval context; baseline prompt)");
    }
    for hit in &out.retrieved {
        println!("retrieved: {} score {:.4}", hit.test_id, hit.score);
    }
    println!("annotated lines: {:?}", out.annotated.annotated.iter().collect::<Vec<_>>());
    println!("prediction: {:?}", out.prediction.element_ids);
    for (g, ids) in &units {
        if g != "line" {
            println!("prediction ({g}): {ids:?}");
        }
    }
    println!(
        "tokens: prompt {}, completion {}; prompt chars {}",
        out.response.prompt_tokens, out.response.completion_tokens, out.prompt.char_count
    );

    if let Some(path) = &cfg.output {
        let report = LocalizeReport {
            query_id: &query.id,
            kb_size: out.kb.len(),
            retrieved: &out.retrieved,
            no_retrieval_context: out.no_context(),
            patterns: out.patterns.patterns().collect(),
            annotated_lines: out.annotated.annotated.iter().copied().collect(),
            prediction: &out.prediction.element_ids,
            warnings: &out.prediction.warnings,
            units,
            unit_maps,
            prompt_chars: out.prompt.char_count,
            prompt_tokens: out.response.prompt_tokens,
            completion_tokens: out.response.completion_tokens,
            latency_ms: out.response.latency_ms,
            pipeline: PIPELINE_ID,
            client: handle.client().identity(),
            embedder: &index.embedder,
            tokenizer: tokenizer.name(),
        };
        let text = serde_json::to_string_pretty(&report).expect("serializable");
        atomic_write(path, text.as_bytes())?;
    }
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    eprintln!("{:>3} {:<10} {:>9} {:>9} {:>9} {:>9} {:>9}", "k", "unit", "precision", "recall", "hit", "map", "mrr");
    for (k, row) in &report.aggregates {
        for (g, s) in row {
            eprintln!(
                "{k:>3} {:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                g.name(),
                s.precision,
                s.recall,
                s.hit,
                s.map,
                s.mrr
            );
        }
    }
    let e = &report.errors;
    eprintln!(
        "queries {}, failed {}, unparseable {}, short {}, empty truth {}",
        report.per_query.len(),
        e.failed,
        e.unparseable,
        e.short_predictions,
        e.empty_truth
    );
}

pub fn evaluate(cfg: &FileConfig) -> Result<(), CliError> {
    let eval = cfg.eval_config()?;
    let (corpus, index) = load_corpus_and_index(cfg)?;
    let handle = ClientHandle::new(cfg, truth_map(&corpus))?;
    let evaluator = Evaluator {
        corpus: &corpus,
        index: &index,
        client: handle.client(),
        tokenizer: &HeuristicTokenizer,
    };
    let report = evaluator.leave_one_out(&eval)?;
    handle.finish()?;
    write_output(cfg.output.as_deref(), &report.to_json()?)?;
    if let Some(csv) = &cfg.csv {
        atomic_write(csv, report.to_csv()?.as_bytes())?;
    }
    print_summary(&report);
    match report.errors.hard_failures() {
        0 => Ok(()),
        n => {
            for q in report.per_query.iter().filter(|q| q.error.is_some()) {
                eprintln!("  {}: {}", q.query_id, q.error.as_deref().unwrap_or_default());
            }
            Err(CliError::Partial(format!("{n} quer{} failed", if n == 1 { "y" } else { "ies" })))
        }
    }
}

fn parse_axis(axis: &str, values: &[String], cfg: &FileConfig) -> Result<SweepAxis, CliError> {
    let bad = |v: &str| CliError::Usage(format!("invalid {axis} value `{v}`"));
    Ok(match axis {
        "epsilon" => SweepAxis::Epsilon(
            values
                .iter()
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad(v)))
                .collect::<Result<_, _>>()?,
        ),
        "policy" => {
            let fraction = cfg.fraction.unwrap_or(spark_core::filtering::DEFAULT_FRACTION);
            SweepAxis::Policy(
                values
                    .iter()
                    .map(|v| FilterPolicy::from_name(v.trim(), fraction).map_err(|_| bad(v)))
                    .collect::<Result<_, _>>()?,
            )
        }
        "mode" => SweepAxis::Mode(
            values
                .iter()
                .map(|v| v.trim().parse::<RunMode>().map_err(|_| bad(v)))
                .collect::<Result<_, _>>()?,
        ),
        other => return Err(CliError::Usage(format!("unknown sweep axis `{other}`"))),
    })
}

pub fn sweep(
    axis: &str,
    values: &[String],
    annotation_csv: Option<&Path>,
    cfg: &FileConfig,
) -> Result<(), CliError> {
    let axis = parse_axis(axis, values, cfg)?;
    let eval = cfg.eval_config()?;
    let (corpus, index) = load_corpus_and_index(cfg)?;
    let handle = ClientHandle::new(cfg, truth_map(&corpus))?;
    let evaluator = Evaluator {
        corpus: &corpus,
        index: &index,
        client: handle.client(),
        tokenizer: &HeuristicTokenizer,
    };
    let sweep = evaluator.sweep(&eval, &axis)?;
    handle.finish()?;
    write_output(cfg.output.as_deref(), &sweep.to_json()?)?;
    if let Some(csv) = &cfg.csv {
        atomic_write(csv, sweep.to_csv()?.as_bytes())?;
    }
    if let Some(path) = annotation_csv {
        atomic_write(path, sweep.annotation_csv()?.as_bytes())?;
    }
    eprintln!("{:<24} {:>5} {:>7} {:>7} {:>5}  hit@1 (line)", sweep.axis, "min", "median", "mean", "max");
    let mut failed = 0;
    for row in &sweep.rows {
        let a = row.annotation;
        let hit1 = row
            .report
            .aggregates
            .values()
            .next()
            .and_then(|m| m.values().next())
            .map_or(0.0, |s| s.hit);
        eprintln!(
            "{:<24} {:>5} {:>7.1} {:>7.2} {:>5}  {hit1:.4}",
            row.value, a.min, a.median, a.mean, a.max
        );
        failed += row.report.errors.hard_failures();
    }
    if failed > 0 {
        return Err(CliError::Partial(format!("{failed} queries failed across the sweep")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn axis_values_parse() {
        let cfg = FileConfig { fraction: Some(0.2), ..FileConfig::default() };
        let values: Vec<String> = ["0", "0.05"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_axis("epsilon", &values, &cfg).unwrap(), SweepAxis::Epsilon(vec![0.0, 0.05]));
        let values = vec!["all".to_string(), "closest".to_string()];
        assert_eq!(
            parse_axis("policy", &values, &cfg).unwrap(),
            SweepAxis::Policy(vec![FilterPolicy::All, FilterPolicy::ClosestByTime { fraction: 0.2 }])
        );
        assert!(matches!(parse_axis("policy", &["newest".into()], &cfg), Err(CliError::Usage(_))));
        assert!(matches!(parse_axis("color", &values, &cfg), Err(CliError::Usage(_))));
    }

    #[test]
    fn unknown_client_is_usage_error() {
        let cfg = FileConfig { client: Some("psychic".into()), ..FileConfig::default() };
        assert!(matches!(build_client(&cfg, HashMap::new()), Err(CliError::Usage(_))));
        let cfg = FileConfig { client: Some("replay".into()), ..FileConfig::default() };
        assert!(matches!(build_client(&cfg, HashMap::new()), Err(CliError::Usage(_))));
    }

    #[test]
    fn truth_map_lists_faulty_lines() {
        let corpus = spark_core::synth::twin_corpus(1, 5, 1, 1);
        let truth = truth_map(&corpus);
        assert_eq!(truth.len(), 2);
        let set: BTreeSet<usize> = truth["p000a"].iter().copied().collect();
        assert_eq!(set, corpus.get("p000a").unwrap().faulty_lines);
    }
}
