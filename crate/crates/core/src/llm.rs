//! LLM client contract and the deterministic clients used offline.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::prompting::{count_tokens, format_ids, PromptBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    /// Wall-clock time of the call; deterministic clients report 0.
    pub latency_ms: u64,
}

impl LlmResponse {
    /// Response with heuristic token counts and zero latency.
    pub fn offline(prompt: &PromptBundle, text: String) -> Self {
        LlmResponse {
            prompt_tokens: prompt.token_count,
            completion_tokens: count_tokens(&text),
            text,
            latency_ms: 0,
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn identity(&self) -> String;

    /// Maximum number of requests to keep in flight.
    fn parallelism(&self) -> usize {
        1
    }

    fn complete(&self, prompt: &PromptBundle) -> Result<LlmResponse>;
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn identity(&self) -> String {
        (**self).identity()
    }

    fn parallelism(&self) -> usize {
        (**self).parallelism()
    }

    fn complete(&self, prompt: &PromptBundle) -> Result<LlmResponse> {
        (**self).complete(prompt)
    }
}

/// Sends `prompt` and rejects blank answers.
pub fn invoke(client: &dyn LlmClient, prompt: &PromptBundle) -> Result<LlmResponse> {
    let response = client.complete(prompt)?;
    if response.text.trim().is_empty() {
        return Err(Error::EmptyResponse);
    }
    Ok(response)
}

/// Hex SHA-256 of the prompt text; the key of replay fixtures.
pub fn prompt_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Answers from a fixture map keyed by prompt hash.
#[derive(Debug, Clone, Default)]
pub struct ReplayClient {
    fixtures: HashMap<String, String>,
}

impl ReplayClient {
    pub fn new(fixtures: HashMap<String, String>) -> Self {
        ReplayClient { fixtures }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        Ok(ReplayClient::new(serde_json::from_str(&text)?))
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl LlmClient for ReplayClient {
    fn identity(&self) -> String {
        format!("replay({} fixtures)", self.fixtures.len())
    }

    fn parallelism(&self) -> usize {
        8
    }

    fn complete(&self, prompt: &PromptBundle) -> Result<LlmResponse> {
        let key = prompt_hash(&prompt.text);
        let text = self
            .fixtures
            .get(&key)
            .cloned()
            .ok_or(Error::MissingFixture(key))?;
        Ok(LlmResponse::offline(prompt, text))
    }
}

/// Wraps a client and remembers every (prompt hash, response) pair, for
/// producing replay fixtures.
pub struct RecordingClient<C> {
    inner: C,
    recorded: Mutex<BTreeMap<String, String>>,
}

impl<C: LlmClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        RecordingClient {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn fixtures(&self) -> BTreeMap<String, String> {
        self.recorded.lock().expect("recording lock").clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.fixtures())?;
        fsutil::atomic_write(path, json.as_bytes())
    }
}

impl<C: LlmClient> LlmClient for RecordingClient<C> {
    fn identity(&self) -> String {
        format!("recording({})", self.inner.identity())
    }

    fn parallelism(&self) -> usize {
        self.inner.parallelism()
    }

    fn complete(&self, prompt: &PromptBundle) -> Result<LlmResponse> {
        let response = self.inner.complete(prompt)?;
        self.recorded
            .lock()
            .expect("recording lock")
            .insert(prompt_hash(&prompt.text), response.text.clone());
        Ok(response)
    }
}

/// Test-only client that knows the answer: returns the true faulty ids of
/// the query the prompt was rendered for.
#[derive(Debug, Clone, Default)]
pub struct OracleClient {
    truth: HashMap<String, Vec<usize>>,
}

impl OracleClient {
    pub fn new(truth: HashMap<String, Vec<usize>>) -> Self {
        OracleClient { truth }
    }
}

impl LlmClient for OracleClient {
    fn identity(&self) -> String {
        "oracle".into()
    }

    fn parallelism(&self) -> usize {
        8
    }

    fn complete(&self, prompt: &PromptBundle) -> Result<LlmResponse> {
        let ids = prompt
            .query_id
            .as_ref()
            .and_then(|id| self.truth.get(id))
            .map(|t| t.iter().copied().take(prompt.k).collect::<Vec<_>>())
            .unwrap_or_default();
        Ok(LlmResponse::offline(prompt, format_ids(&ids)))
    }
}

/// Mock model that trusts the annotations: marked lines first (ascending),
/// then the remaining lines in order, up to `k`.
#[derive(Debug, Clone)]
pub struct EchoAnnotatedClient {
    marker: String,
}

impl EchoAnnotatedClient {
    pub fn new(marker: impl Into<String>) -> Self {
        EchoAnnotatedClient {
            marker: marker.into(),
        }
    }

    /// Numbered lines of the query code block, i.e. the first run of
    /// `1: `, `2: `, ... lines in the prompt.
    fn query_lines<'a>(&self, text: &'a str, max_id: usize) -> Vec<(usize, &'a str)> {
        let mut out = Vec::new();
        let mut next = 1;
        for line in text.lines() {
            if next > max_id {
                break;
            }
            let prefix = format!("{next}: ");
            if let Some(rest) = line.strip_prefix(&prefix) {
                out.push((next, rest));
                next += 1;
            } else if next > 1 {
                break;
            }
        }
        out
    }
}

impl Default for EchoAnnotatedClient {
    fn default() -> Self {
        EchoAnnotatedClient::new(crate::annotator::ANNOTATION_MESSAGE)
    }
}

impl LlmClient for EchoAnnotatedClient {
    fn identity(&self) -> String {
        "echo-annotated".into()
    }

    fn parallelism(&self) -> usize {
        8
    }

    fn complete(&self, prompt: &PromptBundle) -> Result<LlmResponse> {
        let lines = self.query_lines(&prompt.text, prompt.max_element_id);
        let suffix = format!(" {}", self.marker);
        let (marked, rest): (Vec<_>, Vec<_>) = lines
            .iter()
            .partition(|(_, l)| l.trim_end().ends_with(&suffix));
        let ids: Vec<usize> = marked
            .iter()
            .chain(rest.iter())
            .map(|(i, _)| *i)
            .take(prompt.k)
            .collect();
        Ok(LlmResponse::offline(prompt, format_ids(&ids)))
    }
}
