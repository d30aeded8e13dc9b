//! HTTP clients for OpenAI-compatible chat-completion and embedding
//! endpoints. Endpoints, keys and model names come from the environment.

use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::llm::{LlmClient, LlmResponse};
use crate::prompting::PromptBundle;
use crate::simsearch::Embedder;

pub const ENV_LLM_URL: &str = "SPARK_LLM_URL";
pub const ENV_LLM_KEY: &str = "SPARK_LLM_KEY";
pub const ENV_LLM_MODEL: &str = "SPARK_LLM_MODEL";
pub const ENV_EMBED_URL: &str = "SPARK_EMBED_URL";
pub const ENV_EMBED_KEY: &str = "SPARK_EMBED_KEY";
pub const ENV_EMBED_MODEL: &str = "SPARK_EMBED_MODEL";

/// Retry and timeout settings shared by both clients.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first one.
    pub max_attempts: usize,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

enum Failure {
    Retryable(String),
    RateLimited,
    Fatal(String),
}

struct JsonPoster {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonPoster {
    fn new(url: String, api_key: Option<String>, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(retry.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonPoster {
            agent,
            url,
            api_key,
            retry,
        }
    }

    fn attempt(&self, body: &Value) -> std::result::Result<Value, Failure> {
        let mut req = self.agent.post(&self.url).header("Accept", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            return Err(Failure::RateLimited);
        }
        if status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {detail}")));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| Failure::Fatal(format!("invalid JSON body: {e}")))
    }

    /// POSTs `body`, retrying transport errors, 429 and 5xx with
    /// exponential backoff.
    fn post(&self, body: &Value) -> Result<Value> {
        let attempts = self.retry.max_attempts.max(1);
        let mut backoff = self.retry.initial_backoff;
        let mut last = Failure::Retryable(String::new());
        for attempt in 1..=attempts {
            match self.attempt(body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(reason)) => {
                    return Err(Error::Transport {
                        attempts: attempt,
                        reason,
                    })
                }
                Err(f) => last = f,
            }
            if attempt < attempts {
                thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(match last {
            Failure::RateLimited => Error::RateLimited { attempts },
            Failure::Retryable(reason) | Failure::Fatal(reason) => {
                Error::Transport { attempts, reason }
            }
        })
    }
}

fn env_required(name: &str) -> Result<String> {
    std::env::var(name).map_err(|_| Error::Config(format!("environment variable {name} is not set")))
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

/// Single-turn chat-completion client.
pub struct HttpChatClient {
    poster: JsonPoster,
    model: String,
    pub temperature: f64,
    parallelism: usize,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        HttpChatClient {
            poster: JsonPoster::new(url.into(), api_key, RetryPolicy::default()),
            model: model.into(),
            temperature: 0.0,
            parallelism: 4,
        }
    }

    /// Reads `SPARK_LLM_URL`, `SPARK_LLM_MODEL` and optionally `SPARK_LLM_KEY`.
    pub fn from_env() -> Result<Self> {
        Self::from_env_vars(ENV_LLM_URL, ENV_LLM_KEY, ENV_LLM_MODEL)
    }

    /// Like [`HttpChatClient::from_env`] with custom variable names.
    pub fn from_env_vars(url_var: &str, key_var: &str, model_var: &str) -> Result<Self> {
        Ok(HttpChatClient::new(
            env_required(url_var)?,
            std::env::var(key_var).ok(),
            env_required(model_var)?,
        ))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.poster = JsonPoster::new(self.poster.url, self.poster.api_key, retry);
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }
}

impl LlmClient for HttpChatClient {
    fn identity(&self) -> String {
        format!("http-chat({})", self.model)
    }

    fn parallelism(&self) -> usize {
        self.parallelism
    }

    fn complete(&self, prompt: &PromptBundle) -> Result<LlmResponse> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": self.temperature,
        });
        let started = Instant::now();
        let value = self.poster.post(&body)?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let parsed: ChatResponse = serde_json::from_value(value).map_err(|e| Error::Transport {
            attempts: 1,
            reason: format!("unexpected response shape: {e}"),
        })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (prompt.token_count, crate::prompting::count_tokens(&text)),
        };
        Ok(LlmResponse {
            text,
            prompt_tokens,
            completion_tokens,
            latency_ms,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

/// Embedding client for `{"input": [...], "model": ...}` endpoints.
pub struct HttpEmbedder {
    poster: JsonPoster,
    model: String,
    name: String,
    dimension: usize,
    max_chunk_len: usize,
}

impl HttpEmbedder {
    pub fn new(
        url: impl Into<String>,
        api_key: Option<String>,
        model: impl Into<String>,
        dimension: usize,
        max_chunk_len: usize,
    ) -> Self {
        let model = model.into();
        HttpEmbedder {
            poster: JsonPoster::new(url.into(), api_key, RetryPolicy::default()),
            name: format!("http-embed({model})"),
            model,
            dimension,
            max_chunk_len,
        }
    }

    /// Reads `SPARK_EMBED_URL`, `SPARK_EMBED_MODEL` and optionally
    /// `SPARK_EMBED_KEY`.
    pub fn from_env(dimension: usize, max_chunk_len: usize) -> Result<Self> {
        Self::from_env_vars(ENV_EMBED_URL, ENV_EMBED_KEY, ENV_EMBED_MODEL, dimension, max_chunk_len)
    }

    /// Like [`HttpEmbedder::from_env`] with custom variable names.
    pub fn from_env_vars(
        url_var: &str,
        key_var: &str,
        model_var: &str,
        dimension: usize,
        max_chunk_len: usize,
    ) -> Result<Self> {
        Ok(HttpEmbedder::new(
            env_required(url_var)?,
            std::env::var(key_var).ok(),
            env_required(model_var)?,
            dimension,
            max_chunk_len,
        ))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.poster = JsonPoster::new(self.poster.url, self.poster.api_key, retry);
        self
    }
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_chunk_len(&self) -> usize {
        self.max_chunk_len
    }

    fn encode_chunk(&self, text: &str) -> Result<Vec<f32>> {
        let mut out = self.encode_chunks(&[text.to_string()])?;
        Ok(out.pop().unwrap_or_default())
    }

    fn encode_chunks(&self, chunks: &[String]) -> Result<Vec<Vec<f32>>> {
        let body = json!({"input": chunks, "model": self.model});
        let value = self.poster.post(&body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_value(value).map_err(|e| Error::Transport {
                attempts: 1,
                reason: format!("unexpected response shape: {e}"),
            })?;
        if parsed.data.len() != chunks.len() {
            return Err(Error::Transport {
                attempts: 1,
                reason: format!(
                    "expected {} embeddings, got {}",
                    chunks.len(),
                    parsed.data.len()
                ),
            });
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() == self.dimension {
                    Ok(d.embedding)
                } else {
                    Err(Error::DimensionMismatch {
                        expected: self.dimension,
                        actual: d.embedding.len(),
                    })
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::AnnotatedTest;
    use crate::corpus::{Meta, TestCase, Timestamp};
    use crate::prompting::{
        render_prompt, HeuristicTokenizer, PromptContext, PromptSettings, PromptTemplate,
    };
    use std::collections::BTreeSet;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::sync::mpsc;

    /// Serves one canned (status, body) per connection, in order, and
    /// forwards each request body to the returned channel.
    fn mock_server(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let request = read_request(&stream);
                tx.send(request).ok();
                respond(stream, status, &body);
            }
        });
        (url, rx)
    }

    fn read_request(stream: &TcpStream) -> String {
        let mut reader = BufReader::new(stream);
        let mut length = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
        }
        let mut body = vec![0; length];
        reader.read_exact(&mut body).unwrap();
        String::from_utf8(body).unwrap()
    }

    fn respond(mut stream: TcpStream, status: u16, body: &str) {
        let reply = format!(
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream.write_all(reply.as_bytes()).unwrap();
    }

    fn fast_retry(attempts: usize) -> RetryPolicy {
        RetryPolicy {
            max_attempts: attempts,
            initial_backoff: Duration::from_millis(1),
            timeout: Duration::from_secs(5),
        }
    }

    fn bundle() -> PromptBundle {
        let tc = TestCase {
            id: "q".into(),
            lines: vec!["a = 1".into(), "assert a == 2".into()],
            original_line_map: vec![1, 2],
            error_message: "AssertionError".into(),
            failure_ts: Timestamp::parse("2025-01-01T00:00:00Z").unwrap(),
            faulty_lines: BTreeSet::new(),
            meta: Meta::new(),
        };
        render_prompt(
            &AnnotatedTest::plain(tc),
            &PromptContext::default(),
            PromptTemplate::Baseline,
            1,
            &PromptSettings::default(),
            &HeuristicTokenizer,
        )
        .unwrap()
    }

    const CHAT_OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"[2]"}}],"usage":{"prompt_tokens":40,"completion_tokens":3}}"#;

    #[test]
    fn chat_request_and_response_shapes() {
        let (url, rx) = mock_server(vec![(200, CHAT_OK.into())]);
        let client = HttpChatClient::new(url, Some("secret".into()), "m-1").with_retry(fast_retry(1));
        let p = bundle();
        let r = client.complete(&p).unwrap();
        assert_eq!(r.text, "[2]");
        assert_eq!((r.prompt_tokens, r.completion_tokens), (40, 3));
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent["model"], "m-1");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["messages"][0]["content"], p.text.as_str());
    }

    #[test]
    fn server_errors_are_retried() {
        let (url, _rx) = mock_server(vec![(503, "{}".into()), (200, CHAT_OK.into())]);
        let client = HttpChatClient::new(url, None, "m").with_retry(fast_retry(3));
        assert_eq!(client.complete(&bundle()).unwrap().text, "[2]");
    }

    #[test]
    fn persistent_429_is_rate_limited() {
        let (url, _rx) = mock_server(vec![(429, "{}".into()), (429, "{}".into())]);
        let client = HttpChatClient::new(url, None, "m").with_retry(fast_retry(2));
        assert!(matches!(
            client.complete(&bundle()),
            Err(Error::RateLimited { attempts: 2 })
        ));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, _rx) = mock_server(vec![(400, r#"{"error":"bad"}"#.into())]);
        let client = HttpChatClient::new(url, None, "m").with_retry(fast_retry(3));
        match client.complete(&bundle()) {
            Err(Error::Transport { attempts, reason }) => {
                assert_eq!(attempts, 1);
                assert!(reason.contains("400"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreachable_endpoint_is_transport_error_after_retries() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let client = HttpChatClient::new(format!("http://127.0.0.1:{port}/x"), None, "m")
            .with_retry(fast_retry(3));
        assert!(matches!(
            client.complete(&bundle()),
            Err(Error::Transport { attempts: 3, .. })
        ));
    }

    #[test]
    fn embedder_batches_chunks() {
        let reply = r#"{"data":[{"embedding":[1.0,0.0]},{"embedding":[0.0,1.0]}]}"#;
        let (url, rx) = mock_server(vec![(200, reply.into())]);
        let e = HttpEmbedder::new(url, None, "emb", 2, 100).with_retry(fast_retry(1));
        let v = e.encode_chunks(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sent: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(sent, json!({"input": ["a", "b"], "model": "emb"}));
    }

    #[test]
    fn embedder_checks_dimension() {
        let (url, _rx) = mock_server(vec![(200, r#"{"data":[{"embedding":[1.0]}]}"#.into())]);
        let e = HttpEmbedder::new(url, None, "emb", 2, 100).with_retry(fast_retry(1));
        assert!(matches!(
            e.encode_chunk("a"),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }
}
