//! Dispatch of few-shot requests to OpenAI-compatible chat-completion and
//! embedding endpoints, with a content-addressed response cache, retry with
//! exponential backoff, and bounded per-endpoint parallelism.
//!
//! API keys are read from named environment variables at request time and
//! never appear in configuration values or cache entries.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::prompt::{build_fewshot_messages, Message, MessageSequence, PromptAssets};
use crate::util::sha256_hex;

/// Generation parameters; part of the cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl Default for GenParams {
    fn default() -> Self {
        // Temperature 0 keeps reruns reproducible.
        Self {
            temperature: 0.0,
            max_tokens: 2048,
            stop: Vec::new(),
        }
    }
}

/// One chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// Base URL up to and including the API prefix, e.g. `http://host/v1`.
    pub endpoint: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub params: GenParams,
}

/// Retry schedule for transient failures (connect errors, 429, 5xx).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1u64 << attempt.min(16)))
    }
}

/// A cached response with transport metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response: String,
    pub created_unix: u64,
    pub attempts: u32,
    pub latency_ms: u64,
    pub endpoint: String,
}

/// Content-addressed file cache under a root directory. Entries are written
/// atomically (temp file + rename), so concurrent writers of the same key
/// are safe and a reader sees either nothing or a complete entry.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>> {
        let path = self.path_for(key);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let path = self.path_for(&entry.key);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        std::fs::write(&tmp, serde_json::to_string(entry)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

/// Cache key: digest of the model name, generation parameters, and the full
/// message sequence, canonically serialized.
pub fn chat_cache_key(model: &str, params: &GenParams, messages: &[Message]) -> String {
    let canonical = serde_json::json!({
        "kind": "chat",
        "model": model,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "stop": params.stop,
        "messages": messages,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

fn embed_cache_key(model: &str, text: &str) -> String {
    let canonical = serde_json::json!({
        "kind": "embedding",
        "model": model,
        "input": text,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

/// Outcome of one chat completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatOutcome {
    pub text: String,
    pub attempts: u32,
    pub from_cache: bool,
    pub latency_ms: u64,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

fn api_key(env_name: &Option<String>) -> Result<Option<String>> {
    match env_name {
        None => Ok(None),
        Some(name) => std::env::var(name).map(Some).map_err(|_| {
            Error::Validation(format!("environment variable '{name}' is not set"))
        }),
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Blocking HTTP client with a retry policy, shared across worker threads.
pub struct ChatClient {
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
}

enum AttemptError {
    Transient(String),
    Fatal(Error),
}

impl ChatClient {
    pub fn new(retry: RetryPolicy, timeout: Duration) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: format!("cannot build http client: {e}"),
            })?;
        Ok(Self { http, retry })
    }

    /// Completes a chat request, serving byte-identical text from the cache
    /// when the same request was answered before. Only successful responses
    /// are cached.
    pub fn chat_complete(
        &self,
        messages: &[Message],
        config: &ModelConfig,
        cache: &ResponseCache,
    ) -> Result<ChatOutcome> {
        let key = chat_cache_key(&config.name, &config.params, messages);
        if let Some(entry) = cache.get(&key)? {
            return Ok(ChatOutcome {
                text: entry.response,
                attempts: 0,
                from_cache: true,
                latency_ms: 0,
            });
        }

        let url = format!("{}/chat/completions", config.endpoint.trim_end_matches('/'));
        let key_header = api_key(&config.api_key_env)?;
        let request = ChatRequest {
            model: &config.name,
            messages,
            temperature: config.params.temperature,
            max_tokens: config.params.max_tokens,
            stop: if config.params.stop.is_empty() {
                None
            } else {
                Some(&config.params.stop)
            },
        };

        let started = Instant::now();
        let mut last_transient = String::new();
        for attempt in 1..=self.retry.max_attempts {
            match self.try_chat(&url, &key_header, &request) {
                Ok(text) => {
                    let latency_ms = started.elapsed().as_millis() as u64;
                    cache.put(&CacheEntry {
                        key: key.clone(),
                        response: text.clone(),
                        created_unix: now_unix(),
                        attempts: attempt,
                        latency_ms,
                        endpoint: config.endpoint.clone(),
                    })?;
                    return Ok(ChatOutcome {
                        text,
                        attempts: attempt,
                        from_cache: false,
                        latency_ms,
                    });
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(message)) => {
                    last_transient = message;
                    if attempt < self.retry.max_attempts {
                        std::thread::sleep(self.retry.backoff(attempt - 1));
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts: self.retry.max_attempts,
            message: last_transient,
        })
    }

    fn try_chat(
        &self,
        url: &str,
        key: &Option<String>,
        request: &ChatRequest<'_>,
    ) -> std::result::Result<String, AttemptError> {
        let mut builder = self.http.post(url).json(request);
        if let Some(key) = key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Transient(format!("http status {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(Error::HttpStatus {
                status: status.as_u16(),
                message: response.text().unwrap_or_default(),
            }));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| AttemptError::Transient(format!("malformed chat response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| {
                AttemptError::Fatal(Error::Validation("chat response has no choices".into()))
            })
    }

    fn request_embeddings(
        &self,
        url: &str,
        key: &Option<String>,
        model: &str,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>> {
        let request = EmbeddingRequest { model, input: texts };
        let mut last_transient = String::new();
        for attempt in 1..=self.retry.max_attempts {
            let mut builder = self
                .http
                .post(format!("{}/embeddings", url.trim_end_matches('/')))
                .json(&request);
            if let Some(key) = key {
                builder = builder.bearer_auth(key);
            }
            let outcome = (|| -> std::result::Result<Vec<Vec<f64>>, AttemptError> {
                let response = builder
                    .send()
                    .map_err(|e| AttemptError::Transient(e.to_string()))?;
                let status = response.status();
                if status.as_u16() == 429 || status.is_server_error() {
                    return Err(AttemptError::Transient(format!("http status {status}")));
                }
                if !status.is_success() {
                    return Err(AttemptError::Fatal(Error::HttpStatus {
                        status: status.as_u16(),
                        message: response.text().unwrap_or_default(),
                    }));
                }
                let mut parsed: EmbeddingResponse = response.json().map_err(|e| {
                    AttemptError::Transient(format!("malformed embedding response: {e}"))
                })?;
                parsed.data.sort_by_key(|d| d.index);
                Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
            })();
            match outcome {
                Ok(vectors) => {
                    if vectors.len() != texts.len() {
                        return Err(Error::Validation(format!(
                            "embedding endpoint returned {} vectors for {} inputs",
                            vectors.len(),
                            texts.len()
                        )));
                    }
                    return Ok(vectors);
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(message)) => {
                    last_transient = message;
                    if attempt < self.retry.max_attempts {
                        std::thread::sleep(self.retry.backoff(attempt - 1));
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts: self.retry.max_attempts,
            message: last_transient,
        })
    }
}

/// Where embedding vectors come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum EmbeddingSource {
    /// OpenAI-compatible embeddings endpoint.
    Endpoint {
        url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
    /// Line-delimited JSON file of `{"text": ..., "embedding": [...]}`.
    Precomputed { path: PathBuf },
}

/// Resolves texts to vectors from an endpoint (cached) or a precomputed
/// vector file.
pub struct Embedder<'a> {
    pub source: &'a EmbeddingSource,
    pub client: &'a ChatClient,
    pub cache: &'a ResponseCache,
}

impl Embedder<'_> {
    /// One vector per input text, in input order, uniform dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let vectors = match self.source {
            EmbeddingSource::Precomputed { path } => {
                let table = load_precomputed(path)?;
                texts
                    .iter()
                    .map(|text| {
                        table.get(text).cloned().ok_or_else(|| {
                            Error::Validation(format!(
                                "no precomputed vector for text: '{}'",
                                truncate_for_message(text)
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            EmbeddingSource::Endpoint {
                url,
                model,
                api_key_env,
            } => {
                let key = api_key(api_key_env)?;
                let mut vectors: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
                let mut miss_indices = Vec::new();
                let mut miss_texts = Vec::new();
                for (i, text) in texts.iter().enumerate() {
                    match self.cache.get(&embed_cache_key(model, text))? {
                        Some(entry) => {
                            vectors[i] = Some(serde_json::from_str(&entry.response)?);
                        }
                        None => {
                            miss_indices.push(i);
                            miss_texts.push(text.clone());
                        }
                    }
                }
                const BATCH: usize = 64;
                for (chunk_indices, chunk_texts) in miss_indices
                    .chunks(BATCH)
                    .zip(miss_texts.chunks(BATCH))
                {
                    let fetched = self.client.request_embeddings(url, &key, model, chunk_texts)?;
                    for (slot, vector) in chunk_indices.iter().zip(fetched) {
                        self.cache.put(&CacheEntry {
                            key: embed_cache_key(model, &texts[*slot]),
                            response: serde_json::to_string(&vector)?,
                            created_unix: now_unix(),
                            attempts: 1,
                            latency_ms: 0,
                            endpoint: url.clone(),
                        })?;
                        vectors[*slot] = Some(vector);
                    }
                }
                vectors.into_iter().map(|v| v.unwrap()).collect()
            }
        };
        if let Some(first) = vectors.first() {
            let expected = first.len();
            for vector in &vectors {
                if vector.len() != expected {
                    return Err(Error::DimensionMismatch {
                        expected,
                        got: vector.len(),
                    });
                }
            }
        }
        Ok(vectors)
    }
}

fn truncate_for_message(text: &str) -> String {
    let mut out: String = text.chars().take(40).collect();
    if out.len() < text.len() {
        out.push_str("...");
    }
    out
}

fn load_precomputed(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    #[derive(Deserialize)]
    struct Row {
        text: String,
        embedding: Vec<f64>,
    }
    let file = std::fs::File::open(path)?;
    let mut table = BTreeMap::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line)?;
        // First entry wins on duplicate texts.
        table.entry(row.text).or_insert(row.embedding);
    }
    Ok(table)
}

/// One raw response record, before parsing. Transport metadata stays out of
/// the serialized form so rerun artifacts are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRunRecord {
    pub sample_id: String,
    pub model_name: String,
    pub status: RawStatus,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub attempts: u32,
    #[serde(skip)]
    pub from_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawStatus {
    Ok,
    Failed,
}

/// Runs the few-shot batch: one request per (sample, model), in sample-major
/// order with models in configuration order. Per-record transport failures
/// are recorded, never raised; reruns fill only cache misses.
pub fn run_fewshot(
    client: &ChatClient,
    corpus: &Corpus,
    models: &[ModelConfig],
    assets: &PromptAssets,
    cache: &ResponseCache,
    parallelism: usize,
) -> Result<Vec<RawRunRecord>> {
    if models.is_empty() {
        return Err(Error::Validation("at least one model is required".into()));
    }
    let instruction = assets.instruction_text()?;
    let prompts: Vec<MessageSequence> = corpus
        .samples
        .iter()
        .map(|sample| build_fewshot_messages(&sample.text, &instruction, &assets.examples))
        .collect::<Result<_>>()?;

    let model_count = models.len();
    let slots: Mutex<Vec<Option<RawRunRecord>>> =
        Mutex::new(vec![None; corpus.len() * model_count]);

    for (model_index, model) in models.iter().enumerate() {
        let next = AtomicUsize::new(0);
        let workers = parallelism.clamp(1, corpus.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= corpus.len() {
                        break;
                    }
                    let sample = &corpus.samples[i];
                    let record = match client.chat_complete(prompts[i].messages(), model, cache) {
                        Ok(outcome) => RawRunRecord {
                            sample_id: sample.id.clone(),
                            model_name: model.name.clone(),
                            status: RawStatus::Ok,
                            raw_text: outcome.text,
                            error: None,
                            attempts: outcome.attempts,
                            from_cache: outcome.from_cache,
                        },
                        Err(e) => RawRunRecord {
                            sample_id: sample.id.clone(),
                            model_name: model.name.clone(),
                            status: RawStatus::Failed,
                            raw_text: String::new(),
                            error: Some(e.to_string()),
                            attempts: 0,
                            from_cache: false,
                        },
                    };
                    slots.lock().unwrap()[i * model_count + model_index] = Some(record);
                });
            }
        });
    }

    let records: Vec<RawRunRecord> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.ok_or_else(|| Error::Internal("missing record slot".into())))
        .collect::<Result<_>>()?;
    Ok(records)
}
