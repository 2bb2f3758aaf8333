//! Chat-completion and embedding backends behind one interface.
//!
//! Live providers speak a single chat-completions style JSON protocol over
//! HTTP; provider differences live in [`GatewayConfig`]. The mock backends
//! are pure functions of their inputs and configuration, which is what every
//! test and the `--mock` pipeline run on.
//!
//! Prompt convention: modules that send a piece of participant text for
//! analysis wrap it in `<<<` / `>>>` markers. Mock response rules match
//! against that marked subject when present (see [`subject_of`]), so a rule
//! keyed on a phrase does not fire just because the phrase also appears in
//! instructions or examples.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_tokens: 512,
            n_samples: 1,
            seed: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn samples(mut self, n: u32) -> Self {
        self.n_samples = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn check(&self) -> Result<()> {
        if self.system_prompt.trim().is_empty() && self.user_prompt.trim().is_empty() {
            return Err(GatewayError::Input("prompts are empty".into()));
        }
        if self.n_samples == 0 {
            return Err(GatewayError::Input("n_samples must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::Input(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Input("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EmbeddingMethodId {
    pub name: String,
    pub dimension: usize,
}

impl EmbeddingMethodId {
    pub fn new(name: impl Into<String>, dimension: usize) -> Self {
        EmbeddingMethodId {
            name: name.into(),
            dimension,
        }
    }

    /// The `i`-th seeded trigram-hashing method used offline.
    pub fn mock(i: usize) -> Self {
        EmbeddingMethodId::new(format!("trigram-{i}"), 256 + 64 * (i % 3))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("backend error (retryable): {0}")]
    Retryable(String),
    #[error("backend error (fatal): {0}")]
    Fatal(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Retryable(_))
    }
}

pub type Result<T> = std::result::Result<T, GatewayError>;

pub trait ChatBackend: Send + Sync {
    /// Returns exactly `req.n_samples` completions.
    fn chat(&self, req: &ChatRequest) -> Result<Vec<String>>;
}

pub trait EmbeddingBackend: Send + Sync {
    /// Returns one unit-norm vector of `method.dimension` per text.
    fn embed(&self, texts: &[String], method: &EmbeddingMethodId) -> Result<Vec<Vec<f64>>>;
}

/// Text between the last `<<<` and the following `>>>`, if any.
pub fn subject_of(prompt: &str) -> Option<&str> {
    let start = prompt.rfind("<<<")? + 3;
    let end = prompt[start..].find(">>>")? + start;
    Some(prompt[start..end].trim())
}

/// Text between the first `<<<` and its `>>>` following `label`.
pub fn labelled_subject<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let at = prompt.find(label)? + label.len();
    let rest = &prompt[at..];
    let start = rest.find("<<<")? + 3;
    let end = rest[start..].find(">>>")? + start;
    Some(rest[start..end].trim())
}

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character-trigram feature hashing into `dimension` buckets, L2-normalized.
///
/// Text is lower-cased, whitespace-collapsed and padded with one space on
/// each side before trigrams are taken.
pub fn trigram_embedding(text: &str, seed: u64, dimension: usize) -> Result<Vec<f64>> {
    let norm = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    if norm.is_empty() {
        return Err(GatewayError::Input("cannot embed an empty string".into()));
    }
    if dimension == 0 {
        return Err(GatewayError::Input("embedding dimension must be positive".into()));
    }
    let chars: Vec<char> = format!(" {norm} ").chars().collect();
    let mut v = vec![0.0; dimension];
    let mut buf = [0u8; 12];
    for w in chars.windows(3) {
        let mut len = 0;
        for c in w {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        let h = fnv1a(seed, &buf[..len]);
        v[(h % dimension as u64) as usize] += 1.0;
    }
    normalize(&mut v);
    Ok(v)
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Seeded trigram hashing; the seed is derived from the method name.
#[derive(Debug, Clone, Default)]
pub struct MockEmbedder;

impl MockEmbedder {
    pub fn method_seed(method: &EmbeddingMethodId) -> u64 {
        fnv1a(0, method.name.as_bytes())
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn embed(&self, texts: &[String], method: &EmbeddingMethodId) -> Result<Vec<Vec<f64>>> {
        let seed = Self::method_seed(method);
        texts
            .iter()
            .map(|t| trigram_embedding(t, seed, method.dimension))
            .collect()
    }
}

/// Canned response for prompts whose subject contains `pattern`
/// (case-insensitive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub response: String,
}

/// Computes a response from the request and sample index, or declines.
pub type MockHandler = Arc<dyn Fn(&ChatRequest, u32) -> Option<String> + Send + Sync>;

/// Deterministic offline chat backend.
///
/// Resolution order per sample: response-table rules, then handlers in
/// registration order, then a fallback chosen by a keyed SHA-256 of
/// `(system_prompt, user_prompt, sample_index, seed)`. At temperature 0
/// the sample index is fixed to 0 so all samples agree.
#[derive(Clone, Default)]
pub struct MockChatBackend {
    rules: Vec<MockRule>,
    handlers: Vec<MockHandler>,
    fallback: Vec<String>,
}

impl std::fmt::Debug for MockChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockChatBackend")
            .field("rules", &self.rules)
            .field("handlers", &self.handlers.len())
            .field("fallback", &self.fallback)
            .finish()
    }
}

impl MockChatBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rule(mut self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            pattern: pattern.into(),
            response: response.into(),
        });
        self
    }

    pub fn with_rules(mut self, rules: impl IntoIterator<Item = MockRule>) -> Self {
        self.rules.extend(rules);
        self
    }

    pub fn with_handler(mut self, handler: MockHandler) -> Self {
        self.handlers.push(handler);
        self
    }

    pub fn with_fallback(mut self, responses: impl IntoIterator<Item = String>) -> Self {
        self.fallback.extend(responses);
        self
    }

    fn keyed_hash(req: &ChatRequest, sample: u32) -> u64 {
        let mut h = Sha256::new();
        h.update(req.system_prompt.as_bytes());
        h.update([0u8]);
        h.update(req.user_prompt.as_bytes());
        h.update([0u8]);
        h.update(sample.to_le_bytes());
        h.update(req.seed.unwrap_or(0).to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    fn sample(&self, req: &ChatRequest, index: u32) -> String {
        let subject = subject_of(&req.user_prompt)
            .unwrap_or(&req.user_prompt)
            .to_lowercase();
        if let Some(rule) = self
            .rules
            .iter()
            .find(|r| subject.contains(&r.pattern.to_lowercase()))
        {
            return rule.response.clone();
        }
        for h in &self.handlers {
            if let Some(out) = h(req, index) {
                return out;
            }
        }
        let key = Self::keyed_hash(req, index);
        if self.fallback.is_empty() {
            format!("ok-{key:016x}")
        } else {
            self.fallback[(key % self.fallback.len() as u64) as usize].clone()
        }
    }
}

impl ChatBackend for MockChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<Vec<String>> {
        req.check()?;
        Ok((0..req.n_samples)
            .map(|i| {
                let idx = if req.temperature == 0.0 { 0 } else { i };
                self.sample(req, idx)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    MockDeterministic,
    HttpChatCompletions,
    HttpEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub api_key_env_var: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default)]
    pub retry_policy: RetryPolicy,
}

fn default_timeout_secs() -> u64 {
    60
}

impl BackendConfig {
    pub fn mock() -> Self {
        BackendConfig {
            kind: BackendKind::MockDeterministic,
            endpoint_url: None,
            api_key_env_var: None,
            model: None,
            request_timeout_secs: default_timeout_secs(),
            retry_policy: RetryPolicy::default(),
        }
    }
}

fn default_max_in_flight() -> usize {
    50
}

/// `gateway.toml`:
///
/// ```toml
/// max_in_flight = 50
///
/// [chat]
/// kind = "HttpChatCompletions"
/// endpoint_url = "https://api.example.com/v1/chat/completions"
/// api_key_env_var = "OPENAI_API_KEY"
/// model = "gpt-4-turbo"
/// request_timeout_secs = 60
/// retry_policy = { max_retries = 3, backoff_ms = 500 }
///
/// [embeddings]
/// kind = "MockDeterministic"
///
/// [[mock_rules]]
/// pattern = "own fault"
/// response = "Answer: A"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "BackendConfig::mock")]
    pub chat: BackendConfig,
    #[serde(default = "BackendConfig::mock")]
    pub embeddings: BackendConfig,
    #[serde(default)]
    pub mock_rules: Vec<MockRule>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_in_flight: default_max_in_flight(),
            chat: BackendConfig::mock(),
            embeddings: BackendConfig::mock(),
            mock_rules: Vec::new(),
        }
    }
}

impl GatewayConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let cfg: GatewayConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        Ok(cfg)
    }
}

/// Counting semaphore bounding outstanding backend calls.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
    peak: AtomicUsize,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(max: usize) -> Self {
        assert!(max >= 1, "max_in_flight must be at least 1");
        Limiter {
            max,
            current: Mutex::new(0),
            cv: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Permit(self)
    }

    pub fn max(&self) -> usize {
        self.max
    }

    /// Highest number of simultaneously held permits so far.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().unwrap();
        *n -= 1;
        self.0.cv.notify_one();
    }
}

/// Shareable front door to the configured backends.
#[derive(Clone)]
pub struct Gateway {
    chat: Arc<dyn ChatBackend>,
    embedder: Arc<dyn EmbeddingBackend>,
    limiter: Arc<Limiter>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("max_in_flight", &self.limiter.max())
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(
        chat: Arc<dyn ChatBackend>,
        embedder: Arc<dyn EmbeddingBackend>,
        max_in_flight: usize,
    ) -> Self {
        Gateway {
            chat,
            embedder,
            limiter: Arc::new(Limiter::new(max_in_flight)),
        }
    }

    /// Mock chat plus trigram embeddings.
    pub fn mock(chat: MockChatBackend) -> Self {
        Gateway::new(Arc::new(chat), Arc::new(MockEmbedder), default_max_in_flight())
    }

    /// Builds live backends from config. Mock-kind slots get `mock_chat`
    /// (extended with the config's response table) or [`MockEmbedder`].
    pub fn from_config(cfg: &GatewayConfig, mock_chat: MockChatBackend) -> Result<Self> {
        let chat: Arc<dyn ChatBackend> = match cfg.chat.kind {
            BackendKind::MockDeterministic => {
                Arc::new(mock_chat.with_rules(cfg.mock_rules.iter().cloned()))
            }
            BackendKind::HttpChatCompletions => Arc::new(HttpChatBackend::new(cfg.chat.clone())?),
            BackendKind::HttpEmbeddings => {
                return Err(GatewayError::Input(
                    "chat slot cannot use an embeddings backend".into(),
                ))
            }
        };
        let embedder: Arc<dyn EmbeddingBackend> = match cfg.embeddings.kind {
            BackendKind::MockDeterministic => Arc::new(MockEmbedder),
            BackendKind::HttpEmbeddings => {
                Arc::new(HttpEmbeddingBackend::new(cfg.embeddings.clone())?)
            }
            BackendKind::HttpChatCompletions => {
                return Err(GatewayError::Input(
                    "embedding slot cannot use a chat backend".into(),
                ))
            }
        };
        Ok(Gateway::new(chat, embedder, cfg.max_in_flight))
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.max()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.limiter.peak()
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<Vec<String>> {
        req.check()?;
        let _permit = self.limiter.acquire();
        let out = self.chat.chat(req)?;
        if out.len() != req.n_samples as usize {
            return Err(GatewayError::Fatal(format!(
                "backend returned {} samples, expected {}",
                out.len(),
                req.n_samples
            )));
        }
        Ok(out)
    }

    pub fn embed(&self, texts: &[String], method: &EmbeddingMethodId) -> Result<Vec<Vec<f64>>> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::Input(format!("text {i} is empty")));
        }
        let _permit = self.limiter.acquire();
        let out = self.embedder.embed(texts, method)?;
        if out.len() != texts.len() || out.iter().any(|v| v.len() != method.dimension) {
            return Err(GatewayError::Fatal(format!(
                "embedding backend returned malformed output for method {}",
                method.name
            )));
        }
        Ok(out)
    }

    /// Issues every request with at most `max_in_flight` outstanding;
    /// results come back in input order, one per request.
    pub fn chat_batch(&self, reqs: &[ChatRequest]) -> Vec<Result<Vec<String>>> {
        self.map_limited(reqs, |r| self.chat(r))
    }

    /// Runs `f` over `items` on up to `max_in_flight` worker threads and
    /// returns results in input order.
    pub fn map_limited<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        map_bounded(items, self.limiter.max(), f)
    }
}

/// Order-preserving parallel map with at most `workers` concurrent calls.
pub fn map_bounded<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

fn resolve_api_key(cfg: &BackendConfig) -> Option<String> {
    cfg.api_key_env_var
        .as_deref()
        .and_then(|var| std::env::var(var).ok())
}

fn http_client(cfg: &BackendConfig) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.request_timeout_secs))
        .build()
        .map_err(|e| GatewayError::Fatal(e.to_string()))
}

fn classify(err: reqwest::Error) -> GatewayError {
    if err.is_timeout() || err.is_connect() || err.is_request() {
        GatewayError::Retryable(err.to_string())
    } else {
        GatewayError::Fatal(err.to_string())
    }
}

fn post_json(
    client: &reqwest::blocking::Client,
    cfg: &BackendConfig,
    body: &serde_json::Value,
) -> Result<serde_json::Value> {
    let url = cfg
        .endpoint_url
        .as_deref()
        .ok_or_else(|| GatewayError::Fatal("endpoint_url not configured".into()))?;
    let mut req = client.post(url).json(body);
    if let Some(key) = resolve_api_key(cfg) {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(classify)?;
    let status = resp.status();
    if status.as_u16() == 429 || status.is_server_error() {
        return Err(GatewayError::Retryable(format!("HTTP {status}")));
    }
    if !status.is_success() {
        return Err(GatewayError::Fatal(format!("HTTP {status}")));
    }
    resp.json().map_err(|e| GatewayError::Fatal(e.to_string()))
}

/// Runs `attempt` until it succeeds, fails fatally, or retries run out.
pub fn with_retries<T>(policy: &RetryPolicy, mut attempt: impl FnMut() -> Result<T>) -> Result<T> {
    let mut tries = 0;
    loop {
        match attempt() {
            Err(GatewayError::Retryable(msg)) => {
                if tries >= policy.max_retries {
                    return Err(GatewayError::Fatal(format!(
                        "retries exhausted after {} attempts: {msg}",
                        tries + 1
                    )));
                }
                tries += 1;
                std::thread::sleep(Duration::from_millis(policy.backoff_ms * tries as u64));
            }
            other => return other,
        }
    }
}

#[derive(Debug)]
pub struct HttpChatBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self> {
        Ok(HttpChatBackend {
            client: http_client(&cfg)?,
            cfg,
        })
    }

    /// One request, no retries.
    pub fn attempt(&self, req: &ChatRequest, n: u32) -> Result<Vec<String>> {
        let mut body = serde_json::json!({
            "model": self.cfg.model.clone().unwrap_or_default(),
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "n": n,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = seed.into();
        }
        let v = post_json(&self.client, &self.cfg, &body)?;
        let choices = v["choices"]
            .as_array()
            .ok_or_else(|| GatewayError::Fatal("response has no choices[]".into()))?;
        Ok(choices
            .iter()
            .map(|c| {
                c["message"]["content"]
                    .as_str()
                    .or_else(|| c["text"].as_str())
                    .unwrap_or_default()
                    .to_string()
            })
            .collect())
    }
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<Vec<String>> {
        req.check()?;
        let mut out = Vec::with_capacity(req.n_samples as usize);
        // Some providers ignore `n`; keep asking until enough samples arrive.
        while out.len() < req.n_samples as usize {
            let want = req.n_samples - out.len() as u32;
            let got = with_retries(&self.cfg.retry_policy, || self.attempt(req, want))?;
            if got.is_empty() {
                return Err(GatewayError::Fatal("backend returned no choices".into()));
            }
            out.extend(got);
        }
        out.truncate(req.n_samples as usize);
        Ok(out)
    }
}

#[derive(Debug)]
pub struct HttpEmbeddingBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self> {
        Ok(HttpEmbeddingBackend {
            client: http_client(&cfg)?,
            cfg,
        })
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed(&self, texts: &[String], method: &EmbeddingMethodId) -> Result<Vec<Vec<f64>>> {
        let body = serde_json::json!({ "model": method.name, "input": texts });
        let v = with_retries(&self.cfg.retry_policy, || {
            post_json(&self.client, &self.cfg, &body)
        })?;
        let rows = v["embeddings"]
            .as_array()
            .ok_or_else(|| GatewayError::Fatal("response has no embeddings[]".into()))?;
        rows.iter()
            .map(|row| {
                let mut vec: Vec<f64> = row
                    .as_array()
                    .ok_or_else(|| GatewayError::Fatal("embedding row is not an array".into()))?
                    .iter()
                    .map(|x| x.as_f64().unwrap_or(0.0))
                    .collect();
                normalize(&mut vec);
                Ok(vec)
            })
            .collect()
    }
}

/// Per-method embedding matrix keyed by text.
pub fn embed_map(
    gateway: &Gateway,
    texts: &[String],
    method: &EmbeddingMethodId,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let vecs = gateway.embed(texts, method)?;
    Ok(texts.iter().cloned().zip(vecs).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_deterministic_at_zero_temperature() {
        let g = Gateway::mock(MockChatBackend::new());
        let req = ChatRequest::new("sys", "classify this").samples(5);
        let a = g.chat(&req).unwrap();
        let b = g.chat(&req).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s == &a[0]));
    }

    #[test]
    fn nonzero_temperature_varies_by_sample() {
        let backend = MockChatBackend::new().with_fallback((0..50).map(|i| format!("r{i}")));
        let req = ChatRequest::new("sys", "say something").samples(5).temperature(0.2);
        let out = backend.chat(&req).unwrap();
        assert!(out.iter().any(|s| s != &out[0]));
        assert_eq!(out, backend.chat(&req).unwrap());
    }

    #[test]
    fn response_table_rule() {
        let g = Gateway::mock(MockChatBackend::new().with_rule("own fault", "A"));
        let req = ChatRequest::new("sys", "Message: <<<It was their OWN FAULT really>>>").samples(5);
        assert_eq!(g.chat(&req).unwrap(), vec!["A"; 5]);
    }

    #[test]
    fn rules_match_subject_not_instructions() {
        let g = Gateway::mock(MockChatBackend::new().with_rule("own fault", "A").with_fallback(["H".to_string()]));
        let req = ChatRequest::new("sys", "Keywords: own fault\nMessage: <<<they need support>>>");
        assert_eq!(g.chat(&req).unwrap(), vec!["H"]);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let g = Gateway::mock(MockChatBackend::new());
        assert!(matches!(g.chat(&ChatRequest::new("", " ")), Err(GatewayError::Input(_))));
        assert!(matches!(g.chat(&ChatRequest::new("s", "u").samples(0)), Err(GatewayError::Input(_))));
        assert!(matches!(g.embed(&["".into()], &EmbeddingMethodId::mock(0)), Err(GatewayError::Input(_))));
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let g = Gateway::mock(MockChatBackend::new());
        let m = EmbeddingMethodId::mock(1);
        let texts: Vec<String> = ["abc", "feel sympathy", "x"].iter().map(|s| s.to_string()).collect();
        let a = g.embed(&texts, &m).unwrap();
        assert_eq!(a, g.embed(&texts, &m).unwrap());
        for v in &a {
            assert_eq!(v.len(), m.dimension);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        assert!((cosine(&a[1], &a[1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subject_extraction() {
        assert_eq!(subject_of("a <<<x>>> b <<< y >>>"), Some("y"));
        assert_eq!(labelled_subject("A: <<<x>>> B: <<<y>>>", "B:"), Some("y"));
        assert_eq!(subject_of("no markers"), None);
    }

    #[test]
    fn limiter_sequential_with_one_slot() {
        let order = Mutex::new(Vec::new());
        let active = AtomicUsize::new(0);
        let items: Vec<usize> = (0..20).collect();
        let out = map_bounded(&items, 1, |&i| {
            assert_eq!(active.fetch_add(1, Ordering::SeqCst), 0);
            order.lock().unwrap().push(i);
            active.fetch_sub(1, Ordering::SeqCst);
            i * 2
        });
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert_eq!(*order.lock().unwrap(), items);
    }

    #[test]
    fn retries_then_fatal() {
        let mut calls = 0;
        let policy = RetryPolicy { max_retries: 2, backoff_ms: 0 };
        let r: Result<()> = with_retries(&policy, || {
            calls += 1;
            Err(GatewayError::Retryable("down".into()))
        });
        assert_eq!(calls, 3);
        assert!(matches!(r, Err(GatewayError::Fatal(_))));
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg = GatewayConfig::from_toml(
            r#"
            max_in_flight = 8
            [chat]
            kind = "HttpChatCompletions"
            endpoint_url = "http://127.0.0.1:9/v1/chat/completions"
            api_key_env_var = "MY_KEY"
            retry_policy = { max_retries = 1, backoff_ms = 10 }
            [[mock_rules]]
            pattern = "own fault"
            response = "Answer: A"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.max_in_flight, 8);
        assert_eq!(cfg.chat.kind, BackendKind::HttpChatCompletions);
        assert_eq!(cfg.embeddings.kind, BackendKind::MockDeterministic);
        assert_eq!(cfg.chat.retry_policy.max_retries, 1);
        assert_eq!(cfg.mock_rules.len(), 1);
        assert!(GatewayConfig::from_toml("max_in_flight = 0").is_err());
    }
}
