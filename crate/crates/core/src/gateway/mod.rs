//! Uniform access to text backends.
//!
//! Everything that talks to a model goes through one request/response shape
//! and one [`Gateway`] per backend, which layers on:
//!
//! - a content-addressed response cache (re-running a pipeline over an
//!   unchanged corpus issues zero new dispatches),
//! - bounded retries with exponential backoff and full jitter,
//! - a call/token budget checked before every dispatch,
//! - a bound on concurrent in-flight dispatches,
//! - usage accounting (per-kind dispatch counters and a JSONL usage log).
//!
//! Requests hash to a canonical form (JSON with sorted keys), so two
//! semantically identical requests always share a cache entry regardless of
//! field order at the call site.

pub mod cache;
pub mod http;
pub mod mock;

pub use cache::CacheStore;
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{MockBackend, MockReply, MockRule, MockScript};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

// ─────────────────────────────────────────────────────────────────────────────
// Request / response shapes
// ─────────────────────────────────────────────────────────────────────────────

/// Decoding parameters for one request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SamplingParams {
    /// Whole-story generation: fully stochastic decoding.
    pub fn story_generation() -> Self {
        SamplingParams { temperature: 1.0, top_p: 1.0, max_tokens: 1200, n_samples: 1, seed: None }
    }

    /// Alternative-continuation sampling: `k` samples with a tighter nucleus,
    /// generous length so completions can run to a natural ending.
    pub fn continuation(k: u32) -> Self {
        SamplingParams { temperature: 1.0, top_p: 0.5, max_tokens: 1200, n_samples: k, seed: None }
    }

    /// Plot judgment: greedy decoding for stable verdicts.
    pub fn judge() -> Self {
        SamplingParams { temperature: 0.0, top_p: 0.5, max_tokens: 256, n_samples: 1, seed: None }
    }

    /// Placeholder for endpoints with no decoding knobs (embeddings, echoed
    /// logprobs).
    pub fn fixed() -> Self {
        SamplingParams { temperature: 0.0, top_p: 1.0, max_tokens: 1, n_samples: 1, seed: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !self.top_p.is_finite() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// What a request is for. Determines the wire endpoint and which response
/// fields are meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Generate,
    Judge,
    Embed,
    Logprob,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Generate => "generate",
            RequestKind::Judge => "judge",
            RequestKind::Embed => "embed",
            RequestKind::Logprob => "logprob",
        }
    }

    fn index(self) -> usize {
        match self {
            RequestKind::Generate => 0,
            RequestKind::Judge => 1,
            RequestKind::Embed => 2,
            RequestKind::Logprob => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

/// One logical request to a backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub kind: RequestKind,
    pub model: String,
    pub messages: Vec<Message>,
    pub params: SamplingParams,
}

impl BackendRequest {
    pub fn validate(&self) -> Result<()> {
        if self.model.trim().is_empty() {
            return Err(Error::Config("request model must be nonempty".into()));
        }
        if self.messages.is_empty() {
            return Err(Error::Invalid("request must carry at least one message".into()));
        }
        self.params.validate()
    }

    /// Canonical serialization: JSON with keys sorted at every level, so the
    /// hash is stable under struct field reordering.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("request serializes").to_string()
    }

    /// Content address of this request; the cache key.
    pub fn request_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

/// Token counts reported by a backend for one dispatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// What came back. `texts` holds one entry per requested sample for
/// generate/judge kinds; `embeddings` and `token_logprobs` are filled by the
/// embed and logprob kinds respectively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub usage: Usage,
    /// True when served from the response cache rather than a live dispatch.
    #[serde(default)]
    pub from_cache: bool,
}

/// Accumulated usage over a unit of work (a story, a run).
/// `logical_calls` counts gateway completions whether or not they hit the
/// cache, so totals are stable across warm and cold runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub logical_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl UsageTotals {
    pub fn add_response(&mut self, resp: &BackendResponse) {
        self.logical_calls += 1;
        self.prompt_tokens += resp.usage.prompt_tokens;
        self.completion_tokens += resp.usage.completion_tokens;
    }

    pub fn merge(&mut self, other: &UsageTotals) {
        self.logical_calls += other.logical_calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Budget
// ─────────────────────────────────────────────────────────────────────────────

/// Spending limits enforced before every live dispatch. Cache hits are free.
/// Counters only ever grow and never exceed their caps.
#[derive(Debug)]
pub struct Budget {
    max_calls: u64,
    max_total_tokens: u64,
    spent_calls: AtomicU64,
    spent_tokens: AtomicU64,
}

impl Budget {
    pub fn new(max_calls: Option<u64>, max_total_tokens: Option<u64>) -> Self {
        Budget {
            max_calls: max_calls.unwrap_or(u64::MAX),
            max_total_tokens: max_total_tokens.unwrap_or(u64::MAX),
            spent_calls: AtomicU64::new(0),
            spent_tokens: AtomicU64::new(0),
        }
    }

    pub fn unlimited() -> Self {
        Budget::new(None, None)
    }
}

impl Default for Budget {
    /// Unlimited spending.
    fn default() -> Self {
        Budget::unlimited()
    }
}

impl Budget {

    /// Reserve one call before dispatch. Fails without any network activity
    /// when either limit is already reached.
    fn reserve_call(&self) -> Result<()> {
        if self.spent_tokens.load(Ordering::SeqCst) >= self.max_total_tokens {
            return Err(Error::BudgetExhausted(format!(
                "token budget: {} of {} tokens used",
                self.spent_tokens.load(Ordering::SeqCst),
                self.max_total_tokens
            )));
        }
        self.spent_calls
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
                if c < self.max_calls {
                    Some(c + 1)
                } else {
                    None
                }
            })
            .map_err(|_| {
                Error::BudgetExhausted(format!("call budget: {} calls used", self.max_calls))
            })?;
        Ok(())
    }

    /// Record tokens spent by a completed dispatch. The counter saturates at
    /// the cap so the "spent never exceeds max" invariant holds even when the
    /// final response overshoots the remaining allowance.
    fn charge_tokens(&self, usage: &Usage) {
        let _ = self.spent_tokens.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |t| {
            Some(t.saturating_add(usage.total()).min(self.max_total_tokens))
        });
    }

    pub fn spent_calls(&self) -> u64 {
        self.spent_calls.load(Ordering::SeqCst)
    }

    pub fn spent_tokens(&self) -> u64 {
        self.spent_tokens.load(Ordering::SeqCst)
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Retry policy and in-flight bound
// ─────────────────────────────────────────────────────────────────────────────

/// Exponential backoff with full jitter: attempt `a` (0-based) sleeps a
/// uniform random duration in `[0, base * factor^a]`.
#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 5, base_delay_ms: 500, factor: 2.0 }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let cap = (self.base_delay_ms as f64 * self.factor.powi(attempt as i32)).round() as u64;
        let jittered = rand::rng().random_range(0..=cap.max(1));
        Duration::from_millis(jittered)
    }
}

/// Counting semaphore bounding concurrent in-flight dispatches.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

struct SemaphorePermit<'a> {
    sem: &'a Semaphore,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), available: Condvar::new() }
    }

    fn acquire(&self) -> SemaphorePermit<'_> {
        let mut permits = self.permits.lock().expect("semaphore poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore poisoned");
        }
        *permits -= 1;
        SemaphorePermit { sem: self }
    }
}

impl Drop for SemaphorePermit<'_> {
    fn drop(&mut self) {
        let mut permits = self.sem.permits.lock().expect("semaphore poisoned");
        *permits += 1;
        self.sem.available.notify_one();
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Usage log
// ─────────────────────────────────────────────────────────────────────────────

/// Append-only JSONL log of every logical call. Shareable across the several
/// gateways of one run so the log reflects the whole run.
pub struct UsageLog {
    file: Mutex<File>,
}

impl UsageLog {
    /// Create (truncating) the log file for a fresh run.
    pub fn create(path: &Path) -> Result<Arc<Self>> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Arc::new(UsageLog { file: Mutex::new(file) }))
    }

    fn append(&self, line: &serde_json::Value) {
        if let Ok(mut file) = self.file.lock() {
            // a lost log line must not fail the pipeline
            let _ = writeln!(file, "{line}");
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Backend trait and gateway
// ─────────────────────────────────────────────────────────────────────────────

/// A raw backend: performs exactly one wire call per `execute`, with no
/// caching, retrying, or accounting of its own.
pub trait Backend: Send + Sync {
    /// Stable identifier used in logs and manifests.
    fn id(&self) -> &str;

    /// Whether one request may carry `n_samples > 1`.
    fn supports_batch(&self) -> bool {
        true
    }

    /// Perform one wire call.
    fn execute(&self, req: &BackendRequest) -> Result<BackendResponse>;
}

#[derive(Default)]
struct Counters {
    logical_calls: AtomicU64,
    cache_hits: AtomicU64,
    dispatches: [AtomicU64; 4],
}

/// Point-in-time view of a gateway's counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub logical_calls: u64,
    pub cache_hits: u64,
    pub dispatched_total: u64,
    pub dispatched_generate: u64,
    pub dispatched_judge: u64,
    pub dispatched_embed: u64,
    pub dispatched_logprob: u64,
}

/// The caching, budgeted, retrying front door to one backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<Arc<CacheStore>>,
    budget: Arc<Budget>,
    retry: RetryPolicy,
    inflight: Semaphore,
    usage_log: Option<Arc<UsageLog>>,
    run_id: String,
    counters: Counters,
}

pub struct GatewayBuilder {
    backend: Arc<dyn Backend>,
    cache: Option<Arc<CacheStore>>,
    budget: Option<Arc<Budget>>,
    retry: RetryPolicy,
    max_in_flight: usize,
    usage_log: Option<Arc<UsageLog>>,
    run_id: String,
}

impl GatewayBuilder {
    /// Open (or create) a cache directory for this gateway.
    pub fn cache_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        self.cache = Some(Arc::new(CacheStore::open(dir)?));
        Ok(self)
    }

    /// Share an already-open cache store.
    pub fn cache_store(mut self, store: Arc<CacheStore>) -> Self {
        self.cache = Some(store);
        self
    }

    /// Share a budget across gateways; defaults to unlimited.
    pub fn budget(mut self, budget: Arc<Budget>) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Bound on concurrent dispatches to this backend (default 8).
    pub fn max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n;
        self
    }

    pub fn usage_log(mut self, log: Arc<UsageLog>) -> Self {
        self.usage_log = Some(log);
        self
    }

    pub fn run_id(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = run_id.into();
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            backend: self.backend,
            cache: self.cache,
            budget: self.budget.unwrap_or_else(|| Arc::new(Budget::unlimited())),
            retry: self.retry,
            inflight: Semaphore::new(self.max_in_flight),
            usage_log: self.usage_log,
            run_id: self.run_id,
            counters: Counters::default(),
        }
    }
}

impl Gateway {
    pub fn builder(backend: Arc<dyn Backend>) -> GatewayBuilder {
        GatewayBuilder {
            backend,
            cache: None,
            budget: None,
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            usage_log: None,
            run_id: "adhoc".into(),
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn supports_batch(&self) -> bool {
        self.backend.supports_batch()
    }

    pub fn budget(&self) -> &Budget {
        &self.budget
    }

    pub fn stats(&self) -> StatsSnapshot {
        let d = &self.counters.dispatches;
        let per: [u64; 4] = [
            d[0].load(Ordering::SeqCst),
            d[1].load(Ordering::SeqCst),
            d[2].load(Ordering::SeqCst),
            d[3].load(Ordering::SeqCst),
        ];
        StatsSnapshot {
            logical_calls: self.counters.logical_calls.load(Ordering::SeqCst),
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            dispatched_total: per.iter().sum(),
            dispatched_generate: per[RequestKind::Generate.index()],
            dispatched_judge: per[RequestKind::Judge.index()],
            dispatched_embed: per[RequestKind::Embed.index()],
            dispatched_logprob: per[RequestKind::Logprob.index()],
        }
    }

    /// Serve a request: from the cache when possible, otherwise dispatch with
    /// retries, charge the budget, and persist the response.
    pub fn complete(&self, req: &BackendRequest) -> Result<BackendResponse> {
        req.validate()?;
        self.counters.logical_calls.fetch_add(1, Ordering::SeqCst);
        let hash = req.request_hash();

        if let Some(cache) = &self.cache {
            if let Some(mut cached) = cache.get(&hash)? {
                cached.from_cache = true;
                self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                self.log_usage(&hash, req.kind, &cached.usage, true);
                return Ok(cached);
            }
        }

        self.budget.reserve_call()?;
        let response = {
            let _permit = self.inflight.acquire();
            self.execute_with_retry(req)?
        };
        self.budget.charge_tokens(&response.usage);
        self.counters.dispatches[req.kind.index()].fetch_add(1, Ordering::SeqCst);
        if let Some(cache) = &self.cache {
            cache.put(&hash, req, &response)?;
        }
        self.log_usage(&hash, req.kind, &response.usage, false);
        Ok(response)
    }

    fn execute_with_retry(&self, req: &BackendRequest) -> Result<BackendResponse> {
        let mut attempt = 0u32;
        loop {
            match self.backend.execute(req) {
                Ok(mut response) => {
                    response.from_cache = false;
                    return Ok(response);
                }
                Err(e) if e.is_retryable() && attempt + 1 < self.retry.attempts.max(1) => {
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn log_usage(&self, hash: &str, kind: RequestKind, usage: &Usage, cached: bool) {
        if let Some(log) = &self.usage_log {
            log.append(&serde_json::json!({
                "run_id": self.run_id,
                "request_hash": hash,
                "kind": kind.as_str(),
                "prompt_tokens": usage.prompt_tokens,
                "completion_tokens": usage.completion_tokens,
                "cached": cached,
            }));
        }
    }

    /// Embed texts and L2-normalize the vectors. One request carries all
    /// texts; the response must return one vector per input.
    pub fn embed(&self, model: &str, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Err(Error::Invalid("embed requires at least one text".into()));
        }
        let req = BackendRequest {
            kind: RequestKind::Embed,
            model: model.into(),
            messages: texts.iter().map(|t| Message::user(*t)).collect(),
            params: SamplingParams::fixed(),
        };
        let response = self.complete(&req)?;
        let vectors = response.embeddings.ok_or_else(|| Error::MalformedPayload {
            message: format!("backend '{}' returned no embeddings", self.backend.id()),
            payload: String::new(),
        })?;
        if vectors.len() != texts.len() {
            return Err(Error::MalformedPayload {
                message: format!("expected {} embeddings, got {}", texts.len(), vectors.len()),
                payload: String::new(),
            });
        }
        vectors
            .into_iter()
            .map(|v| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !norm.is_finite() || norm == 0.0 {
                    return Err(Error::MalformedPayload {
                        message: "embedding vector has zero or non-finite norm".into(),
                        payload: String::new(),
                    });
                }
                Ok(v.into_iter().map(|x| x / norm).collect())
            })
            .collect()
    }
}
