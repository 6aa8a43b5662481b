//! Deterministic offline backend for tests and dry runs.
//!
//! Never touches the network. A request is answered by the first matching
//! layer of its script:
//!
//! 1. `exact` — replies keyed by canonical request hash;
//! 2. `rules` — substring matches against any message content, optionally
//!    filtered by request kind;
//! 3. `defaults` — one reply per request kind;
//! 4. a seeded generator (when `seed` is set) that derives every sample from
//!    the request hash, so outputs are reproducible regardless of call order
//!    or thread interleaving;
//! 5. otherwise the request is an error, so tests fail loudly instead of
//!    silently inventing data.
//!
//! Embeddings are keyed by text (not request), so the same text always maps
//! to the same vector. Token logprobs come from a scripted constant or from
//! a per-token generator derived from the text.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendRequest, BackendResponse, RequestKind, Usage};
use crate::error::{Error, Result};

/// Vocabulary for generated pseudo-prose.
const LEXICON: [&str; 64] = [
    "the", "a", "old", "young", "quiet", "restless", "captain", "gardener", "letter", "storm",
    "harbor", "lantern", "map", "stranger", "promise", "river", "winter", "door", "shadow",
    "clock", "violin", "orchard", "lighthouse", "train", "fox", "widow", "secret", "bridge",
    "mirror", "bell", "archive", "comet", "tide", "ember", "thread", "compass", "attic",
    "meadow", "envelope", "anchor", "walked", "whispered", "returned", "vanished", "waited",
    "remembered", "opened", "followed", "buried", "carried", "found", "lost", "kept", "broke",
    "mended", "crossed", "slept", "dreamed", "counted", "burned", "sang", "drifted", "turned",
    "stayed",
];

const JUDGE_LABELS: [&str; 3] = ["yes", "partially", "no"];

/// One scripted reply: either a single text or a list cycled to the number of
/// requested samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    Text(String),
    Texts(Vec<String>),
}

impl MockReply {
    fn materialize(&self, n_samples: u32) -> Vec<String> {
        let pool: Vec<&str> = match self {
            MockReply::Text(t) => vec![t.as_str()],
            MockReply::Texts(ts) => ts.iter().map(|t| t.as_str()).collect(),
        };
        (0..n_samples as usize).map(|i| pool[i % pool.len().max(1)].to_string()).collect()
    }
}

/// A substring rule: fires when the request kind matches (or no kind filter
/// is given) and any message content contains `contains`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub kind: Option<String>,
    pub contains: String,
    pub reply: MockReply,
}

fn default_embed_dim() -> usize {
    16
}

fn default_generated_words() -> usize {
    120
}

/// Declarative script for [`MockBackend`]; loadable from JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MockScript {
    /// Enables the generator fallback and seeds it.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Replies keyed by canonical request hash.
    #[serde(default)]
    pub exact: HashMap<String, MockReply>,
    /// Substring rules, checked in order.
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Per-kind fallback replies, keyed by kind name ("generate", "judge").
    #[serde(default)]
    pub defaults: HashMap<String, MockReply>,
    /// Fixed embedding vectors keyed by exact text.
    #[serde(default)]
    pub embeddings: HashMap<String, Vec<f64>>,
    /// Constant per-token logprob (nats); overrides the generator.
    #[serde(default)]
    pub logprob_per_token: Option<f64>,
    /// Dimension of generated embedding vectors.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Words per generated text sample.
    #[serde(default = "default_generated_words")]
    pub generated_words: usize,
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            seed: None,
            exact: HashMap::new(),
            rules: Vec::new(),
            defaults: HashMap::new(),
            embeddings: HashMap::new(),
            logprob_per_token: None,
            embed_dim: default_embed_dim(),
            generated_words: default_generated_words(),
        }
    }
}

impl MockScript {
    /// Script whose only behavior is the seeded generator.
    pub fn seeded(seed: u64) -> Self {
        MockScript { seed: Some(seed), ..MockScript::default() }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn with_exact(mut self, request_hash: impl Into<String>, reply: MockReply) -> Self {
        self.exact.insert(request_hash.into(), reply);
        self
    }

    pub fn with_rule(
        mut self,
        kind: Option<RequestKind>,
        contains: impl Into<String>,
        reply: MockReply,
    ) -> Self {
        self.rules.push(MockRule {
            kind: kind.map(|k| k.as_str().to_string()),
            contains: contains.into(),
            reply,
        });
        self
    }

    pub fn with_default(mut self, kind: RequestKind, reply: MockReply) -> Self {
        self.defaults.insert(kind.as_str().to_string(), reply);
        self
    }

    pub fn with_embedding(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        self.embeddings.insert(text.into(), vector);
        self
    }

    pub fn with_logprob(mut self, per_token: f64) -> Self {
        self.logprob_per_token = Some(per_token);
        self
    }
}

/// Scripted, seeded, fully deterministic [`Backend`]. Keeps a log of every
/// request it saw so tests can assert on traffic.
pub struct MockBackend {
    script: MockScript,
    batch: bool,
    requests: Mutex<Vec<BackendRequest>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script, batch: true, requests: Mutex::new(Vec::new()) }
    }

    /// A mock that refuses batched sampling, forcing callers onto their
    /// one-request-per-sample path.
    pub fn without_batch(script: MockScript) -> Self {
        MockBackend { batch: false, ..MockBackend::new(script) }
    }

    pub fn requests(&self) -> Vec<BackendRequest> {
        self.requests.lock().expect("request log poisoned").clone()
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().expect("request log poisoned").len()
    }

    /// RNG derived from (script seed, request hash, sample index): stateless
    /// per request, so parallel execution order cannot change any output.
    fn rng_for(&self, seed: u64, request_hash: &str, sample: u32) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(request_hash.as_bytes());
        hasher.update(sample.to_le_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    fn generated_text(&self, seed: u64, request_hash: &str, sample: u32, kind: RequestKind) -> String {
        let mut rng = self.rng_for(seed, request_hash, sample);
        match kind {
            RequestKind::Judge => (*JUDGE_LABELS.choose(&mut rng).expect("nonempty")).to_string(),
            _ => {
                let words: Vec<&str> = (0..self.script.generated_words)
                    .map(|_| *LEXICON.choose(&mut rng).expect("nonempty"))
                    .collect();
                words.join(" ")
            }
        }
    }

    fn scripted_texts(&self, req: &BackendRequest, hash: &str) -> Result<Vec<String>> {
        if let Some(reply) = self.script.exact.get(hash) {
            return Ok(reply.materialize(req.params.n_samples));
        }
        for rule in &self.script.rules {
            let kind_ok = rule.kind.as_deref().is_none_or(|k| k == req.kind.as_str());
            if kind_ok && req.messages.iter().any(|m| m.content.contains(&rule.contains)) {
                return Ok(rule.reply.materialize(req.params.n_samples));
            }
        }
        if let Some(reply) = self.script.defaults.get(req.kind.as_str()) {
            return Ok(reply.materialize(req.params.n_samples));
        }
        if let Some(seed) = self.script.seed {
            return Ok((0..req.params.n_samples)
                .map(|s| self.generated_text(seed, hash, s, req.kind))
                .collect());
        }
        Err(Error::Unscripted { kind: req.kind.as_str().to_string(), request_hash: hash.to_string() })
    }

    fn embedding_for(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.script.embeddings.get(text) {
            return Ok(v.clone());
        }
        let Some(seed) = self.script.seed else {
            return Err(Error::Unscripted {
                kind: RequestKind::Embed.as_str().to_string(),
                request_hash: hex::encode(Sha256::digest(text.as_bytes())),
            });
        };
        // keyed by text so identical texts embed identically across requests
        let text_hash = hex::encode(Sha256::digest(text.as_bytes()));
        let mut rng = self.rng_for(seed, &text_hash, 0);
        Ok((0..self.script.embed_dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    fn logprobs_for(&self, text: &str) -> Result<Vec<(String, f64)>> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if let Some(lp) = self.script.logprob_per_token {
            return Ok(tokens.iter().map(|t| (t.to_string(), lp)).collect());
        }
        let Some(seed) = self.script.seed else {
            return Err(Error::Unscripted {
                kind: RequestKind::Logprob.as_str().to_string(),
                request_hash: hex::encode(Sha256::digest(text.as_bytes())),
            });
        };
        let text_hash = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut rng = self.rng_for(seed, &text_hash, i as u32);
                (t.to_string(), -(rng.random::<f64>() * 2.9 + 0.1))
            })
            .collect())
    }

    fn word_count(text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn supports_batch(&self) -> bool {
        self.batch
    }

    fn execute(&self, req: &BackendRequest) -> Result<BackendResponse> {
        self.requests.lock().expect("request log poisoned").push(req.clone());
        let hash = req.request_hash();
        let prompt_tokens: u64 = req.messages.iter().map(|m| Self::word_count(&m.content)).sum();

        match req.kind {
            RequestKind::Embed => {
                let vectors: Vec<Vec<f64>> = req
                    .messages
                    .iter()
                    .map(|m| self.embedding_for(&m.content))
                    .collect::<Result<_>>()?;
                Ok(BackendResponse {
                    texts: Vec::new(),
                    token_logprobs: None,
                    embeddings: Some(vectors),
                    usage: Usage { prompt_tokens, completion_tokens: 0 },
                    from_cache: false,
                })
            }
            RequestKind::Logprob => {
                let text =
                    req.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join(" ");
                let logprobs = self.logprobs_for(&text)?;
                Ok(BackendResponse {
                    texts: vec![text],
                    token_logprobs: Some(logprobs),
                    embeddings: None,
                    usage: Usage { prompt_tokens, completion_tokens: 0 },
                    from_cache: false,
                })
            }
            RequestKind::Generate | RequestKind::Judge => {
                let texts = self.scripted_texts(req, &hash)?;
                let completion_tokens: u64 = texts.iter().map(|t| Self::word_count(t)).sum();
                Ok(BackendResponse {
                    texts,
                    token_logprobs: None,
                    embeddings: None,
                    usage: Usage { prompt_tokens, completion_tokens },
                    from_cache: false,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Message, SamplingParams};
    use super::*;

    fn request(kind: RequestKind, content: &str, n: u32) -> BackendRequest {
        BackendRequest {
            kind,
            model: "mock-model".into(),
            messages: vec![Message::user(content)],
            params: SamplingParams { n_samples: n, ..SamplingParams::story_generation() },
        }
    }

    #[test]
    fn scripted_texts_come_back_exactly() {
        let req = request(RequestKind::Generate, "give me two", 2);
        let script = MockScript::default().with_exact(
            req.request_hash(),
            MockReply::Texts(vec!["A".into(), "B".into()]),
        );
        let backend = MockBackend::new(script);
        let resp = backend.execute(&req).unwrap();
        assert_eq!(resp.texts, vec!["A".to_string(), "B".to_string()]);
    }

    #[test]
    fn substring_rules_apply_per_kind() {
        let script = MockScript::default()
            .with_rule(Some(RequestKind::Judge), "the dragon", MockReply::Text("yes".into()))
            .with_default(RequestKind::Judge, MockReply::Text("no".into()));
        let backend = MockBackend::new(script);
        let hit = backend.execute(&request(RequestKind::Judge, "about the dragon here", 1)).unwrap();
        assert_eq!(hit.texts, vec!["yes".to_string()]);
        let miss = backend.execute(&request(RequestKind::Judge, "about a cat", 1)).unwrap();
        assert_eq!(miss.texts, vec!["no".to_string()]);
    }

    #[test]
    fn unscripted_requests_error_without_a_seed() {
        let backend = MockBackend::new(MockScript::default());
        let err = backend.execute(&request(RequestKind::Judge, "anything", 1)).unwrap_err();
        assert!(matches!(err, Error::Unscripted { .. }));
    }

    #[test]
    fn same_seed_same_request_gives_identical_outputs() {
        let a = MockBackend::new(MockScript::seeded(7));
        let b = MockBackend::new(MockScript::seeded(7));
        let req = request(RequestKind::Generate, "a story about tides", 3);
        assert_eq!(a.execute(&req).unwrap(), b.execute(&req).unwrap());
        // and repeat calls on the same instance are stable too
        assert_eq!(a.execute(&req).unwrap().texts, a.execute(&req).unwrap().texts);
    }

    #[test]
    fn different_seeds_or_requests_give_different_texts() {
        let a = MockBackend::new(MockScript::seeded(7));
        let b = MockBackend::new(MockScript::seeded(8));
        let req = request(RequestKind::Generate, "a story about tides", 1);
        assert_ne!(a.execute(&req).unwrap().texts, b.execute(&req).unwrap().texts);
        let other = request(RequestKind::Generate, "a story about embers", 1);
        assert_ne!(a.execute(&req).unwrap().texts, a.execute(&other).unwrap().texts);
    }

    #[test]
    fn batched_samples_are_distinct() {
        let backend = MockBackend::new(MockScript::seeded(3));
        let resp = backend.execute(&request(RequestKind::Generate, "x", 4)).unwrap();
        assert_eq!(resp.texts.len(), 4);
        for i in 0..resp.texts.len() {
            for j in (i + 1)..resp.texts.len() {
                assert_ne!(resp.texts[i], resp.texts[j]);
            }
        }
    }

    #[test]
    fn generated_judge_answers_are_valid_labels() {
        let backend = MockBackend::new(MockScript::seeded(9));
        for i in 0..20 {
            let resp = backend.execute(&request(RequestKind::Judge, &format!("pair {i}"), 1)).unwrap();
            assert!(JUDGE_LABELS.contains(&resp.texts[0].as_str()), "got {:?}", resp.texts[0]);
        }
    }

    #[test]
    fn logprob_constant_is_applied_per_token() {
        let backend = MockBackend::new(MockScript::default().with_logprob(-0.5));
        let resp = backend.execute(&request(RequestKind::Logprob, "one two three", 1)).unwrap();
        let lps = resp.token_logprobs.unwrap();
        assert_eq!(lps.len(), 3);
        assert!(lps.iter().all(|(_, lp)| *lp == -0.5));
    }

    #[test]
    fn script_round_trips_through_json() {
        let script = MockScript::seeded(5)
            .with_rule(None, "needle", MockReply::Text("yes".into()))
            .with_embedding("t", vec![1.0, 0.0]);
        let json = serde_json::to_string(&script).unwrap();
        let back: MockScript = serde_json::from_str(&json).unwrap();
        assert_eq!(back.seed, Some(5));
        assert_eq!(back.rules.len(), 1);
        assert_eq!(back.embeddings["t"], vec![1.0, 0.0]);
    }

    #[test]
    fn script_json_accepts_bare_strings_and_lists() {
        let raw = r#"{
            "seed": 1,
            "defaults": {"judge": "no", "generate": ["A", "B"]},
            "rules": [{"kind": "judge", "contains": "x", "reply": "yes"}]
        }"#;
        let script: MockScript = serde_json::from_str(raw).unwrap();
        let backend = MockBackend::new(script);
        let resp = backend.execute(&request(RequestKind::Generate, "anything", 3)).unwrap();
        assert_eq!(resp.texts, vec!["A".to_string(), "B".to_string(), "A".to_string()]);
    }
}
