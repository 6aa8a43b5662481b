//! Reference diversity and similarity metrics for comparing against the
//! echo-based scores: compression ratio, self-BLEU, n-gram diversity,
//! ROUGE-L homogenization, embedding cosine similarity, perplexity, and
//! Spearman rank correlation.
//!
//! All token-level metrics share the corpus word tokenizer and lowercase
//! tokens for comparison only; inputs are never mutated.

use std::collections::HashMap;
use std::io::Write as _;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::Serialize;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::words;
use crate::error::{Error, Result};
use crate::gateway::{BackendRequest, Gateway, Message, RequestKind, SamplingParams};

/// One computed metric, ready for tabular output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricResult {
    pub metric: String,
    pub value: f64,
    /// Content digest of the input texts, for joining result rows back to
    /// their inputs.
    pub inputs_digest: String,
    /// Metric-specific knobs (n-gram order, smoothing, ...).
    pub parameters: serde_json::Value,
}

impl MetricResult {
    pub fn new(
        metric: impl Into<String>,
        value: f64,
        inputs_digest: impl Into<String>,
        parameters: serde_json::Value,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Invalid(format!("metric value must be finite, got {value}")));
        }
        Ok(MetricResult {
            metric: metric.into(),
            value,
            inputs_digest: inputs_digest.into(),
            parameters,
        })
    }
}

/// Order-insensitive digest of a set of texts (length-prefixed, so distinct
/// lists never collide by concatenation).
pub fn inputs_digest<S: AsRef<str>>(texts: &[S]) -> String {
    let mut sorted: Vec<&str> = texts.iter().map(|t| t.as_ref()).collect();
    sorted.sort_unstable();
    let mut hasher = Sha256::new();
    for text in sorted {
        hasher.update((text.len() as u64).to_be_bytes());
        hasher.update(text.as_bytes());
    }
    hex::encode(hasher.finalize())
}

fn metric_tokens(text: &str) -> Vec<String> {
    words(text).iter().map(|w| w.to_lowercase()).collect()
}

/// Bytes of the whole collection ÷ bytes of its DEFLATE-compressed form.
/// Repetitive collections compress far below their raw size and score high;
/// high-entropy text stays near 1. Texts are sorted before concatenation so
/// the ratio is invariant under permutation of the list, and a stored-block
/// fallback pins the ratio at ≥ 1 when compression cannot help.
pub fn compression_ratio<S: AsRef<str>>(texts: &[S]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Invalid("compression ratio requires at least one text".into()));
    }
    let mut sorted: Vec<&str> = texts.iter().map(|t| t.as_ref()).collect();
    sorted.sort_unstable();
    let joined = sorted.join("\n");
    if joined.is_empty() {
        return Err(Error::Invalid("compression ratio requires nonempty text".into()));
    }
    let mut encoder = DeflateEncoder::new(Vec::new(), Compression::default());
    encoder.write_all(joined.as_bytes())?;
    let compressed = encoder.finish()?;
    let original_len = joined.len() as f64;
    let compressed_len = (compressed.len() as f64).min(original_len);
    Ok(original_len / compressed_len)
}

/// Zero-match handling for BLEU n-gram precisions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Smoothing {
    /// Any zero precision zeroes the whole score.
    Off,
    /// Replace zero match counts with this epsilon (Chen & Cherry method 1).
    Epsilon(f64),
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize, smoothing: Smoothing) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_precision_sum = 0.0f64;
    for n in 1..=max_n {
        let cand_counts = ngram_counts(candidate, n);
        let total: u64 = cand_counts.values().sum();
        if total == 0 {
            // candidate shorter than n words: no precision of this order
            return 0.0;
        }
        let mut clipped = 0u64;
        for (gram, &count) in &cand_counts {
            let max_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        let numerator = match (clipped, smoothing) {
            (0, Smoothing::Off) => return 0.0,
            (0, Smoothing::Epsilon(eps)) => eps,
            (c, _) => c as f64,
        };
        log_precision_sum += (numerator / total as f64).ln();
    }
    let geo_mean = (log_precision_sum / max_n as f64).exp();

    // brevity penalty against the closest reference length (ties → shorter)
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * geo_mean
}

/// Mean BLEU of each text against all the others as references. High values
/// mean the collection repeats itself.
pub fn self_bleu<S: AsRef<str>>(texts: &[S], max_n: usize, smoothing: Smoothing) -> Result<f64> {
    if texts.len() < 2 {
        return Err(Error::Invalid("self-BLEU requires at least two texts".into()));
    }
    if max_n == 0 {
        return Err(Error::Invalid("self-BLEU requires max_n >= 1".into()));
    }
    if let Smoothing::Epsilon(eps) = smoothing {
        if !eps.is_finite() || eps <= 0.0 {
            return Err(Error::Invalid(format!("smoothing epsilon must be positive, got {eps}")));
        }
    }
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| metric_tokens(t.as_ref())).collect();
    let mut sum = 0.0f64;
    for (idx, candidate) in tokenized.iter().enumerate() {
        let references: Vec<Vec<String>> = tokenized
            .iter()
            .enumerate()
            .filter(|&(other, _)| other != idx)
            .map(|(_, r)| r.clone())
            .collect();
        sum += bleu(candidate, &references, max_n, smoothing);
    }
    Ok(sum / texts.len() as f64)
}

pub const SELF_BLEU_MAX_N: usize = 4;

/// Unique n-grams ÷ total n-grams, pooled across the texts (n-grams never
/// span text boundaries).
pub fn ngram_diversity<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Invalid("n-gram diversity requires n >= 1".into()));
    }
    let mut unique: HashMap<Vec<String>, ()> = HashMap::new();
    let mut total = 0u64;
    for text in texts {
        let tokens = metric_tokens(text.as_ref());
        if tokens.len() >= n {
            for gram in tokens.windows(n) {
                total += 1;
                unique.entry(gram.to_vec()).or_insert(());
            }
        }
    }
    if total == 0 {
        return Err(Error::Invalid(format!(
            "n-gram diversity requires at least {n} words of input"
        )));
    }
    Ok(unique.len() as f64 / total as f64)
}

fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // rolling single-row DP: O(len(b)) memory
    let mut row = vec![0usize; b.len() + 1];
    for token_a in a {
        let mut diagonal = 0usize;
        for (col, token_b) in b.iter().enumerate() {
            let above = row[col + 1];
            row[col + 1] =
                if token_a == token_b { diagonal + 1 } else { above.max(row[col]) };
            diagonal = above;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 between two texts: harmonic mean of LCS-based precision and
/// recall over word tokens.
pub fn rouge_l_f1(a: &str, b: &str) -> f64 {
    let ta = metric_tokens(a);
    let tb = metric_tokens(b);
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let lcs = lcs_length(&ta, &tb) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / ta.len() as f64;
    let recall = lcs / tb.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Mean ROUGE-L F1 over all ordered pairs of distinct texts. High values
/// mean the texts retell each other.
pub fn homogenization_rouge_l<S: AsRef<str>>(texts: &[S]) -> Result<f64> {
    if texts.len() < 2 {
        return Err(Error::Invalid("homogenization requires at least two texts".into()));
    }
    let mut sum = 0.0f64;
    let mut pairs = 0u64;
    for (i, a) in texts.iter().enumerate() {
        for (j, b) in texts.iter().enumerate() {
            if i != j {
                sum += rouge_l_f1(a.as_ref(), b.as_ref());
                pairs += 1;
            }
        }
    }
    Ok(sum / pairs as f64)
}

/// Cosine similarity of the two texts' unit-norm embeddings.
pub fn embedding_similarity(
    text_a: &str,
    text_b: &str,
    gateway: &Gateway,
    model: &str,
) -> Result<f64> {
    let vectors = gateway.embed(model, &[text_a, text_b])?;
    let dot: f64 = vectors[0].iter().zip(&vectors[1]).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// `exp(−mean token logprob)` of the text under the backend's model
/// (natural log). Lower is more predictable.
pub fn perplexity(text: &str, gateway: &Gateway, model: &str) -> Result<f64> {
    if text.trim().is_empty() {
        return Err(Error::Invalid("perplexity requires nonempty text".into()));
    }
    let request = BackendRequest {
        kind: RequestKind::Logprob,
        model: model.to_string(),
        messages: vec![Message::user(text)],
        params: SamplingParams::fixed(),
    };
    let response = gateway.complete(&request)?;
    let logprobs = response.token_logprobs.unwrap_or_default();
    if logprobs.is_empty() {
        return Err(Error::MalformedPayload {
            message: "backend returned no token logprobs".into(),
            payload: format!("texts: {:?}", response.texts),
        });
    }
    let mean = logprobs.iter().map(|(_, lp)| lp).sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Spearman rank correlation with its two-sided p-value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Average ranks, 1-based; tied values share the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0f64; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let mean_rank = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = mean_rank;
        }
        start = end + 1;
    }
    ranks
}

/// Rank correlation of two equal-length samples (average ranks for ties),
/// with a two-sided p-value from the t approximation on n−2 degrees of
/// freedom. Constant inputs have undefined rank order and are rejected.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<SpearmanResult> {
    if xs.len() != ys.len() {
        return Err(Error::Invalid(format!(
            "rank correlation requires equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Invalid("rank correlation requires at least 3 pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("rank correlation requires finite values".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut sum_xy = 0.0f64;
    let mut sum_xx = 0.0f64;
    let mut sum_yy = 0.0f64;
    for (a, b) in rx.iter().zip(&ry) {
        let dx = a - mean;
        let dy = b - mean;
        sum_xy += dx * dy;
        sum_xx += dx * dx;
        sum_yy += dy * dy;
    }
    if sum_xx == 0.0 || sum_yy == 0.0 {
        return Err(Error::Invalid(
            "rank correlation is undefined for constant input".into(),
        ));
    }
    // single square root keeps rho exactly ±1 on perfectly (anti)aligned ranks
    let rho = sum_xy / (sum_xx * sum_yy).sqrt();

    let df = n - 2.0;
    let denom = 1.0 - rho * rho;
    let p_value = if denom <= 0.0 {
        0.0
    } else {
        let t = rho * (df / denom).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(SpearmanResult { rho, p_value: p_value.clamp(0.0, 1.0), n: xs.len() })
}
