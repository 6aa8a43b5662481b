//! Plot judgment: does a continuation already contain a given segment's plot?
//!
//! The judge backend sees the continuation as "Story A" and the single
//! segment as "Story B", thinks briefly, and answers yes / partially / no.
//! Parsing takes the *last* occurrence of any of the three labels, so a
//! rationale that mentions "no clear match... partially" resolves to
//! `partially`. When no label can be found, the judge is reprompted once
//! with an answer-one-word instruction before giving up.
//!
//! Verdicts map to a binary value (yes → 1, else 0) used by default scoring,
//! and to a soft value (yes → 1, partially → 0.5, no → 0) selectable per run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::SegmentedStory;
use crate::error::{Error, Result};
use crate::gateway::{BackendRequest, Gateway, Message, RequestKind, SamplingParams, UsageTotals};
use crate::sampler::ContinuationSet;
use crate::templates::{fill, PromptTemplates};

/// The three-way verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgmentLabel {
    Yes,
    Partially,
    No,
}

impl JudgmentLabel {
    /// Extract the verdict from free-form judge output: case-insensitive,
    /// word-bounded, last occurrence wins.
    pub fn parse(text: &str) -> Option<JudgmentLabel> {
        static PATTERN: OnceLock<Regex> = OnceLock::new();
        let re = PATTERN.get_or_init(|| {
            Regex::new(r"(?i)\b(yes|partially|no)\b").expect("verdict pattern compiles")
        });
        re.find_iter(text).last().map(|m| match m.as_str().to_ascii_lowercase().as_str() {
            "yes" => JudgmentLabel::Yes,
            "partially" => JudgmentLabel::Partially,
            _ => JudgmentLabel::No,
        })
    }

    pub fn binary(self) -> u8 {
        match self {
            JudgmentLabel::Yes => 1,
            _ => 0,
        }
    }

    pub fn soft(self) -> f64 {
        match self {
            JudgmentLabel::Yes => 1.0,
            JudgmentLabel::Partially => 0.5,
            JudgmentLabel::No => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JudgmentLabel::Yes => "yes",
            JudgmentLabel::Partially => "partially",
            JudgmentLabel::No => "no",
        }
    }
}

/// One verdict for the triple (segment `i`, prefix `j`, continuation `k`).
/// `value_binary` and `value_soft` are denormalized from the label so
/// persisted records stay self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub story_id: String,
    pub i: u32,
    pub j: u32,
    pub k: u32,
    pub label: JudgmentLabel,
    pub value_binary: u8,
    pub value_soft: f64,
    pub raw_response: String,
}

impl JudgmentRecord {
    fn new(story_id: &str, i: u32, j: u32, k: u32, label: JudgmentLabel, raw: String) -> Self {
        JudgmentRecord {
            story_id: story_id.to_string(),
            i,
            j,
            k,
            label,
            value_binary: label.binary(),
            value_soft: label.soft(),
            raw_response: raw,
        }
    }
}

fn judge_request(
    model: &str,
    templates: &PromptTemplates,
    segment: &str,
    continuation: &str,
) -> BackendRequest {
    BackendRequest {
        kind: RequestKind::Judge,
        model: model.into(),
        messages: vec![Message::user(fill(
            &templates.judge_user,
            &[("continuation", continuation), ("segment", segment)],
        ))],
        params: SamplingParams::judge(),
    }
}

/// One judgment with the reprompt fallback. Returns the label, the raw
/// transcript (first answer, plus the reprompted answer when used), and the
/// usage the exchange cost.
fn judge_once(
    gateway: &Gateway,
    model: &str,
    templates: &PromptTemplates,
    segment: &str,
    continuation: &str,
) -> Result<(JudgmentLabel, String, UsageTotals)> {
    let mut usage = UsageTotals::default();
    let request = judge_request(model, templates, segment, continuation);
    let response = gateway.complete(&request)?;
    usage.add_response(&response);
    let first = response.texts.first().cloned().unwrap_or_default();
    if let Some(label) = JudgmentLabel::parse(&first) {
        return Ok((label, first, usage));
    }

    // one reprompt: keep the original exchange as context, demand one word
    let mut messages = request.messages.clone();
    messages.push(Message::assistant(&first));
    messages.push(Message::user(&templates.judge_reprompt));
    let retry = BackendRequest {
        kind: RequestKind::Judge,
        model: model.into(),
        messages,
        params: SamplingParams::judge(),
    };
    let response = gateway.complete(&retry)?;
    usage.add_response(&response);
    let second = response.texts.first().cloned().unwrap_or_default();
    let transcript = format!("{first}\n--- reprompt ---\n{second}");
    match JudgmentLabel::parse(&second) {
        Some(label) => Ok((label, transcript, usage)),
        None => Err(Error::JudgeParse { raw: transcript }),
    }
}

/// Judge a single (segment, continuation) pair outside any story context.
/// The record's coordinates are zeroed; matrix coverage comes from
/// [`judge_matrix`].
pub fn plot_entailed(
    segment: &str,
    continuation: &str,
    gateway: &Gateway,
    model: &str,
    templates: &PromptTemplates,
) -> Result<JudgmentRecord> {
    if segment.trim().is_empty() || continuation.trim().is_empty() {
        return Err(Error::Invalid("judge inputs must be nonempty".into()));
    }
    let (label, raw, _) = judge_once(gateway, model, templates, segment, continuation)?;
    Ok(JudgmentRecord::new("", 0, 0, 0, label, raw))
}

/// Judge every later segment against every continuation from every shorter
/// prefix: exactly `K * n(n-1)/2` records, sorted by `(i, j, k)`.
pub fn judge_matrix(
    seg_story: &SegmentedStory,
    sets: &[ContinuationSet],
    gateway: &Gateway,
    model: &str,
    templates: &PromptTemplates,
) -> Result<(Vec<JudgmentRecord>, UsageTotals)> {
    let n = seg_story.n();
    if n < 2 {
        return Err(Error::Invalid("judging needs at least 2 segments".into()));
    }
    if sets.len() != (n - 1) as usize {
        return Err(Error::Invalid(format!(
            "expected continuation sets for j=1..{}, got {} sets",
            n - 1,
            sets.len()
        )));
    }
    for (idx, set) in sets.iter().enumerate() {
        if set.j != (idx + 1) as u32 {
            return Err(Error::Invalid(format!(
                "continuation sets out of order: position {} holds j={}",
                idx + 1,
                set.j
            )));
        }
    }
    let k = sets[0].items.len();
    if k == 0 || sets.iter().any(|s| s.items.len() != k) {
        return Err(Error::Invalid("all continuation sets must share the same nonzero K".into()));
    }

    let mut tasks: Vec<(u32, u32, u32)> = Vec::with_capacity(k * (n as usize) * (n as usize - 1) / 2);
    for i in 2..=n {
        for j in 1..i {
            for kk in 1..=k as u32 {
                tasks.push((i, j, kk));
            }
        }
    }

    let outcomes: Vec<(JudgmentRecord, UsageTotals)> = tasks
        .into_par_iter()
        .map(|(i, j, kk)| {
            let segment = &seg_story.segment(i)?.text;
            let continuation = &sets[(j - 1) as usize].items[(kk - 1) as usize];
            let (label, raw, usage) = judge_once(gateway, model, templates, segment, continuation)?;
            Ok((JudgmentRecord::new(&seg_story.story_id, i, j, kk, label, raw), usage))
        })
        .collect::<Result<_>>()?;

    let mut usage = UsageTotals::default();
    let mut records = Vec::with_capacity(outcomes.len());
    for (record, u) in outcomes {
        usage.merge(&u);
        records.push(record);
    }
    records.sort_by_key(|r| (r.i, r.j, r.k));
    Ok((records, usage))
}

// ─────────────────────────────────────────────────────────────────────────────
// Persistence: judgments/<story_id>.jsonl
// ─────────────────────────────────────────────────────────────────────────────

pub fn write_judgments(root: &Path, story_id: &str, records: &[JudgmentRecord]) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let path = root.join(format!("{story_id}.jsonl"));
    let mut out = Vec::new();
    for record in records {
        writeln!(out, "{}", serde_json::to_string(record)?)?;
    }
    fs::write(&path, out)?;
    Ok(path)
}

pub fn read_judgments(path: &Path) -> Result<Vec<JudgmentRecord>> {
    let raw = fs::read_to_string(path)?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
