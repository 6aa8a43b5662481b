//! Story generation and alternative-continuation sampling.
//!
//! For every prefix of `j` segments, `K` continuations are drawn conditioned
//! on exactly that prefix — never on anything later in the story. When a
//! backend supports batched sampling the `K` draws ride one request; when it
//! does not, each draw gets its own request stamped with a distinct seed so
//! the cache does not collapse the `K` draws into one entry.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AuthorKind, RawStory, SegmentedStory, Source};
use crate::error::{Error, Result};
use crate::gateway::{BackendRequest, Gateway, Message, RequestKind, SamplingParams, UsageTotals};
use crate::templates::{fill, PromptTemplates};

/// The `K` alternative continuations sampled for one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuationSet {
    pub story_id: String,
    /// Prefix length in segments; the set conditions on segments `1..=j`.
    pub j: u32,
    /// Backend model that produced the items.
    pub model: String,
    pub items: Vec<String>,
    /// Logical sampling configuration (the per-draw seeds stamped on the
    /// unbatched path are a transport detail and are not recorded here).
    pub params: SamplingParams,
    /// Tokens and calls spent producing this set; zero-cost on a warm cache
    /// is *not* reflected here — cached responses report their stored usage.
    pub usage: UsageTotals,
}

/// Generate one story from a prompt. Defaults to fully stochastic decoding.
pub fn generate_story(
    prompt: &str,
    gateway: &Gateway,
    model: &str,
    params: Option<SamplingParams>,
    templates: &PromptTemplates,
) -> Result<RawStory> {
    if prompt.trim().is_empty() {
        return Err(Error::Invalid("story prompt must be nonempty".into()));
    }
    let params = params.unwrap_or_else(SamplingParams::story_generation);
    let request = BackendRequest {
        kind: RequestKind::Generate,
        model: model.into(),
        messages: vec![
            Message::system(&templates.story_system),
            Message::user(fill(&templates.story_user, &[("prompt", prompt)])),
        ],
        params: SamplingParams { n_samples: 1, ..params },
    };
    let response = gateway.complete(&request)?;
    let body = response.texts.first().cloned().unwrap_or_default();
    if body.split_whitespace().next().is_none() {
        return Err(Error::MalformedPayload {
            message: "backend produced an empty story".into(),
            payload: body,
        });
    }
    Ok(RawStory {
        id: format!("gen-{}", &request.request_hash()[..12]),
        prompt: prompt.to_string(),
        body,
        source: Source::Generated,
        author_kind: AuthorKind::Model,
        model: Some(model.to_string()),
    })
}

/// Build the continuation request for a literal prefix text. Exposed for
/// callers that grow a story segment by segment and need continuations of
/// the *entire* text so far (which is not a proper prefix of any story yet).
pub fn continuation_request(
    prompt: &str,
    prefix: &str,
    model: &str,
    params: SamplingParams,
    templates: &PromptTemplates,
) -> BackendRequest {
    let user = fill(&templates.continuation_user, &[("prompt", prompt), ("prefix", prefix)]);
    BackendRequest {
        kind: RequestKind::Generate,
        model: model.into(),
        messages: vec![
            Message::system(&templates.continuation_system),
            Message::user(user.trim_start().to_string()),
        ],
        params,
    }
}

/// Sample `k` continuations of the given literal prefix text.
pub fn sample_continuations_of_text(
    story_id: &str,
    prompt: &str,
    prefix: &str,
    j: u32,
    k: u32,
    gateway: &Gateway,
    model: &str,
    params: Option<SamplingParams>,
    templates: &PromptTemplates,
) -> Result<ContinuationSet> {
    if k == 0 {
        return Err(Error::Invalid("continuation count k must be at least 1".into()));
    }
    if prefix.trim().is_empty() {
        return Err(Error::Invalid("continuation prefix must be nonempty".into()));
    }
    let base = params.unwrap_or_else(|| SamplingParams::continuation(k));
    let base = SamplingParams { n_samples: k, ..base };
    let mut usage = UsageTotals::default();

    let items: Vec<String> = if gateway.supports_batch() {
        let request = continuation_request(prompt, prefix, model, base, templates);
        let response = gateway.complete(&request)?;
        usage.add_response(&response);
        if response.texts.len() != k as usize {
            return Err(Error::MalformedPayload {
                message: format!("expected {k} continuations, got {}", response.texts.len()),
                payload: String::new(),
            });
        }
        response.texts
    } else {
        // one request per draw, each with a distinct seed so requests (and
        // cache entries) stay distinct
        let mut items = Vec::with_capacity(k as usize);
        for draw in 0..k as u64 {
            let per_draw = SamplingParams {
                n_samples: 1,
                seed: Some(base.seed.unwrap_or(0).wrapping_add(draw)),
                ..base
            };
            let request = continuation_request(prompt, prefix, model, per_draw, templates);
            let response = gateway.complete(&request)?;
            usage.add_response(&response);
            items.push(response.texts.into_iter().next().unwrap_or_default());
        }
        items
    };

    Ok(ContinuationSet { story_id: story_id.to_string(), j, model: model.to_string(), items, params: base, usage })
}

/// Sample `k` continuations of the prefix made of segments `1..=j`.
pub fn sample_continuations(
    seg_story: &SegmentedStory,
    prompt: &str,
    j: u32,
    k: u32,
    gateway: &Gateway,
    model: &str,
    params: Option<SamplingParams>,
    templates: &PromptTemplates,
) -> Result<ContinuationSet> {
    let prefix = seg_story.prefix(j)?;
    sample_continuations_of_text(
        &seg_story.story_id,
        prompt,
        &prefix,
        j,
        k,
        gateway,
        model,
        params,
        templates,
    )
}

/// Sample continuation sets for every prefix `j = 1..n-1`, in parallel, and
/// return them ordered by `j`.
pub fn sample_all_prefixes(
    seg_story: &SegmentedStory,
    prompt: &str,
    k: u32,
    gateway: &Gateway,
    model: &str,
    params: Option<SamplingParams>,
    templates: &PromptTemplates,
) -> Result<Vec<ContinuationSet>> {
    let n = seg_story.n();
    if n < 2 {
        return Err(Error::Invalid(format!(
            "story '{}' has {n} segment(s); at least 2 are needed",
            seg_story.story_id
        )));
    }
    (1..n)
        .into_par_iter()
        .map(|j| sample_continuations(seg_story, prompt, j, k, gateway, model, params, templates))
        .collect()
}

// ─────────────────────────────────────────────────────────────────────────────
// Persistence: continuations/<story_id>/<j>.jsonl
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct SetMeta {
    story_id: String,
    j: u32,
    model: String,
    k: u32,
    params: SamplingParams,
}

#[derive(Serialize, Deserialize)]
struct SetItem {
    k: u32,
    text: String,
}

/// Write one continuation set under `root/<story_id>/<j>.jsonl`: a meta line
/// followed by one line per item (1-based `k`).
pub fn write_continuations(root: &Path, set: &ContinuationSet) -> Result<PathBuf> {
    let dir = root.join(&set.story_id);
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.jsonl", set.j));
    let mut out = Vec::new();
    let meta = SetMeta {
        story_id: set.story_id.clone(),
        j: set.j,
        model: set.model.clone(),
        k: set.items.len() as u32,
        params: set.params,
    };
    writeln!(out, "{}", serde_json::to_string(&meta)?)?;
    for (idx, text) in set.items.iter().enumerate() {
        writeln!(out, "{}", serde_json::to_string(&SetItem { k: (idx + 1) as u32, text: text.clone() })?)?;
    }
    fs::write(&path, out)?;
    Ok(path)
}

/// Read a continuation set written by [`write_continuations`]. The recorded
/// usage is zero: replaying from disk costs nothing.
pub fn read_continuations(path: &Path) -> Result<ContinuationSet> {
    let raw = fs::read_to_string(path)?;
    let mut lines = raw.lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| Error::Invalid(format!("{}: empty continuation file", path.display())))?;
    let meta: SetMeta = serde_json::from_str(meta_line)?;
    let mut items = Vec::with_capacity(meta.k as usize);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let item: SetItem = serde_json::from_str(line)?;
        if item.k as usize != items.len() + 1 {
            return Err(Error::Invalid(format!(
                "{}: continuation items out of order (saw k={}, expected {})",
                path.display(),
                item.k,
                items.len() + 1
            )));
        }
        items.push(item.text);
    }
    if items.len() != meta.k as usize {
        return Err(Error::Invalid(format!(
            "{}: expected {} items, found {}",
            path.display(),
            meta.k,
            items.len()
        )));
    }
    Ok(ContinuationSet {
        story_id: meta.story_id,
        j: meta.j,
        model: meta.model,
        items,
        params: meta.params,
        usage: UsageTotals::default(),
    })
}
