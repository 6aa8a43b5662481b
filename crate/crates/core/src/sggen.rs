//! Score-guided story growth: at every step, sample several candidate next
//! segments, score each one against continuations already sampled from the
//! accepted prefixes, and keep the candidate whose plot is least echoed.
//!
//! Continuation sets are sampled once per prefix and reused across all
//! candidates (and later steps), so step `i` costs one candidate batch, one
//! new continuation set, and `M·K'·(i−1)` judgments.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{from_segment_texts, words, AuthorKind, RawStory, SegmentedStory, Source};
use crate::error::{Error, Result};
use crate::gateway::{BackendRequest, Gateway, Message, RequestKind, SamplingParams};
use crate::judge::plot_entailed;
use crate::sampler::{sample_continuations_of_text, ContinuationSet};
use crate::scorer::{echo_score, sui_generis, ScoreConfig};
use crate::templates::{fill, PromptTemplates};

/// Knobs for guided generation. `k_prime` replaces the scoring config's `k`
/// during growth: it is the number of continuations sampled per prefix when
/// scoring candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Candidate next segments sampled per step.
    pub m: u32,
    /// Continuations per prefix used to score candidates.
    pub k_prime: u32,
    pub max_segments: u32,
    pub segment_width: u32,
    pub score: ScoreConfig,
    /// Seeds the uniform first-segment pick (the only sampling decision the
    /// scorer cannot make).
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            m: 5,
            k_prime: 5,
            max_segments: 10,
            segment_width: 50,
            score: ScoreConfig::default(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("candidate count m must be at least 1".into()));
        }
        if self.k_prime == 0 {
            return Err(Error::Config("continuation count k' must be at least 1".into()));
        }
        if self.max_segments == 0 {
            return Err(Error::Config("max_segments must be at least 1".into()));
        }
        if self.segment_width == 0 {
            return Err(Error::Config("segment width must be at least 1".into()));
        }
        self.effective_score().validate()
    }

    /// The scoring config actually applied during growth.
    pub fn effective_score(&self) -> ScoreConfig {
        ScoreConfig { k: self.k_prime, ..self.score }
    }
}

/// What happened at one growth step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based step number = segment position being filled.
    pub step: u32,
    /// Score of every candidate, in sampling order. `None` for the first
    /// step (no prefixes yet) and for empty candidates.
    pub candidate_sg: Vec<Option<f64>>,
    /// 0-based index of the accepted candidate.
    pub accepted_index: u32,
    pub accepted_sg: Option<f64>,
    /// True when the story ended here (short sample or max_segments).
    pub ended: bool,
}

/// A grown story with its per-step selection trace.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedStory {
    pub story: RawStory,
    pub segmented: SegmentedStory,
    pub trace: Vec<StepTrace>,
}

#[derive(Serialize)]
struct PartialStory<'a> {
    story_id: &'a str,
    prompt: &'a str,
    segments: &'a [String],
    trace: &'a [StepTrace],
}

fn persist_partial(
    path: &Path,
    story_id: &str,
    prompt: &str,
    segments: &[String],
    trace: &[StepTrace],
) -> Result<()> {
    let partial = PartialStory { story_id, prompt, segments, trace };
    let mut bytes = serde_json::to_vec_pretty(&partial)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn story_id_for(prompt: &str, gen_model: &str, config: &GenConfig) -> String {
    #[derive(Serialize)]
    struct Identity<'a> {
        prompt: &'a str,
        gen_model: &'a str,
        config: &'a GenConfig,
    }
    let canonical = serde_json::to_value(Identity { prompt, gen_model, config })
        .expect("identity serializes")
        .to_string();
    format!("sg-gen-{}", &hex::encode(Sha256::digest(canonical.as_bytes()))[..8])
}

/// First `width` words of a sampled text, plus whether the sample ran short
/// (a short sample marks the natural end of the story).
fn truncate_words(text: &str, width: u32) -> (String, bool) {
    let tokens = words(text);
    let short = tokens.len() < width as usize;
    let take = tokens.len().min(width as usize);
    (tokens[..take].join(" "), short)
}

/// Sample `m` candidate next segments: from the story template when nothing
/// is accepted yet, from the continuation template afterwards. Fully
/// stochastic decoding so candidates actually differ.
fn sample_candidates(
    prompt: &str,
    accepted: &[String],
    gateway: &Gateway,
    model: &str,
    templates: &PromptTemplates,
    config: &GenConfig,
) -> Result<Vec<String>> {
    let base = SamplingParams {
        temperature: 1.0,
        top_p: 1.0,
        max_tokens: 1200,
        n_samples: config.m,
        seed: None,
    };
    let messages = if accepted.is_empty() {
        vec![
            Message::system(&templates.story_system),
            Message::user(fill(&templates.story_user, &[("prompt", prompt)])),
        ]
    } else {
        let prefix = accepted.join(" ");
        vec![
            Message::system(&templates.continuation_system),
            Message::user(fill(&templates.continuation_user, &[
                ("prompt", prompt),
                ("prefix", &prefix),
            ])),
        ]
    };
    let request = BackendRequest {
        kind: RequestKind::Generate,
        model: model.to_string(),
        messages,
        params: base,
    };
    if gateway.supports_batch() {
        let response = gateway.complete(&request)?;
        if response.texts.len() != config.m as usize {
            return Err(Error::MalformedPayload {
                message: format!("expected {} candidates, got {}", config.m, response.texts.len()),
                payload: format!("texts: {}", response.texts.len()),
            });
        }
        Ok(response.texts)
    } else {
        (0..config.m)
            .map(|draw| {
                let mut single = request.clone();
                single.params.n_samples = 1;
                single.params.seed = Some(config.seed.wrapping_add(draw as u64));
                let response = gateway.complete(&single)?;
                response
                    .texts
                    .first()
                    .cloned()
                    .ok_or_else(|| Error::MalformedPayload {
                        message: "backend returned no candidate text".into(),
                        payload: "texts: 0".into(),
                    })
            })
            .collect()
    }
}

/// Grow a story for `prompt`, keeping the highest-scoring candidate at each
/// step (ties to the lowest index; the seeded uniform pick covers the first
/// segment, which has no score). On failure the partial story and trace are
/// written to `partial_out` (when given) before the error propagates.
#[allow(clippy::too_many_arguments)]
pub fn generate_sg_guided(
    prompt: &str,
    gen_gateway: &Gateway,
    judge_gateway: &Gateway,
    gen_model: &str,
    judge_model: &str,
    templates: &PromptTemplates,
    config: &GenConfig,
    partial_out: Option<&Path>,
) -> Result<GeneratedStory> {
    config.validate()?;
    if prompt.trim().is_empty() {
        return Err(Error::Invalid("generation prompt must be nonempty".into()));
    }
    let score_cfg = config.effective_score();
    let story_id = story_id_for(prompt, gen_model, config);

    let mut accepted: Vec<String> = Vec::new();
    let mut trace: Vec<StepTrace> = Vec::new();
    let mut sets: Vec<ContinuationSet> = Vec::new(); // sets[j-1] conditions on prefix 1..=j

    let grow = |accepted: &mut Vec<String>,
                trace: &mut Vec<StepTrace>,
                sets: &mut Vec<ContinuationSet>|
     -> Result<()> {
        for step in 1..=config.max_segments {
            let sampled =
                sample_candidates(prompt, accepted, gen_gateway, gen_model, templates, config)?;
            let candidates: Vec<(String, bool)> =
                sampled.iter().map(|t| truncate_words(t, config.segment_width)).collect();

            // continuation sets for every existing prefix, sampled lazily:
            // only j = step−1 is new, earlier sets carry over
            while (sets.len() as u32) < step.saturating_sub(1) {
                let j = sets.len() as u32 + 1;
                let prefix = accepted[..j as usize].join(" ");
                sets.push(sample_continuations_of_text(
                    &story_id,
                    prompt,
                    &prefix,
                    j,
                    config.k_prime,
                    gen_gateway,
                    gen_model,
                    None,
                    templates,
                )?);
            }

            let candidate_sg: Vec<Option<f64>> = if step == 1 {
                vec![None; candidates.len()]
            } else {
                let mut tasks = Vec::new();
                for (c, (text, _)) in candidates.iter().enumerate() {
                    if text.is_empty() {
                        continue;
                    }
                    for (j_idx, set) in sets.iter().enumerate() {
                        for k_idx in 0..set.items.len() {
                            tasks.push((c, j_idx, k_idx));
                        }
                    }
                }
                let verdicts: Vec<(usize, usize, f64)> = tasks
                    .par_iter()
                    .map(|&(c, j_idx, k_idx)| {
                        let record = plot_entailed(
                            &candidates[c].0,
                            &sets[j_idx].items[k_idx],
                            judge_gateway,
                            judge_model,
                            templates,
                        )?;
                        let value = if score_cfg.soft {
                            record.value_soft
                        } else {
                            record.value_binary as f64
                        };
                        Ok((c, j_idx, value))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut counts = vec![vec![0.0f64; sets.len()]; candidates.len()];
                for (c, j_idx, value) in verdicts {
                    counts[c][j_idx] += value;
                }
                candidates
                    .iter()
                    .enumerate()
                    .map(|(c, (text, _))| {
                        if text.is_empty() {
                            return Ok(None);
                        }
                        let ps = counts[c]
                            .iter()
                            .map(|&count| echo_score(count, config.k_prime, score_cfg.epsilon))
                            .collect::<Result<Vec<_>>>()?;
                        sui_generis(&ps, score_cfg.lambda)
                    })
                    .collect::<Result<Vec<_>>>()?
            };

            let accepted_index = if step == 1 {
                let eligible: Vec<usize> = candidates
                    .iter()
                    .enumerate()
                    .filter(|(_, (text, _))| !text.is_empty())
                    .map(|(idx, _)| idx)
                    .collect();
                if eligible.is_empty() {
                    return Err(Error::Invalid("every sampled candidate was empty".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                eligible[rng.random_range(0..eligible.len())]
            } else {
                let mut best: Option<(usize, f64)> = None;
                for (idx, sg) in candidate_sg.iter().enumerate() {
                    if let Some(value) = sg {
                        // strict comparison keeps the earliest of tied maxima
                        if best.map_or(true, |(_, top)| *value > top) {
                            best = Some((idx, *value));
                        }
                    }
                }
                best.ok_or_else(|| Error::Invalid("every sampled candidate was empty".into()))?.0
            };

            let (text, short) = candidates[accepted_index].clone();
            accepted.push(text);
            let ended = short || step == config.max_segments;
            trace.push(StepTrace {
                step,
                accepted_index: accepted_index as u32,
                accepted_sg: candidate_sg[accepted_index],
                candidate_sg,
                ended,
            });
            if ended {
                break;
            }
        }
        Ok(())
    };

    if let Err(err) = grow(&mut accepted, &mut trace, &mut sets) {
        if let Some(path) = partial_out {
            let _ = persist_partial(path, &story_id, prompt, &accepted, &trace);
        }
        return Err(Error::for_story(&story_id, err));
    }

    let story = RawStory {
        id: story_id.clone(),
        prompt: prompt.to_string(),
        body: accepted.join(" "),
        source: Source::Generated,
        author_kind: AuthorKind::Model,
        model: Some(gen_model.to_string()),
    };
    story.validate().map_err(|e| Error::for_story(&story_id, e))?;
    let segmented = from_segment_texts(&story_id, config.segment_width, &accepted)?;
    Ok(GeneratedStory { story, segmented, trace })
}
