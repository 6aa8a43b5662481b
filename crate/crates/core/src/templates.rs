//! Prompt templates for story generation, continuation sampling, and plot
//! judging.
//!
//! Templates are plain data filled by `{name}` placeholder substitution.
//! Every run records the hash of the template set it used, so two runs are
//! comparable only when their wording matches exactly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The full set of templates a run uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    /// System line for whole-story generation.
    pub story_system: String,
    /// User content for whole-story generation; `{prompt}` placeholder.
    pub story_user: String,
    /// System line for continuation sampling.
    pub continuation_system: String,
    /// User content for continuation sampling; `{prompt}` and `{prefix}`
    /// placeholders. The prefix is embedded verbatim so the backend continues
    /// the story rather than rewriting it.
    pub continuation_user: String,
    /// User content for the plot judgment; `{continuation}` and `{segment}`
    /// placeholders. The judge must end with one of: yes, partially, no.
    pub judge_user: String,
    /// Follow-up sent when the judge's first answer has no parseable verdict.
    pub judge_reprompt: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            story_system: "You are a fiction writer. Write a complete short story for the \
                           prompt; output only the story."
                .into(),
            story_user: "{prompt}".into(),
            continuation_system: "You are a fiction writer. Continue the story naturally to a \
                                  full ending; output only the continuation."
                .into(),
            continuation_user: "{prompt}\n\n{prefix}".into(),
            judge_user: "Story A:\n{continuation}\n\nStory B:\n{segment}\n\nDoes Story A \
                         contain the plot element described in Story B, possibly paraphrased \
                         or in a different position? Think briefly, then answer yes, \
                         partially, or no."
                .into(),
            judge_reprompt: "Answer with exactly one word: yes, partially, or no.".into(),
        }
    }
}

impl PromptTemplates {
    /// Hex digest of the canonical JSON form; recorded in run manifests.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("templates serialize");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

/// Replace each `{name}` placeholder with its substitution. Placeholders
/// without a substitution are left untouched.
pub fn fill(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in substitutions {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
