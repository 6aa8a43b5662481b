//! Plot-uniqueness scoring for stories.
//!
//! The core idea: split a story into fixed-width word segments, and for
//! every prefix of the story sample `K` alternative continuations from a
//! language model. A judge model then checks, for each later segment,
//! whether its plot already shows up in each alternative continuation
//! ("echoes"). A segment whose plot the model keeps reinventing from short
//! prefixes is predictable; a segment that almost never gets echoed is
//! unique to the story. The per-segment score averages `−ln p` of those
//! echo likelihoods with exponentially decaying weight on longer prefixes,
//! so cheap early echoes hurt the most.
//!
//! Module map:
//! - [`corpus`]: story records, loading, and word segmentation
//! - [`gateway`]: backend abstraction with caching, retries, budgets, and a
//!   scriptable offline mock
//! - [`templates`]: the prompt set and its stable hash
//! - [`sampler`]: story generation and per-prefix continuation sampling
//! - [`judge`]: plot-entailment verdicts over (segment, continuation) pairs
//! - [`scorer`]: echo matrices, per-segment scores, drops, and aggregates
//! - [`baselines`]: reference diversity/similarity metrics and statistics
//! - [`pipeline`]: one-story end-to-end scoring with persistence
//! - [`sggen`]: score-guided segment-by-segment story generation
//! - [`report`]: run directories, manifests, figures, and tables

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod gateway;
pub mod judge;
pub mod pipeline;
pub mod report;
pub mod sampler;
pub mod scorer;
pub mod sggen;
pub mod templates;

pub use error::{Error, Result};
