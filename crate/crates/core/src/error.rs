//! Error taxonomy shared across the workspace.
//!
//! Errors are grouped by what the caller can do about them: configuration and
//! argument problems are programming/usage mistakes, corpus errors point at a
//! specific input line, transport errors carry a `retryable` flag the gateway
//! uses to drive backoff, and budget exhaustion is distinguished so drivers
//! can stop cleanly instead of treating it as a backend outage.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Invalid configuration value (bad lambda, epsilon out of range, ...).
    #[error("config: {0}")]
    Config(String),

    /// Corpus file problems: malformed lines, duplicate ids, empty bodies.
    #[error("corpus: {0}")]
    Corpus(String),

    /// An argument violated an operation precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Credentials for a backend are not present in the environment.
    #[error("backend '{backend}': missing API key environment variable {var}")]
    MissingEnv { backend: String, var: String },

    /// Wire-level failure talking to a backend. `retryable` marks transient
    /// conditions (timeouts, rate limits, server errors) worth backing off on.
    #[error("backend transport: {message}")]
    Transport { message: String, retryable: bool },

    /// The backend answered, but with something we cannot interpret.
    #[error("malformed backend payload: {message}; raw payload: {payload}")]
    MalformedPayload { message: String, payload: String },

    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),

    /// The mock backend had no scripted answer for a request.
    #[error("no scripted response for {kind} request {request_hash}")]
    Unscripted { kind: String, request_hash: String },

    /// Judge output could not be reduced to a verdict even after reprompting.
    #[error("judge verdict unparseable after reprompt; raw response: {raw}")]
    JudgeParse { raw: String },

    /// Wrapper adding story context to an error raised mid-pipeline.
    #[error("story '{story_id}': {source}")]
    Story {
        story_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the id of the story being processed.
    pub fn for_story(story_id: impl Into<String>, source: Error) -> Self {
        Error::Story { story_id: story_id.into(), source: Box::new(source) }
    }

    /// Strip `Story` context wrappers and return the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Story { source, .. } => source.root(),
            other => other,
        }
    }

    /// Whether a retry may plausibly succeed (transient transport trouble,
    /// rate limiting, server-side hiccups).
    pub fn is_retryable(&self) -> bool {
        matches!(self.root(), Error::Transport { retryable: true, .. })
    }

    /// Whether this counts as a backend failure, as opposed to local misuse.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::MissingEnv { .. }
                | Error::Transport { .. }
                | Error::MalformedPayload { .. }
                | Error::Unscripted { .. }
                | Error::JudgeParse { .. }
        )
    }

    /// Whether the run stopped because a spending limit was reached.
    pub fn is_budget_exhausted(&self) -> bool {
        matches!(self.root(), Error::BudgetExhausted(_))
    }
}
