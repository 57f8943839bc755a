//! Scoring providers: sources of token-level log-probabilities.
//!
//! A provider scores a text either *bare* (the text alone) or
//! *contextualized* (the text appended to a prior context, joined by the
//! provider's separator). Scores are natural-log probabilities straight
//! off the wire; base conversion happens once, in the estimator.
//!
//! Implementations:
//! - [`NGramProvider`] — deterministic local n-gram model (whitespace
//!   tokenization, enumerable probabilities); the test oracle.
//! - [`RemoteProvider`] — OpenAI-compatible `/completions` endpoint with
//!   echoed prompt logprobs.
//! - [`CachedProvider`] — persistent on-disk cache around any provider.
//! - [`ReplayProvider`] — returns pre-recorded entropies; used to feed
//!   published measurements through the downstream pipeline.

mod cache;
mod ngram;
mod remote;
mod replay;
mod tokenize;

pub use cache::{cache_clear, cache_stats, cache_verify, CacheStats, CacheVerifyReport, CachedProvider};
pub use ngram::{train_ngram, NGramModel, NGramProvider, Smoothing};
pub use remote::RemoteProvider;
pub use replay::ReplayProvider;
pub use tokenize::{whitespace_tokens, Word};

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Scoring condition of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Only the target text was fed to the backend.
    Bare,
    /// Context + separator + target text was fed; only the target's tokens
    /// are selected by the target span.
    Contextualized,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Bare => write!(f, "bare"),
            Condition::Contextualized => write!(f, "contextualized"),
        }
    }
}

/// One scored token: its surface text, natural-log probability, and the
/// character offset (Unicode scalar index) of its first character in the
/// scored stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_text: String,
    pub logprob_nat: f64,
    pub char_offset: usize,
}

/// A full scoring run: every token of the scored stream plus the half-open
/// token-index range that selects the target passage's tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub tokens: Vec<TokenScore>,
    pub model_id: String,
    pub condition: Condition,
    /// Half-open token-index range of the target passage's tokens.
    pub target_span: Range<usize>,
    /// Character offset where the target text begins in the scored stream
    /// (0 for bare runs). A token belongs to the target span iff its
    /// `char_offset` is at or after this point.
    pub target_char_start: usize,
    /// SHA-256 of the target text; lets downstream code verify that two
    /// runs scored the same passage.
    pub target_fingerprint: String,
    /// Hash of the full request (model, condition, context, separator,
    /// text, scoring parameters); doubles as the cache key.
    pub request_fingerprint: String,
    /// Tokens the backend echoed without a logprob (typically the very
    /// first prompt token) that were dropped from `tokens`. Always 0 for
    /// local providers.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub leading_unscored_tokens: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl ScoredText {
    /// Validates span bounds, condition coverage, and logprob sanity.
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.target_span.start >= self.target_span.end || self.target_span.end > self.tokens.len()
        {
            return Err(ProviderError::EmptyTargetSpan {
                detail: format!(
                    "target span {:?} invalid for {} tokens",
                    self.target_span,
                    self.tokens.len()
                ),
            });
        }
        if self.condition == Condition::Bare
            && (self.target_span != (0..self.tokens.len()) || self.target_char_start != 0)
        {
            return Err(ProviderError::EmptyTargetSpan {
                detail: "bare run must cover all tokens".into(),
            });
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if !t.logprob_nat.is_finite() || t.logprob_nat > 0.0 {
                return Err(ProviderError::InvalidLogprob {
                    index: i,
                    token: t.token_text.clone(),
                    value: t.logprob_nat,
                });
            }
        }
        Ok(())
    }

    /// The tokens selected by the target span.
    pub fn target_tokens(&self) -> &[TokenScore] {
        &self.tokens[self.target_span.clone()]
    }
}

/// Connection and scoring settings for a remote provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    pub model_id: String,
    /// Name of the environment variable holding the API credential; empty
    /// means no Authorization header is sent. The credential itself never
    /// appears in config files or manifests.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism_cap")]
    pub parallelism_cap: usize,
    /// String inserted between context and target text.
    #[serde(default = "default_separator")]
    pub separator: String,
    /// Optional cap on the scored stream length. The remote provider counts
    /// whitespace-separated words as a documented approximation (it does
    /// not re-implement the backend tokenizer).
    #[serde(default)]
    pub context_window_tokens: Option<usize>,
    /// On overflow: left-truncate the context (with a warning) instead of
    /// erroring.
    #[serde(default)]
    pub truncate_context_on_overflow: bool,
    /// Initial retry backoff; doubles per attempt.
    #[serde(default = "default_backoff_ms")]
    pub retry_initial_backoff_ms: u64,
}

fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    3
}
fn default_parallelism_cap() -> usize {
    4
}
fn default_separator() -> String {
    "\n\n".into()
}
fn default_backoff_ms() -> u64 {
    500
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.parallelism_cap < 1 {
            return Err(ProviderError::InvalidConfig {
                detail: "parallelism_cap must be ≥ 1".into(),
            });
        }
        if self.timeout_secs == 0 {
            return Err(ProviderError::InvalidConfig {
                detail: "timeout must be > 0".into(),
            });
        }
        if self.endpoint.is_empty() || self.model_id.is_empty() {
            return Err(ProviderError::InvalidConfig {
                detail: "endpoint and model_id are required".into(),
            });
        }
        Ok(())
    }
}

/// Errors from providers and their transports.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("invalid provider configuration: {detail}")]
    InvalidConfig { detail: String },

    #[error("text is empty; nothing to score")]
    EmptyText,

    #[error("no tokens fall inside the target span: {detail}")]
    EmptyTargetSpan { detail: String },

    #[error("token {index} ({token:?}) has invalid logprob {value}")]
    InvalidLogprob {
        index: usize,
        token: String,
        value: f64,
    },

    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },

    #[error(
        "backend returned no prompt logprobs; {hint}"
    )]
    MissingLogprobs { hint: String },

    #[error("backend request rejected ({status}): {detail}")]
    BackendRejected { status: u16, detail: String },

    #[error("context window overflow: stream is {tokens} tokens, cap is {cap} (enable context truncation or raise the cap)")]
    ContextOverflow { tokens: usize, cap: usize },

    #[error("environment variable {var} (API key) is not set")]
    MissingApiKey { var: String },

    #[error("training text too short: order {order} needs ≥ {order} tokens, got {got}")]
    InsufficientTraining { order: usize, got: usize },

    #[error("token {token:?} is not in the model vocabulary")]
    UnknownToken { token: String },

    #[error("context {context:?} was never observed in training (smoothing=none)")]
    UnseenContext { context: String },

    #[error("transition to {token:?} after {context:?} was never observed (smoothing=none)")]
    UnseenTransition { context: String, token: String },

    #[error("no recorded entropies for text starting {preview:?}")]
    ReplayMiss { preview: String },

    #[error("cache I/O error at {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The scoring contract shared by all providers.
///
/// Providers must be safe for concurrent use; callers may issue scoring
/// calls from multiple threads at once (remote providers gate in-flight
/// requests internally at `parallelism_cap`).
pub trait ScoringProvider: Send + Sync {
    fn model_id(&self) -> &str;

    /// The string joined between context and target in contextualized runs.
    fn separator(&self) -> &str;

    /// Score the text with no prior context. The target span covers every
    /// token.
    fn score_bare(&self, text: &str) -> Result<ScoredText, ProviderError>;

    /// Score context + separator + text as one stream. The target span
    /// selects exactly the tokens whose char offset falls at or after the
    /// target's first character; a token merged across the boundary counts
    /// as context.
    fn score_with_context(&self, context: &str, text: &str) -> Result<ScoredText, ProviderError>;

    /// Deterministic hash of the full request; also the cache key.
    fn request_fingerprint(&self, condition: Condition, context: &str, text: &str) -> String;
}

impl<T: ScoringProvider + ?Sized> ScoringProvider for &T {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn separator(&self) -> &str {
        (**self).separator()
    }
    fn score_bare(&self, text: &str) -> Result<ScoredText, ProviderError> {
        (**self).score_bare(text)
    }
    fn score_with_context(&self, context: &str, text: &str) -> Result<ScoredText, ProviderError> {
        (**self).score_with_context(context, text)
    }
    fn request_fingerprint(&self, condition: Condition, context: &str, text: &str) -> String {
        (**self).request_fingerprint(condition, context, text)
    }
}

impl<T: ScoringProvider + ?Sized> ScoringProvider for Box<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn separator(&self) -> &str {
        (**self).separator()
    }
    fn score_bare(&self, text: &str) -> Result<ScoredText, ProviderError> {
        (**self).score_bare(text)
    }
    fn score_with_context(&self, context: &str, text: &str) -> Result<ScoredText, ProviderError> {
        (**self).score_with_context(context, text)
    }
    fn request_fingerprint(&self, condition: Condition, context: &str, text: &str) -> String {
        (**self).request_fingerprint(condition, context, text)
    }
}

/// Per-position next-token distributions over an explicit tokenization.
///
/// Needed by the KL estimator; only providers whose full conditional
/// distribution is enumerable (the local n-gram models) implement it.
pub trait TokenDistribution: Send + Sync {
    /// Identifier of the tokenization scheme; two sources can only be
    /// compared when these match.
    fn tokenizer_id(&self) -> &str;

    fn tokenize_words(&self, text: &str) -> Vec<String>;

    /// Distribution over the next token given the preceding words, as
    /// (token, probability) pairs sorted by token. Probabilities over the
    /// full vocabulary sum to 1; with smoothing disabled only observed
    /// continuations (p > 0) are listed.
    fn next_token_distribution(
        &self,
        prev: &[String],
    ) -> Result<Vec<(String, f64)>, ProviderError>;
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// SHA-256 of the target text; shared by all providers so that runs over
/// the same passage are recognizably comparable.
pub(crate) fn target_fingerprint(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

/// Canonical request fingerprint over (params, condition, context,
/// separator, text). `params` carries every provider setting that can
/// change scores; serde_json orders keys, so the digest is stable.
pub(crate) fn compute_request_fingerprint(
    params: &serde_json::Value,
    condition: Condition,
    context: &str,
    separator: &str,
    text: &str,
) -> String {
    let material = serde_json::json!({
        "condition": condition,
        "context": context,
        "params": params,
        "separator": separator,
        "text": text,
    });
    sha256_hex(material.to_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str, lp: f64, off: usize) -> TokenScore {
        TokenScore {
            token_text: text.into(),
            logprob_nat: lp,
            char_offset: off,
        }
    }

    fn scored(tokens: Vec<TokenScore>, condition: Condition, span: Range<usize>) -> ScoredText {
        ScoredText {
            tokens,
            model_id: "test".into(),
            condition,
            target_span: span,
            target_char_start: 0,
            target_fingerprint: "t".into(),
            request_fingerprint: "r".into(),
            leading_unscored_tokens: 0,
        }
    }

    #[test]
    fn validate_rejects_empty_span() {
        let s = scored(vec![tok("a", -0.5, 0)], Condition::Contextualized, 1..1);
        assert!(matches!(
            s.validate(),
            Err(ProviderError::EmptyTargetSpan { .. })
        ));
    }

    #[test]
    fn validate_rejects_partial_bare_span() {
        let s = scored(
            vec![tok("a", -0.5, 0), tok("b", -0.5, 2)],
            Condition::Bare,
            1..2,
        );
        assert!(s.validate().is_err());
    }

    #[test]
    fn validate_rejects_nonfinite_and_positive_logprobs() {
        let s = scored(vec![tok("a", f64::NEG_INFINITY, 0)], Condition::Bare, 0..1);
        assert!(matches!(
            s.validate(),
            Err(ProviderError::InvalidLogprob { .. })
        ));
        let s = scored(vec![tok("a", 0.3, 0)], Condition::Bare, 0..1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn fingerprint_distinguishes_every_component() {
        let params = serde_json::json!({"kind": "x"});
        let base = compute_request_fingerprint(&params, Condition::Bare, "", "\n\n", "t");
        assert_ne!(
            base,
            compute_request_fingerprint(&params, Condition::Contextualized, "", "\n\n", "t")
        );
        assert_ne!(
            base,
            compute_request_fingerprint(&params, Condition::Bare, "c", "\n\n", "t")
        );
        assert_ne!(
            base,
            compute_request_fingerprint(&params, Condition::Bare, "", "|", "t")
        );
        assert_ne!(
            base,
            compute_request_fingerprint(&params, Condition::Bare, "", "\n\n", "u")
        );
        let params2 = serde_json::json!({"kind": "y"});
        assert_ne!(
            base,
            compute_request_fingerprint(&params2, Condition::Bare, "", "\n\n", "t")
        );
    }
}
