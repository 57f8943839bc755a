//! textmi: calibrated-surprise measurement for text.
//!
//! The library extracts token-level log-probabilities from a scoring
//! backend under two conditions — *bare* (the passage alone) and
//! *contextualized* (the passage after its prior context) — and turns them
//! into information-theoretic quantities:
//!
//! - per-token entropy `H = -(1/n) Σ log₂ P(xᵢ)` for each condition,
//! - mutual information `I = H(bare) − H(contextualized)`,
//! - paired quality deltas `ΔI = I(original) − I(degraded)` over a corpus
//!   of original/degraded passage pairs,
//! - additive per-segment decompositions of a passage's total mutual
//!   information,
//! - a truncated KL divergence between two scoring distributions,
//! - and two analytic null models (independent word-relay text with zero
//!   context coupling, and a multiplicative constraint funnel).
//!
//! Scoring backends are pluggable: a remote OpenAI-compatible completions
//! endpoint (with a persistent on-disk response cache) or a deterministic
//! local n-gram model whose probabilities are exactly enumerable, which is
//! what the test suite uses as its oracle.

pub mod chain;
pub mod cli;
pub mod corpus;
pub mod estimator;
pub mod nullsim;
pub mod provider;
pub mod report;

pub use corpus::{load_corpus, save_corpus, validate_corpus, Corpus, PairedItem, Passage};
pub use estimator::{
    analyze_pair, entropy_bits, kl_gap, mutual_information, summarize, EntropyResult, KLResult,
    MIResult, PairResult, SummaryStats,
};
pub use provider::{
    train_ngram, CachedProvider, Condition, NGramModel, NGramProvider, ProviderConfig,
    RemoteProvider, ReplayProvider, ScoredText, ScoringProvider, Smoothing, TokenScore,
};
