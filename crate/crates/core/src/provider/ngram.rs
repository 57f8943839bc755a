//! Deterministic local n-gram model.
//!
//! The model stands in for a remote scoring backend in tests and offline
//! runs: whitespace tokenization, start-of-sequence padding, and either
//! raw count ratios or add-k smoothing. Every probability it emits can be
//! reproduced by hand from the training text, which is what makes it
//! usable as an exact oracle.
//!
//! Scoring is autoregressive over the full stream with the context window
//! implied by the order: token `xᵢ` is scored as `P(xᵢ | last n−1
//! tokens)`, where missing history at the start of the stream is padded
//! with a start marker. Conditional probabilities over the vocabulary sum
//! to 1 for every context.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::tokenize::{whitespace_tokens, Word};
use super::{
    compute_request_fingerprint, sha256_hex, target_fingerprint, Condition, ProviderError,
    ScoredText, ScoringProvider, TokenDistribution, TokenScore,
};

/// Identifier reported by [`TokenDistribution::tokenizer_id`].
pub const WHITESPACE_TOKENIZER_ID: &str = "whitespace-v1";

/// Smoothing applied to conditional counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Raw count ratios. Scoring a transition that was never observed is
    /// an error rather than probability zero.
    None,
    /// Add-k: `P(w|ctx) = (count + k) / (total + k·|V|)`, k > 0.
    AddK(f64),
}

impl Smoothing {
    fn label(&self) -> String {
        match self {
            Smoothing::None => "none".into(),
            Smoothing::AddK(k) => format!("addk{}", k),
        }
    }
}

/// Context key: the n−1 tokens preceding a position, start-padded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CtxToken {
    Bos,
    Word(String),
}

#[derive(Debug, Default)]
struct ContextCounts {
    total: u64,
    next: HashMap<String, u64>,
}

/// An order-n model over whitespace tokens with enumerable probabilities.
#[derive(Debug)]
pub struct NGramModel {
    order: usize,
    smoothing: Smoothing,
    transitions: HashMap<Vec<CtxToken>, ContextCounts>,
    vocabulary: BTreeSet<String>,
    train_sha256: String,
    model_id: String,
}

/// Builds an n-gram model from a single training sequence.
pub fn train_ngram(
    training_text: &str,
    order: usize,
    smoothing: Smoothing,
) -> Result<NGramModel, ProviderError> {
    if order < 1 {
        return Err(ProviderError::InvalidConfig {
            detail: "n-gram order must be ≥ 1".into(),
        });
    }
    if let Smoothing::AddK(k) = smoothing {
        if !(k > 0.0) || !k.is_finite() {
            return Err(ProviderError::InvalidConfig {
                detail: format!("add-k smoothing needs finite k > 0, got {k}"),
            });
        }
    }
    let words = whitespace_tokens(training_text);
    if words.len() < order {
        return Err(ProviderError::InsufficientTraining {
            order,
            got: words.len(),
        });
    }

    let tokens: Vec<&str> = words.iter().map(|w| w.text.as_str()).collect();
    let mut transitions: HashMap<Vec<CtxToken>, ContextCounts> = HashMap::new();
    let mut vocabulary = BTreeSet::new();
    for (i, &tok) in tokens.iter().enumerate() {
        vocabulary.insert(tok.to_string());
        let key = context_key(&tokens[..i], order);
        let entry = transitions.entry(key).or_default();
        entry.total += 1;
        *entry.next.entry(tok.to_string()).or_insert(0) += 1;
    }

    let train_sha256 = sha256_hex(training_text.as_bytes());
    let model_id = format!(
        "ngram{}-{}-{}",
        order,
        smoothing.label(),
        &train_sha256[..8]
    );
    Ok(NGramModel {
        order,
        smoothing,
        transitions,
        vocabulary,
        train_sha256,
        model_id,
    })
}

fn context_key(prev: &[&str], order: usize) -> Vec<CtxToken> {
    let need = order - 1;
    let take = prev.len().min(need);
    let mut key = Vec::with_capacity(need);
    for _ in 0..(need - take) {
        key.push(CtxToken::Bos);
    }
    for w in &prev[prev.len() - take..] {
        key.push(CtxToken::Word((*w).to_string()));
    }
    key
}

fn describe_context(key: &[CtxToken]) -> String {
    let parts: Vec<&str> = key
        .iter()
        .map(|t| match t {
            CtxToken::Bos => "<start>",
            CtxToken::Word(w) => w.as_str(),
        })
        .collect();
    parts.join(" ")
}

impl NGramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn train_sha256(&self) -> &str {
        &self.train_sha256
    }

    /// `P(token | prev)` where `prev` is the full preceding word stream;
    /// only the last n−1 words matter, with start padding before that.
    pub fn conditional_prob(&self, prev: &[&str], token: &str) -> Result<f64, ProviderError> {
        if !self.vocabulary.contains(token) {
            return Err(ProviderError::UnknownToken {
                token: token.to_string(),
            });
        }
        let key = context_key(prev, self.order);
        let (count, total) = match self.transitions.get(&key) {
            Some(c) => (c.next.get(token).copied().unwrap_or(0), c.total),
            None => (0, 0),
        };
        match self.smoothing {
            Smoothing::None => {
                if total == 0 {
                    return Err(ProviderError::UnseenContext {
                        context: describe_context(&key),
                    });
                }
                if count == 0 {
                    return Err(ProviderError::UnseenTransition {
                        context: describe_context(&key),
                        token: token.to_string(),
                    });
                }
                Ok(count as f64 / total as f64)
            }
            Smoothing::AddK(k) => {
                let v = self.vocabulary.len() as f64;
                Ok((count as f64 + k) / (total as f64 + k * v))
            }
        }
    }

    /// Full conditional distribution for a context, sorted by token.
    pub fn distribution(&self, prev: &[&str]) -> Result<Vec<(String, f64)>, ProviderError> {
        let key = context_key(prev, self.order);
        let counts = self.transitions.get(&key);
        match self.smoothing {
            Smoothing::None => {
                let counts = counts.ok_or_else(|| ProviderError::UnseenContext {
                    context: describe_context(&key),
                })?;
                let total = counts.total as f64;
                let mut out: Vec<(String, f64)> = counts
                    .next
                    .iter()
                    .map(|(tok, &c)| (tok.clone(), c as f64 / total))
                    .collect();
                out.sort_by(|a, b| a.0.cmp(&b.0));
                Ok(out)
            }
            Smoothing::AddK(k) => {
                let v = self.vocabulary.len() as f64;
                let total = counts.map(|c| c.total).unwrap_or(0) as f64;
                let denom = total + k * v;
                Ok(self
                    .vocabulary
                    .iter()
                    .map(|tok| {
                        let c = counts
                            .and_then(|cc| cc.next.get(tok).copied())
                            .unwrap_or(0) as f64;
                        (tok.clone(), (c + k) / denom)
                    })
                    .collect())
            }
        }
    }

    fn score_words(&self, words: &[Word]) -> Result<Vec<TokenScore>, ProviderError> {
        let stream: Vec<&str> = words.iter().map(|w| w.text.as_str()).collect();
        let mut out = Vec::with_capacity(words.len());
        for (i, word) in words.iter().enumerate() {
            let p = self.conditional_prob(&stream[..i], &word.text)?;
            out.push(TokenScore {
                token_text: word.text.clone(),
                logprob_nat: p.ln(),
                char_offset: word.char_offset,
            });
        }
        Ok(out)
    }
}

impl TokenDistribution for NGramModel {
    fn tokenizer_id(&self) -> &str {
        WHITESPACE_TOKENIZER_ID
    }

    fn tokenize_words(&self, text: &str) -> Vec<String> {
        whitespace_tokens(text).into_iter().map(|w| w.text).collect()
    }

    fn next_token_distribution(
        &self,
        prev: &[String],
    ) -> Result<Vec<(String, f64)>, ProviderError> {
        let prev: Vec<&str> = prev.iter().map(|s| s.as_str()).collect();
        self.distribution(&prev)
    }
}

/// [`ScoringProvider`] over an [`NGramModel`].
#[derive(Debug)]
pub struct NGramProvider {
    model: NGramModel,
    separator: String,
    context_window_tokens: Option<usize>,
    truncate_context_on_overflow: bool,
}

impl NGramProvider {
    pub fn new(model: NGramModel) -> Self {
        NGramProvider {
            model,
            separator: "\n\n".into(),
            context_window_tokens: None,
            truncate_context_on_overflow: false,
        }
    }

    pub fn with_separator(mut self, separator: impl Into<String>) -> Self {
        self.separator = separator.into();
        self
    }

    pub fn with_context_window(mut self, cap: Option<usize>, truncate: bool) -> Self {
        self.context_window_tokens = cap;
        self.truncate_context_on_overflow = truncate;
        self
    }

    pub fn model(&self) -> &NGramModel {
        &self.model
    }

    fn params(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "ngram",
            "order": self.model.order,
            "smoothing": self.model.smoothing,
            "train_sha256": self.model.train_sha256,
            "context_window_tokens": self.context_window_tokens,
            "truncate_context_on_overflow": self.truncate_context_on_overflow,
        })
    }

    /// Left-truncates the context (whole leading words) until the combined
    /// stream fits the window cap.
    fn fit_context<'c>(&self, context: &'c str, text: &str) -> Result<&'c str, ProviderError> {
        let cap = match self.context_window_tokens {
            Some(c) => c,
            None => return Ok(context),
        };
        let full = format!("{}{}{}", context, self.separator, text);
        let total = whitespace_tokens(&full).len();
        if total <= cap {
            return Ok(context);
        }
        if !self.truncate_context_on_overflow {
            return Err(ProviderError::ContextOverflow { tokens: total, cap });
        }
        let ctx_words = whitespace_tokens(context);
        let mut drop = 0usize;
        while drop < ctx_words.len() {
            drop += 1;
            let keep_from = if drop == ctx_words.len() {
                context.chars().count()
            } else {
                ctx_words[drop].char_offset
            };
            let kept: String = context.chars().skip(keep_from).collect();
            let candidate = format!("{}{}{}", kept, self.separator, text);
            if whitespace_tokens(&candidate).len() <= cap {
                log::warn!(
                    "context left-truncated by {} token(s) to fit window of {}",
                    drop,
                    cap
                );
                let byte_from = context
                    .char_indices()
                    .nth(keep_from)
                    .map(|(b, _)| b)
                    .unwrap_or(context.len());
                return Ok(&context[byte_from..]);
            }
        }
        // Even an empty context cannot fit: the text alone overflows.
        Err(ProviderError::ContextOverflow {
            tokens: whitespace_tokens(text).len(),
            cap,
        })
    }
}

impl ScoringProvider for NGramProvider {
    fn model_id(&self) -> &str {
        &self.model.model_id
    }

    fn separator(&self) -> &str {
        &self.separator
    }

    fn score_bare(&self, text: &str) -> Result<ScoredText, ProviderError> {
        let words = whitespace_tokens(text);
        if words.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let tokens = self.model.score_words(&words)?;
        let span = 0..tokens.len();
        let scored = ScoredText {
            tokens,
            model_id: self.model.model_id.clone(),
            condition: Condition::Bare,
            target_span: span,
            target_char_start: 0,
            target_fingerprint: target_fingerprint(text),
            request_fingerprint: self.request_fingerprint(Condition::Bare, "", text),
            leading_unscored_tokens: 0,
        };
        scored.validate()?;
        Ok(scored)
    }

    fn score_with_context(&self, context: &str, text: &str) -> Result<ScoredText, ProviderError> {
        if whitespace_tokens(text).is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let fingerprint = self.request_fingerprint(Condition::Contextualized, context, text);
        let context = self.fit_context(context, text)?;
        let stream = format!("{}{}{}", context, self.separator, text);
        let target_char_start = context.chars().count() + self.separator.chars().count();
        let words = whitespace_tokens(&stream);
        let tokens = self.model.score_words(&words)?;
        let start = tokens
            .iter()
            .position(|t| t.char_offset >= target_char_start)
            .ok_or_else(|| ProviderError::EmptyTargetSpan {
                detail: format!(
                    "no token starts at or after char {} (a boundary-straddling token \
                     belongs to the context side)",
                    target_char_start
                ),
            })?;
        let span = start..tokens.len();
        let scored = ScoredText {
            tokens,
            model_id: self.model.model_id.clone(),
            condition: Condition::Contextualized,
            target_span: span,
            target_char_start,
            target_fingerprint: target_fingerprint(text),
            request_fingerprint: fingerprint,
            leading_unscored_tokens: 0,
        };
        scored.validate()?;
        Ok(scored)
    }

    fn request_fingerprint(&self, condition: Condition, context: &str, text: &str) -> String {
        compute_request_fingerprint(&self.params(), condition, context, &self.separator, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bigram_counts_give_certain_transitions() {
        // Counts by hand: <start>→a ×1, a→b ×3, b→a ×2.
        // P(a|<start>) = 1, P(b|a) = 1, so both logprobs are exactly 0.
        let model = train_ngram("a b a b a b", 2, Smoothing::None).unwrap();
        let provider = NGramProvider::new(model);
        let scored = provider.score_bare("a b").unwrap();
        assert_eq!(scored.tokens.len(), 2);
        assert_eq!(scored.tokens[0].logprob_nat, 0.0);
        assert_eq!(scored.tokens[1].logprob_nat, 0.0);
        assert_eq!(scored.target_span, 0..2);
    }

    #[test]
    fn bigram_fractional_transition_by_enumeration() {
        // "a b a c a b": a→{b:2, c:1}; P(b|a) = 2/3.
        let model = train_ngram("a b a c a b", 2, Smoothing::None).unwrap();
        let p = model.conditional_prob(&["a"], "b").unwrap();
        assert_eq!(p, 2.0 / 3.0);
        let provider = NGramProvider::new(model);
        let scored = provider.score_bare("a b").unwrap();
        assert_eq!(scored.tokens[0].logprob_nat, 0.0);
        assert_abs_diff_eq!(
            scored.tokens[1].logprob_nat,
            (2.0f64 / 3.0).ln(),
            epsilon = 0.0
        );
    }

    #[test]
    fn uniform_unigram_scores_half() {
        let model = train_ngram("a b", 1, Smoothing::None).unwrap();
        let provider = NGramProvider::new(model);
        let scored = provider.score_bare("a a a a").unwrap();
        assert_eq!(scored.tokens.len(), 4);
        for t in &scored.tokens {
            assert_eq!(t.logprob_nat, 0.5f64.ln());
            assert_abs_diff_eq!(t.logprob_nat, -0.6931471805599453, epsilon = 1e-15);
        }
    }

    #[test]
    fn context_scoring_by_enumeration() {
        // "x y z": <start>→x, x→y, y→z all count 1 ⇒ P(y|x) = P(z|y) = 1.
        let model = train_ngram("x y z", 2, Smoothing::None).unwrap();
        let provider = NGramProvider::new(model);
        let scored = provider.score_with_context("x", "y z").unwrap();
        assert_eq!(scored.tokens.len(), 3);
        assert_eq!(scored.target_span, 1..3);
        let target = scored.target_tokens();
        assert_eq!(target[0].token_text, "y");
        assert_eq!(target[0].logprob_nat, 0.0);
        assert_eq!(target[1].token_text, "z");
        assert_eq!(target[1].logprob_nat, 0.0);
    }

    #[test]
    fn empty_context_empty_separator_matches_bare_exactly() {
        let model = train_ngram("a b a c a b", 2, Smoothing::AddK(0.5)).unwrap();
        let provider = NGramProvider::new(model).with_separator("");
        let bare = provider.score_bare("a b c").unwrap();
        let ctx = provider.score_with_context("", "a b c").unwrap();
        assert_eq!(ctx.target_char_start, 0);
        assert_eq!(ctx.target_tokens(), &bare.tokens[..]);
    }

    #[test]
    fn straddling_token_goes_to_context_side() {
        // separator "" merges the last context word and the first text
        // word: stream "a bc d"; the merged token starts at char 2, before
        // the target start (char 3), so only "d" is in the target span.
        let model = train_ngram("a bc d", 2, Smoothing::AddK(1.0)).unwrap();
        let provider = NGramProvider::new(model).with_separator("");
        let scored = provider.score_with_context("a b", "c d").unwrap();
        let texts: Vec<&str> = scored.tokens.iter().map(|t| t.token_text.as_str()).collect();
        assert_eq!(texts, vec!["a", "bc", "d"]);
        assert_eq!(scored.target_char_start, 3);
        assert_eq!(scored.target_span, 2..3);
        assert_eq!(scored.target_tokens()[0].token_text, "d");
    }

    #[test]
    fn straddle_swallowing_whole_target_is_an_error() {
        let model = train_ngram("abcd ab cd", 1, Smoothing::AddK(1.0)).unwrap();
        let provider = NGramProvider::new(model).with_separator("");
        let err = provider.score_with_context("ab", "cd").unwrap_err();
        assert!(matches!(err, ProviderError::EmptyTargetSpan { .. }));
    }

    #[test]
    fn training_shorter_than_order_errors() {
        assert!(matches!(
            train_ngram("a b", 3, Smoothing::None),
            Err(ProviderError::InsufficientTraining { order: 3, got: 2 })
        ));
        assert!(matches!(
            train_ngram("", 1, Smoothing::None),
            Err(ProviderError::InsufficientTraining { .. })
        ));
    }

    #[test]
    fn unseen_transition_errors_without_smoothing() {
        let model = train_ngram("a b a b", 2, Smoothing::None).unwrap();
        assert!(matches!(
            model.conditional_prob(&["b"], "b"),
            Err(ProviderError::UnseenTransition { .. })
        ));
        // Unknown word is a different error.
        assert!(matches!(
            model.conditional_prob(&["a"], "zzz"),
            Err(ProviderError::UnknownToken { .. })
        ));
    }

    #[test]
    fn unigram_relative_frequencies_sum_to_one() {
        let model = train_ngram("p q q r r r", 1, Smoothing::None).unwrap();
        let dist = model.distribution(&[]).unwrap();
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_eq!(dist.len(), 3);
        assert_eq!(dist[0], ("p".to_string(), 1.0 / 6.0));
    }

    #[test]
    fn smoothed_distribution_sums_to_one_even_for_unseen_contexts() {
        let model = train_ngram("a b c", 2, Smoothing::AddK(0.5)).unwrap();
        for ctx in [&[][..], &["a"][..], &["c"][..], &["b"][..]] {
            let dist = model.distribution(ctx).unwrap();
            let total: f64 = dist.iter().map(|(_, p)| p).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn window_cap_errors_then_truncates() {
        let model = train_ngram("a b c d e f", 2, Smoothing::AddK(0.5)).unwrap();
        let strict = NGramProvider::new(model).with_context_window(Some(4), false);
        let err = strict.score_with_context("a b c d", "e f").unwrap_err();
        assert!(matches!(
            err,
            ProviderError::ContextOverflow { tokens: 6, cap: 4 }
        ));

        let model = train_ngram("a b c d e f", 2, Smoothing::AddK(0.5)).unwrap();
        let lenient = NGramProvider::new(model).with_context_window(Some(4), true);
        let scored = lenient.score_with_context("a b c d", "e f").unwrap();
        assert_eq!(scored.tokens.len(), 4);
        let texts: Vec<&str> = scored.tokens.iter().map(|t| t.token_text.as_str()).collect();
        assert_eq!(texts, vec!["c", "d", "e", "f"]);
        assert_eq!(scored.target_tokens().len(), 2);
    }

    #[test]
    fn determinism_across_runs() {
        let a = {
            let m = train_ngram("m n m o m n", 2, Smoothing::AddK(0.25)).unwrap();
            NGramProvider::new(m).score_with_context("m", "n m o").unwrap()
        };
        let b = {
            let m = train_ngram("m n m o m n", 2, Smoothing::AddK(0.25)).unwrap();
            NGramProvider::new(m).score_with_context("m", "n m o").unwrap()
        };
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_text() -> impl Strategy<Value = String> {
            proptest::collection::vec(prop_oneof!["a", "b", "c", "d"], 1..20)
                .prop_map(|v: Vec<&str>| v.join(" "))
        }

        proptest! {
            // Probability sanity: smoothed conditionals sum to 1 at any context.
            #[test]
            fn smoothed_mass_is_one(train in small_text(), ctx in small_text(), order in 1usize..4) {
                prop_assume!(whitespace_tokens(&train).len() >= order);
                let model = train_ngram(&train, order, Smoothing::AddK(0.7)).unwrap();
                let ctx_words: Vec<String> = model.tokenize_words(&ctx);
                let dist = model.next_token_distribution(&ctx_words).unwrap();
                let total: f64 = dist.iter().map(|(_, p)| p).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }

            // Empty-context identity on the target span, bit-exact.
            #[test]
            fn empty_context_identity(train in small_text(), text in small_text()) {
                prop_assume!(whitespace_tokens(&train).len() >= 2);
                let model = train_ngram(&train, 2, Smoothing::AddK(0.5)).unwrap();
                let provider = NGramProvider::new(model).with_separator("");
                let bare = provider.score_bare(&text).unwrap();
                let ctx = provider.score_with_context("", &text).unwrap();
                prop_assert_eq!(ctx.target_tokens(), &bare.tokens[..]);
            }
        }
    }
}
