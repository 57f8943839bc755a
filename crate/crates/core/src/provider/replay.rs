//! Replay provider: serves pre-recorded per-token entropies.
//!
//! Used to push published measurements through the downstream pipeline
//! (pair assembly, summaries, reports) without access to the original
//! backend. For a recorded entropy of `h` bits/token it fabricates a
//! single-token run whose natural logprob is `−h·ln 2`, so the estimator
//! recovers `h` exactly.

use std::collections::HashMap;

use super::{
    compute_request_fingerprint, target_fingerprint, Condition, ProviderError, ScoredText,
    ScoringProvider, TokenScore,
};

#[derive(Debug, Clone, Copy)]
struct RecordedEntropies {
    bare_bits_per_token: f64,
    contextualized_bits_per_token: f64,
}

/// Provider keyed by exact target text.
#[derive(Debug, Default)]
pub struct ReplayProvider {
    model_id: String,
    separator: String,
    entries: HashMap<String, RecordedEntropies>,
}

impl ReplayProvider {
    pub fn new(model_id: impl Into<String>) -> Self {
        ReplayProvider {
            model_id: model_id.into(),
            separator: "\n\n".into(),
            entries: HashMap::new(),
        }
    }

    /// Records the bare and contextualized entropies (bits/token) for a text.
    pub fn record(&mut self, text: impl Into<String>, bare_bits: f64, contextualized_bits: f64) {
        self.entries.insert(
            text.into(),
            RecordedEntropies {
                bare_bits_per_token: bare_bits,
                contextualized_bits_per_token: contextualized_bits,
            },
        );
    }

    fn lookup(&self, text: &str) -> Result<RecordedEntropies, ProviderError> {
        self.entries
            .get(text)
            .copied()
            .ok_or_else(|| ProviderError::ReplayMiss {
                preview: text.chars().take(40).collect(),
            })
    }

    fn params(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "replay", "model_id": self.model_id })
    }

    fn fabricate(
        &self,
        text: &str,
        bits_per_token: f64,
        condition: Condition,
        target_char_start: usize,
        fingerprint: String,
    ) -> Result<ScoredText, ProviderError> {
        let scored = ScoredText {
            tokens: vec![TokenScore {
                token_text: text.to_string(),
                logprob_nat: -bits_per_token * std::f64::consts::LN_2,
                char_offset: target_char_start,
            }],
            model_id: self.model_id.clone(),
            condition,
            target_span: 0..1,
            target_char_start,
            target_fingerprint: target_fingerprint(text),
            request_fingerprint: fingerprint,
            leading_unscored_tokens: 0,
        };
        scored.validate()?;
        Ok(scored)
    }
}

impl ScoringProvider for ReplayProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn separator(&self) -> &str {
        &self.separator
    }

    fn score_bare(&self, text: &str) -> Result<ScoredText, ProviderError> {
        let rec = self.lookup(text)?;
        let fp = self.request_fingerprint(Condition::Bare, "", text);
        self.fabricate(text, rec.bare_bits_per_token, Condition::Bare, 0, fp)
    }

    fn score_with_context(&self, context: &str, text: &str) -> Result<ScoredText, ProviderError> {
        let rec = self.lookup(text)?;
        let fp = self.request_fingerprint(Condition::Contextualized, context, text);
        let start = context.chars().count() + self.separator.chars().count();
        self.fabricate(
            text,
            rec.contextualized_bits_per_token,
            Condition::Contextualized,
            start,
            fp,
        )
    }

    fn request_fingerprint(&self, condition: Condition, context: &str, text: &str) -> String {
        compute_request_fingerprint(&self.params(), condition, context, &self.separator, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::entropy_bits;

    #[test]
    fn replays_recorded_entropies_through_the_estimator() {
        let mut p = ReplayProvider::new("replay-test");
        p.record("some passage", 4.039, 3.382);
        let bare = entropy_bits(&p.score_bare("some passage").unwrap()).unwrap();
        let cond = entropy_bits(&p.score_with_context("ctx", "some passage").unwrap()).unwrap();
        assert!((bare.bits_per_token - 4.039).abs() < 1e-12);
        assert!((cond.bits_per_token - 3.382).abs() < 1e-12);
    }

    #[test]
    fn unknown_text_is_a_replay_miss() {
        let p = ReplayProvider::new("replay-test");
        assert!(matches!(
            p.score_bare("missing"),
            Err(ProviderError::ReplayMiss { .. })
        ));
    }
}
