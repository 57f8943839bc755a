//! OpenAI-compatible completions client.
//!
//! Scores are obtained by echoing the prompt: `POST {endpoint}/completions`
//! with `max_tokens: 0`, `echo: true`, `logprobs: 1` and greedy settings
//! pinned (`temperature: 0`, `top_p: 1.0`). The response's per-token
//! `token_logprobs` / `text_offset` arrays become [`TokenScore`]s.
//!
//! Notes on backend quirks:
//! - Most backends return `null` for the first prompt token (its
//!   probability is conditioned on nothing). Leading nulls are dropped and
//!   counted in `leading_unscored_tokens`; a null anywhere else is an
//!   error.
//! - `text_offset` values are treated as Unicode scalar offsets into the
//!   prompt string, the convention of Python-based servers.
//! - Tiny positive logprobs (float artifacts some servers emit) are
//!   clamped to 0 up to 1e-6 and rejected beyond that.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;

use super::tokenize::whitespace_tokens;
use super::{
    compute_request_fingerprint, target_fingerprint, Condition, ProviderConfig, ProviderError,
    ScoredText, ScoringProvider, TokenScore,
};

const POSITIVE_LOGPROB_TOLERANCE: f64 = 1e-6;

/// Counting semaphore bounding in-flight requests at `parallelism_cap`.
struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Gate {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.gate.permits.lock().unwrap();
        *permits += 1;
        self.gate.cv.notify_one();
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    logprobs: Option<LogProbs>,
}

#[derive(Debug, Deserialize)]
struct LogProbs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

/// Remote scoring over an OpenAI-compatible completions endpoint.
pub struct RemoteProvider {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
    url: String,
}

impl RemoteProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::InvalidConfig {
                detail: format!("HTTP client: {e}"),
            })?;
        let url = format!("{}/completions", config.endpoint.trim_end_matches('/'));
        let gate = Gate::new(config.parallelism_cap);
        Ok(RemoteProvider {
            config,
            client,
            gate,
            url,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn params(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "remote",
            "model_id": self.config.model_id,
            "echo": true,
            "logprobs": 1,
            "max_tokens": 0,
            "temperature": 0,
            "top_p": 1.0,
            "context_window_tokens": self.config.context_window_tokens,
            "truncate_context_on_overflow": self.config.truncate_context_on_overflow,
        })
    }

    fn api_key(&self) -> Result<Option<String>, ProviderError> {
        if self.config.api_key_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.config.api_key_env) {
            Ok(v) => Ok(Some(v)),
            Err(_) => Err(ProviderError::MissingApiKey {
                var: self.config.api_key_env.clone(),
            }),
        }
    }

    /// Window enforcement by whitespace-word count — an approximation,
    /// since re-implementing the backend tokenizer is out of scope. The
    /// backend stays the authority; its own overflow errors still surface.
    fn fit_context<'c>(&self, context: &'c str, text: &str) -> Result<&'c str, ProviderError> {
        let cap = match self.config.context_window_tokens {
            Some(c) => c,
            None => return Ok(context),
        };
        let text_words = whitespace_tokens(text).len();
        let sep_words = whitespace_tokens(&self.config.separator).len();
        let ctx_words = whitespace_tokens(context);
        let total = ctx_words.len() + sep_words + text_words;
        if total <= cap {
            return Ok(context);
        }
        if !self.config.truncate_context_on_overflow {
            return Err(ProviderError::ContextOverflow { tokens: total, cap });
        }
        let must_drop = total - cap;
        if must_drop >= ctx_words.len() {
            return Err(ProviderError::ContextOverflow {
                tokens: sep_words + text_words,
                cap,
            });
        }
        let keep_char = ctx_words[must_drop].char_offset;
        let keep_byte = context
            .char_indices()
            .nth(keep_char)
            .map(|(b, _)| b)
            .unwrap_or(context.len());
        log::warn!(
            "context left-truncated by {} word(s) to fit window of {} (word-count approximation)",
            must_drop,
            cap
        );
        Ok(&context[keep_byte..])
    }

    fn post_with_retries(&self, body: &serde_json::Value) -> Result<String, ProviderError> {
        let auth = self.api_key()?;
        let mut attempt = 0u32;
        let mut backoff = Duration::from_millis(self.config.retry_initial_backoff_ms);
        loop {
            attempt += 1;
            // Permit held across send + body read: a request counts as
            // in-flight until fully received.
            let outcome = {
                let _permit = self.gate.acquire();
                let mut req = self.client.post(&self.url).json(body);
                if let Some(key) = &auth {
                    req = req.bearer_auth(key);
                }
                req.send()
                    .and_then(|resp| {
                        let status = resp.status();
                        resp.text().map(|t| (status, t))
                    })
                    .map_err(|e| e.to_string())
            };
            match outcome {
                Ok((status, body_text)) => {
                    if status.is_success() {
                        return Ok(body_text);
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(ProviderError::BackendRejected {
                            status: status.as_u16(),
                            detail: truncate_for_log(&body_text),
                        });
                    }
                    if attempt > self.config.max_retries {
                        return Err(ProviderError::Transport {
                            attempts: attempt,
                            detail: format!("HTTP {status}: {}", truncate_for_log(&body_text)),
                        });
                    }
                }
                Err(detail) => {
                    if attempt > self.config.max_retries {
                        return Err(ProviderError::Transport {
                            attempts: attempt,
                            detail,
                        });
                    }
                }
            }
            std::thread::sleep(backoff);
            backoff *= 2;
        }
    }

    fn score_prompt(
        &self,
        prompt: &str,
        condition: Condition,
        target_char_start: usize,
        text: &str,
        request_fingerprint: String,
    ) -> Result<ScoredText, ProviderError> {
        let body = serde_json::json!({
            "model": self.config.model_id,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0,
            "top_p": 1.0,
        });
        let raw = self.post_with_retries(&body)?;
        let parsed: CompletionResponse =
            serde_json::from_str(&raw).map_err(|e| ProviderError::Transport {
                attempts: 1,
                detail: format!("malformed completion response: {e}"),
            })?;
        let hint = "the backend must support completions with echo=true and logprobs \
                    (vLLM, SGLang, TGI and similar OpenAI-compatible servers do; \
                    chat-only endpoints do not)";
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::MissingLogprobs { hint: hint.into() })?;
        let lp = choice
            .logprobs
            .ok_or_else(|| ProviderError::MissingLogprobs { hint: hint.into() })?;
        if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
            return Err(ProviderError::MissingLogprobs {
                hint: format!(
                    "logprob arrays disagree in length ({}/{}/{}); {}",
                    lp.tokens.len(),
                    lp.token_logprobs.len(),
                    lp.text_offset.len(),
                    hint
                ),
            });
        }

        let mut tokens = Vec::with_capacity(lp.tokens.len());
        let mut leading_unscored = 0usize;
        for (i, ((tok, maybe_lp), offset)) in lp
            .tokens
            .into_iter()
            .zip(lp.token_logprobs)
            .zip(lp.text_offset)
            .enumerate()
        {
            match maybe_lp {
                None if tokens.is_empty() => leading_unscored += 1,
                None => {
                    return Err(ProviderError::InvalidLogprob {
                        index: i,
                        token: tok,
                        value: f64::NAN,
                    })
                }
                Some(v) => {
                    let v = if v > 0.0 && v <= POSITIVE_LOGPROB_TOLERANCE {
                        0.0
                    } else {
                        v
                    };
                    if !v.is_finite() || v > 0.0 {
                        return Err(ProviderError::InvalidLogprob {
                            index: i,
                            token: tok,
                            value: v,
                        });
                    }
                    tokens.push(TokenScore {
                        token_text: tok,
                        logprob_nat: v,
                        char_offset: offset,
                    });
                }
            }
        }
        if tokens.is_empty() {
            return Err(ProviderError::EmptyTargetSpan {
                detail: "backend returned no scored tokens".into(),
            });
        }

        let start = tokens
            .iter()
            .position(|t| t.char_offset >= target_char_start)
            .ok_or_else(|| ProviderError::EmptyTargetSpan {
                detail: format!("no scored token starts at or after char {target_char_start}"),
            })?;
        let span = if condition == Condition::Bare {
            0..tokens.len()
        } else {
            start..tokens.len()
        };
        let scored = ScoredText {
            tokens,
            model_id: self.config.model_id.clone(),
            condition,
            target_span: span,
            target_char_start: if condition == Condition::Bare {
                0
            } else {
                target_char_start
            },
            target_fingerprint: target_fingerprint(text),
            request_fingerprint,
            leading_unscored_tokens: leading_unscored,
        };
        scored.validate()?;
        Ok(scored)
    }
}

fn truncate_for_log(s: &str) -> String {
    const MAX: usize = 400;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        let cut: String = s.chars().take(MAX).collect();
        format!("{cut}…")
    }
}

impl ScoringProvider for RemoteProvider {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn separator(&self) -> &str {
        &self.config.separator
    }

    fn score_bare(&self, text: &str) -> Result<ScoredText, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let fingerprint = self.request_fingerprint(Condition::Bare, "", text);
        self.score_prompt(text, Condition::Bare, 0, text, fingerprint)
    }

    fn score_with_context(&self, context: &str, text: &str) -> Result<ScoredText, ProviderError> {
        if text.is_empty() {
            return Err(ProviderError::EmptyText);
        }
        let fingerprint = self.request_fingerprint(Condition::Contextualized, context, text);
        let context = self.fit_context(context, text)?;
        let prompt = format!("{}{}{}", context, self.config.separator, text);
        let target_char_start =
            context.chars().count() + self.config.separator.chars().count();
        self.score_prompt(
            &prompt,
            Condition::Contextualized,
            target_char_start,
            text,
            fingerprint,
        )
    }

    fn request_fingerprint(&self, condition: Condition, context: &str, text: &str) -> String {
        compute_request_fingerprint(
            &self.params(),
            condition,
            context,
            &self.config.separator,
            text,
        )
    }
}
