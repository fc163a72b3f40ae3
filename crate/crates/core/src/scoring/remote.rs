//! Client for an OpenAI-style `/completions` endpoint.
//!
//! Continuations are scored by echoing `prompt + continuation` with
//! `max_tokens = 0` and summing the log-probabilities of every token that
//! overlaps the continuation. A token that straddles the boundary (a leading
//! space merged with the first word, typically) is counted with the
//! continuation.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::{RenderedPrompt, ScoringBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL including any version prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first failed one.
    pub retries: u32,
    pub backoff_ms: u64,
    /// Divide the summed log-probability by the continuation token count.
    pub length_normalized: bool,
    pub api_key: Option<String>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            timeout_ms: 30_000,
            retries: 2,
            backoff_ms: 200,
            length_normalized: false,
            api_key: None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<LogProbs>,
}

#[derive(Debug, Deserialize)]
struct LogProbs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

pub struct RemoteBackend {
    config: RemoteConfig,
    endpoint: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend").field("config", &self.config).finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let base = config.base_url.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) || base.len() <= "https://".len() {
            return Err(Error::Config(format!("invalid backend URL {:?}", config.base_url)));
        }
        let endpoint = format!("{base}/completions");
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            endpoint,
            agent,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post(&self, body: &Value) -> Result<CompletionResponse> {
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.post_once(body) {
                Ok(resp) => return Ok(resp),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::warn!(attempt, "completion request failed: {msg}");
                    last = msg;
                }
            }
        }
        Err(Error::BackendUnavailable(format!(
            "{} failed after {} attempts: {last}",
            self.endpoint,
            self.config.retries + 1
        )))
    }

    fn post_once(&self, body: &Value) -> std::result::Result<CompletionResponse, Attempt> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("http status {status}")));
        }
        if status >= 400 {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(Error::BackendUnavailable(format!(
                "http status {status}: {detail}"
            ))));
        }
        response
            .body_mut()
            .read_json::<CompletionResponse>()
            .map_err(|e| Attempt::Fatal(Error::BackendUnavailable(format!("malformed response: {e}"))))
    }
}

/// Sum the log-probabilities of tokens that overlap `[prompt_chars, ..)`.
fn continuation_logprob(logprobs: &LogProbs, prompt_chars: usize, length_normalized: bool) -> Result<f64> {
    let n = logprobs.token_logprobs.len().min(logprobs.text_offset.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let end = logprobs.text_offset.get(i + 1).copied().unwrap_or(usize::MAX);
        if end <= prompt_chars {
            continue;
        }
        let lp = logprobs.token_logprobs[i]
            .ok_or_else(|| Error::Capability("continuation token has no log-probability".into()))?;
        total += lp;
        count += 1;
    }
    if length_normalized && count > 0 {
        total /= count as f64;
    }
    Ok(total.min(0.0))
}

impl ScoringBackend for RemoteBackend {
    fn score_continuation(&self, prompt: &RenderedPrompt, continuation: &str) -> Result<f64> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{}{}", prompt.text, continuation),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0.0,
        });
        let response = self.post(&body)?;
        let choice = response
            .choices
            .first()
            .ok_or_else(|| Error::BackendUnavailable("response has no choices".into()))?;
        let logprobs = choice
            .logprobs
            .as_ref()
            .ok_or_else(|| Error::Capability("endpoint did not return echoed log-probabilities".into()))?;
        continuation_logprob(logprobs, prompt.text.chars().count(), self.config.length_normalized)
    }

    fn generate(&self, prompt: &RenderedPrompt, max_tokens: usize) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt.text,
            "max_tokens": max_tokens,
            "temperature": 0.0,
        });
        let response = self.post(&body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::BackendUnavailable("response has no choices".into()))?;
        Ok(choice.text.trim().to_owned())
    }
}
