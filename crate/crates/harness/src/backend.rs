//! Generation backends behind the core [`Generator`] interface.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use rlv_core::rng::StreamRng;
use rlv_core::task::{parse_tokens, render};
use rlv_core::{Decoding, Generator, Policy64, Token};

use crate::error::{HarnessError, Result};

pub const DEFAULT_BACKOFF_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Builtin,
    Remote,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "builtin" => Ok(BackendKind::Builtin),
            "remote" => Ok(BackendKind::Remote),
            _ => Err("expected `builtin` or `remote`".into()),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Builtin => "builtin",
            BackendKind::Remote => "remote",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
}

impl BackendSpec {
    pub fn remote(endpoint: impl Into<String>) -> Self {
        BackendSpec {
            kind: BackendKind::Remote,
            endpoint: endpoint.into(),
            model: "rlv".into(),
            timeout_ms: 10_000,
            max_retries: 3,
            backoff_ms: DEFAULT_BACKOFF_MS,
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    text: String,
}

/// Completion client for an external endpoint. Prompts and completions travel
/// as space-separated token names.
pub struct RemoteGenerator {
    spec: BackendSpec,
    agent: ureq::Agent,
    temperature: f64,
    /// Retries spent by the most recent request.
    pub last_retries: u32,
}

impl RemoteGenerator {
    pub fn new(spec: BackendSpec, temperature: f64) -> Result<Self> {
        if spec.kind != BackendKind::Remote || spec.endpoint.is_empty() {
            return Err(HarnessError::Config("remote backend needs `backend.endpoint`".into()));
        }
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(spec.timeout_ms)))
            .http_status_as_error(false)
            .build();
        Ok(RemoteGenerator { agent: ureq::Agent::new_with_config(config), spec, temperature, last_retries: 0 })
    }

    /// One completion with retries on transport failures and 5xx statuses.
    pub fn complete(&mut self, prompt: &str, max_tokens: usize) -> Result<String> {
        let body = CompletionRequest { model: &self.spec.model, prompt, max_tokens, temperature: self.temperature };
        let mut last_error = String::new();
        for attempt in 0..=self.spec.max_retries {
            self.last_retries = attempt;
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.spec.backoff_ms << (attempt - 1).min(16)));
            }
            match self.agent.post(&self.spec.endpoint).send_json(&body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status >= 500 {
                        last_error = format!("status {status}");
                        continue;
                    }
                    if status != 200 {
                        return Err(HarnessError::Protocol(format!("status {status}")));
                    }
                    let parsed: CompletionResponse =
                        resp.body_mut().read_json().map_err(|e| HarnessError::Protocol(e.to_string()))?;
                    return Ok(parsed.text);
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(HarnessError::BackendUnavailable(format!(
            "{} after {} retries: {last_error}",
            self.spec.endpoint, self.spec.max_retries
        )))
    }
}

impl Generator for RemoteGenerator {
    fn generate(&mut self, prompt: &[Token], max_new: usize) -> rlv_core::Result<Vec<Token>> {
        let text = self.complete(&render(prompt), max_new).map_err(|e| rlv_core::Error::Backend(e.to_string()))?;
        parse_tokens(&text).map_err(|e| rlv_core::Error::Backend(format!("malformed completion: {e}")))
    }
}

/// The trained policy as a generator.
pub struct BuiltinGenerator<'a> {
    pub policy: &'a Policy64,
    pub decoding: Decoding,
    pub rng: StreamRng,
}

impl Generator for BuiltinGenerator<'_> {
    fn generate(&mut self, prompt: &[Token], max_new: usize) -> rlv_core::Result<Vec<Token>> {
        Ok(self.policy.continue_from(prompt, max_new, self.decoding, &mut self.rng).0)
    }
}

/// Maps a core error raised inside generation back to the harness taxonomy.
pub fn lift(e: rlv_core::Error) -> HarnessError {
    match e {
        rlv_core::Error::Backend(msg) => HarnessError::BackendUnavailable(msg),
        other => HarnessError::Core(other),
    }
}
