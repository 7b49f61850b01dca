//! Chat-completion contract over model backends.
//!
//! Two backend kinds share one calling convention: a deterministic scripted
//! policy for tests and offline runs, and a generic HTTP client speaking a
//! chat-completion-style JSON protocol. Scripted backends are pure functions
//! of (policy, request) and log every call.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid backend binding: {0}")]
    InvalidBinding(String),
    #[error("scripted policy matched nothing and has no default response")]
    NoScriptMatch,
    #[error("invalid scripted matcher pattern `{pattern}`: {message}")]
    BadMatcher { pattern: String, message: String },
    #[error("auth environment variable {0} is not set")]
    MissingAuth(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned status {status} after {attempts} attempt(s)")]
    BadStatus { status: u16, attempts: u32 },
    #[error("backend response has no text at path `{0}`")]
    MissingResponseText(String),
    #[error("{role} message content must not be empty")]
    EmptyContent { role: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
    Tool,
}

impl MessageRole {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageRole::System => "system",
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
            MessageRole::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_sequences: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    /// Builds a request whose `max_tokens` never exceeds `cap`.
    ///
    /// System and user messages must carry non-empty content.
    pub fn build(
        messages: Vec<ChatMessage>,
        requested_max_tokens: u32,
        cap: u32,
        temperature: f32,
        seed: Option<u64>,
    ) -> Result<Self, GatewayError> {
        for message in &messages {
            let empty = message.content.trim().is_empty();
            match message.role {
                MessageRole::System if empty => {
                    return Err(GatewayError::EmptyContent { role: "system" })
                }
                MessageRole::User if empty => {
                    return Err(GatewayError::EmptyContent { role: "user" })
                }
                _ => {}
            }
        }
        Ok(Self {
            messages,
            max_tokens: requested_max_tokens.min(cap),
            temperature,
            stop_sequences: None,
            seed,
        })
    }

    /// Concatenation of all messages, role-labelled; the text scripted
    /// matchers run against and the text logged per call.
    pub fn rendered_prompt(&self) -> String {
        let mut out = String::new();
        for message in &self.messages {
            out.push_str(message.role.as_str());
            out.push_str(": ");
            out.push_str(&message.content);
            out.push('\n');
        }
        out
    }
}

/// Rough token estimate used for budget accounting when a backend reports
/// none: whitespace-delimited words x 1.3, rounded up. Never used to truncate
/// model output.
pub fn estimate_tokens(text: &str) -> u64 {
    let words = text.split_whitespace().count() as u64;
    (words * 13).div_ceil(10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Http,
}

/// Matcher over the rendered prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Substring containment.
    Contains(String),
    /// Regular-expression search.
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRule {
    pub matcher: Matcher,
    pub response: String,
    /// When set, the full rendered prompt is appended to `response`, so a
    /// policy can act as a prefix-echo (e.g. a summarizer stand-in).
    #[serde(default)]
    pub echo_input: bool,
}

/// Ordered first-match-wins response policy for scripted backends.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    #[serde(default)]
    pub rules: Vec<ScriptedRule>,
    #[serde(default)]
    pub default_response: Option<String>,
    #[serde(default)]
    pub default_echo: bool,
}

impl ScriptedPolicy {
    pub fn always(response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: Some(response.into()),
            default_echo: false,
        }
    }

    pub fn echo(prefix: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: Some(prefix.into()),
            default_echo: true,
        }
    }

    pub fn rule(mut self, matcher: Matcher, response: impl Into<String>) -> Self {
        self.rules.push(ScriptedRule {
            matcher,
            response: response.into(),
            echo_input: false,
        });
        self
    }

    fn respond(&self, rendered_prompt: &str) -> Result<String, GatewayError> {
        for rule in &self.rules {
            let hit = match &rule.matcher {
                Matcher::Contains(needle) => rendered_prompt.contains(needle),
                Matcher::Pattern(pattern) => regex::Regex::new(pattern)
                    .map_err(|e| GatewayError::BadMatcher {
                        pattern: pattern.clone(),
                        message: e.to_string(),
                    })?
                    .is_match(rendered_prompt),
            };
            if hit {
                let mut out = rule.response.clone();
                if rule.echo_input {
                    out.push_str(rendered_prompt);
                }
                return Ok(out);
            }
        }
        match &self.default_response {
            Some(default) => {
                let mut out = default.clone();
                if self.default_echo {
                    out.push_str(rendered_prompt);
                }
                Ok(out)
            }
            None => Err(GatewayError::NoScriptMatch),
        }
    }
}

/// Declarative description of one model backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendBinding {
    pub backend_kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ScriptedPolicy>,
    /// Dot-separated path to the assistant text in the HTTP response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_text_path: Option<String>,
    /// Backoff delays between retries, in milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_delays_ms: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_timeout_ms: Option<u64>,
}

pub const DEFAULT_RESPONSE_TEXT_PATH: &str = "choices.0.message.content";
pub const DEFAULT_RETRY_DELAYS_MS: [u64; 3] = [1_000, 2_000, 4_000];

impl BackendBinding {
    pub fn scripted(policy: ScriptedPolicy) -> Self {
        Self {
            backend_kind: BackendKind::Scripted,
            endpoint: None,
            model_name: None,
            auth_env_var: None,
            script: Some(policy),
            response_text_path: None,
            retry_delays_ms: None,
            request_timeout_ms: None,
        }
    }

    pub fn http(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            backend_kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            model_name: Some(model_name.into()),
            auth_env_var: None,
            script: None,
            response_text_path: None,
            retry_delays_ms: None,
            request_timeout_ms: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.backend_kind {
            BackendKind::Scripted => {
                let Some(script) = &self.script else {
                    return Err(GatewayError::InvalidBinding(
                        "scripted binding requires a script".into(),
                    ));
                };
                for rule in &script.rules {
                    if let Matcher::Pattern(pattern) = &rule.matcher {
                        regex::Regex::new(pattern).map_err(|e| GatewayError::BadMatcher {
                            pattern: pattern.clone(),
                            message: e.to_string(),
                        })?;
                    }
                }
            }
            BackendKind::Http => {
                if self.endpoint.is_none() || self.model_name.is_none() {
                    return Err(GatewayError::InvalidBinding(
                        "http binding requires endpoint and model_name".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One logged scripted call: the rendered prompt it saw and the text returned.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub rendered_prompt: String,
    pub response: String,
}

/// Runtime backend instance. Safe for concurrent calls; the scripted call
/// log is internally synchronized.
pub struct Backend {
    binding: BackendBinding,
    calls: Mutex<Vec<CallRecord>>,
    call_count: AtomicU64,
    tokens_in: AtomicU64,
    tokens_out: AtomicU64,
    agent: Option<ureq::Agent>,
}

impl Backend {
    pub fn new(binding: BackendBinding) -> Result<Self, GatewayError> {
        binding.validate()?;
        let agent = match binding.backend_kind {
            BackendKind::Http => {
                let timeout = binding.request_timeout_ms.unwrap_or(60_000);
                let config = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_millis(timeout)))
                    .http_status_as_error(false)
                    .build();
                Some(ureq::Agent::new_with_config(config))
            }
            BackendKind::Scripted => None,
        };
        Ok(Self {
            binding,
            calls: Mutex::new(Vec::new()),
            call_count: AtomicU64::new(0),
            tokens_in: AtomicU64::new(0),
            tokens_out: AtomicU64::new(0),
            agent,
        })
    }

    pub fn binding(&self) -> &BackendBinding {
        &self.binding
    }

    /// Completes the request and returns the assistant text.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.call_count.fetch_add(1, Ordering::SeqCst);
        let rendered = request.rendered_prompt();
        self.tokens_in
            .fetch_add(estimate_tokens(&rendered), Ordering::SeqCst);
        let response = match self.binding.backend_kind {
            BackendKind::Scripted => {
                let policy = self
                    .binding
                    .script
                    .as_ref()
                    .expect("validated scripted binding has a script");
                let response = policy.respond(&rendered)?;
                self.calls
                    .lock()
                    .expect("call log poisoned")
                    .push(CallRecord {
                        rendered_prompt: rendered,
                        response: response.clone(),
                    });
                response
            }
            BackendKind::Http => self.complete_http(request)?,
        };
        self.tokens_out
            .fetch_add(estimate_tokens(&response), Ordering::SeqCst);
        Ok(response)
    }

    fn complete_http(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let endpoint = self
            .binding
            .endpoint
            .as_deref()
            .expect("validated http binding");
        let model = self
            .binding
            .model_name
            .as_deref()
            .expect("validated http binding");
        let token = match &self.binding.auth_env_var {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| GatewayError::MissingAuth(var.clone()))?)
            }
            None => None,
        };

        let mut body = serde_json::json!({
            "model": model,
            "messages": request
                .messages
                .iter()
                .map(|m| serde_json::json!({"role": m.role.as_str(), "content": m.content}))
                .collect::<Vec<_>>(),
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        });
        if let Some(stop) = &request.stop_sequences {
            body["stop"] = serde_json::json!(stop);
        }
        if let Some(seed) = request.seed {
            body["seed"] = serde_json::json!(seed);
        }

        let delays = self
            .binding
            .retry_delays_ms
            .clone()
            .unwrap_or_else(|| DEFAULT_RETRY_DELAYS_MS.to_vec());
        let agent = self.agent.as_ref().expect("http backend has an agent");

        let mut attempts = 0u32;
        let mut last_status: Option<u16> = None;
        let mut last_transport: Option<String> = None;
        for attempt in 0..=delays.len() {
            attempts += 1;
            let mut req = agent.post(endpoint);
            if let Some(token) = &token {
                req = req.header("authorization", &format!("Bearer {token}"));
            }
            match req.send_json(&body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        let value: serde_json::Value =
                            response.body_mut().read_json().map_err(|e| {
                                GatewayError::Transport {
                                    attempts,
                                    message: e.to_string(),
                                }
                            })?;
                        let path = self
                            .binding
                            .response_text_path
                            .as_deref()
                            .unwrap_or(DEFAULT_RESPONSE_TEXT_PATH);
                        return extract_json_path(&value, path)
                            .ok_or_else(|| GatewayError::MissingResponseText(path.to_string()));
                    }
                    last_status = Some(status);
                    last_transport = None;
                }
                Err(e) => {
                    last_transport = Some(e.to_string());
                }
            }
            if attempt < delays.len() {
                std::thread::sleep(Duration::from_millis(delays[attempt]));
            }
        }
        if let Some(message) = last_transport {
            Err(GatewayError::Transport { attempts, message })
        } else {
            Err(GatewayError::BadStatus {
                status: last_status.unwrap_or(0),
                attempts,
            })
        }
    }

    /// Snapshot of the scripted call log.
    pub fn call_log(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn call_count(&self) -> u64 {
        self.call_count.load(Ordering::SeqCst)
    }

    /// Estimated (input, output) token totals across all calls so far.
    pub fn token_totals(&self) -> (u64, u64) {
        (
            self.tokens_in.load(Ordering::SeqCst),
            self.tokens_out.load(Ordering::SeqCst),
        )
    }
}

/// Walks a dot-separated path through a JSON value; numeric components index
/// arrays.
fn extract_json_path(value: &serde_json::Value, path: &str) -> Option<String> {
    let mut current = value;
    for component in path.split('.') {
        current = match component.parse::<usize>() {
            Ok(index) => current.get(index)?,
            Err(_) => current.get(component)?,
        };
    }
    current.as_str().map(|s| s.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest::build(vec![ChatMessage::user(prompt)], 2048, 2048, 0.0, Some(7))
            .expect("valid request")
    }

    #[test]
    fn scripted_first_match_wins() {
        let policy = ScriptedPolicy::always("OK")
            .rule(
                Matcher::Contains("buffer overflow".into()),
                "CRITIQUE: unsafe strcpy",
            )
            .rule(
                Matcher::Contains("buffer".into()),
                "never reached for overflow prompts",
            );
        let backend = Backend::new(BackendBinding::scripted(policy)).unwrap();
        let out = backend
            .complete(&request("this code has a buffer overflow in it"))
            .unwrap();
        assert_eq!(out, "CRITIQUE: unsafe strcpy");
    }

    #[test]
    fn scripted_default_when_nothing_matches() {
        let policy = ScriptedPolicy::always("OK").rule(
            Matcher::Contains("buffer overflow".into()),
            "CRITIQUE: unsafe strcpy",
        );
        let backend = Backend::new(BackendBinding::scripted(policy)).unwrap();
        assert_eq!(backend.complete(&request("all fine here")).unwrap(), "OK");
    }

    #[test]
    fn scripted_no_match_no_default_is_configuration_error() {
        let policy = ScriptedPolicy {
            rules: vec![ScriptedRule {
                matcher: Matcher::Contains("x".into()),
                response: "y".into(),
                echo_input: false,
            }],
            default_response: None,
            default_echo: false,
        };
        let backend = Backend::new(BackendBinding::scripted(policy)).unwrap();
        assert!(matches!(
            backend.complete(&request("nothing relevant")),
            Err(GatewayError::NoScriptMatch)
        ));
    }

    #[test]
    fn identical_scripted_calls_are_byte_identical() {
        let backend =
            Backend::new(BackendBinding::scripted(ScriptedPolicy::echo("SUMMARY: "))).unwrap();
        let a = backend.complete(&request("critique dialogue")).unwrap();
        let b = backend.complete(&request("critique dialogue")).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("SUMMARY: "));
        assert_eq!(backend.call_count(), 2);
        assert_eq!(backend.call_log().len(), 2);
    }

    #[test]
    fn request_budget_is_clamped_at_construction() {
        let req =
            CompletionRequest::build(vec![ChatMessage::user("hello")], 1_000_000, 2048, 0.2, None)
                .unwrap();
        assert_eq!(req.max_tokens, 2048);
    }

    #[test]
    fn empty_user_content_is_rejected() {
        let result = CompletionRequest::build(vec![ChatMessage::user("  ")], 10, 10, 0.0, None);
        assert!(matches!(
            result,
            Err(GatewayError::EmptyContent { role: "user" })
        ));
    }

    #[test]
    fn binding_validation_requirements() {
        let mut binding = BackendBinding::scripted(ScriptedPolicy::always("x"));
        binding.script = None;
        assert!(binding.validate().is_err());

        let mut http = BackendBinding::http("http://localhost:1", "m");
        http.model_name = None;
        assert!(http.validate().is_err());

        let broken_pattern = BackendBinding::scripted(
            ScriptedPolicy::always("x").rule(Matcher::Pattern("[unclosed".into()), "y"),
        );
        assert!(matches!(
            broken_pattern.validate(),
            Err(GatewayError::BadMatcher { .. })
        ));
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("one"), 2); // 1.3 -> 2
        assert_eq!(estimate_tokens("a b c d e f g h i j"), 13);
    }
}
