//! Critic action parsing and dispatch to external knowledge tools.
//!
//! Actions follow the plain-text grammar `Search[keyword]` / `Review[keyword]`
//! with an optional fenced code snippet. Dispatch queries every enabled
//! knowledge adapter in a fixed order (web search, wiki, LLM knowledge base)
//! and merges the results into one observation; a failing adapter contributes
//! an error entry and never aborts the dispatch. Outgoing queries pass the
//! contamination guard so task instructions are never sent to external
//! services.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Backend, ChatMessage, CompletionRequest};
use crate::model::{ExecutionReport, Stage, Task, ToolAction, ToolActionKind, ToolId};
use crate::sandbox::extract_code_blocks;

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("http status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("response parse: {0}")]
    Parse(String),
    #[error("no recorded fixture for this query (expected {0})")]
    MissingFixture(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("backend: {0}")]
    Backend(#[from] crate::gateway::GatewayError),
}

/// One retrieved result with its source attribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub source: ToolId,
    pub title: String,
    pub excerpt: String,
}

/// Merged result of one dispatch across all enabled adapters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub snippets: Vec<Snippet>,
    pub errors: Vec<(ToolId, String)>,
    pub rendered: String,
}

/// Parses critic action text into a tool action.
///
/// The first `Search[...]`/`Review[...]` marker with non-empty content wins;
/// the first fenced block, if any, becomes the action's code snippet. Review
/// becomes a code review only in the posthoc stage and only with a snippet
/// present; everywhere else it downgrades to a code search. Returns `None`
/// when no marker exists. Total over arbitrary text.
pub fn parse_action(action_text: &str, stage: Stage) -> Option<ToolAction> {
    let (wants_review, text_query) = find_marker(action_text)?;
    let code_snippet = extract_code_blocks(action_text).into_iter().next();
    let kind = if wants_review && stage == Stage::Posthoc && code_snippet.is_some() {
        ToolActionKind::CodeReview
    } else {
        ToolActionKind::CodeSearch
    };
    Some(ToolAction {
        kind,
        text_query,
        code_snippet,
        execution_report: None,
    })
}

fn find_marker(text: &str) -> Option<(bool, String)> {
    let mut best: Option<(usize, bool, String)> = None;
    for (keyword, review) in [("Search[", false), ("Review[", true)] {
        let mut from = 0;
        while let Some(at) = text[from..].find(keyword) {
            let position = from + at;
            // Reject markers embedded in a longer word, e.g. "ReSearch[".
            let standalone = text[..position]
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric());
            let content_start = position + keyword.len();
            if standalone {
                if let Some(close) = text[content_start..].find(']') {
                    let content = text[content_start..content_start + close].trim();
                    if !content.is_empty() && best.as_ref().is_none_or(|(p, _, _)| position < *p) {
                        best = Some((position, review, content.to_string()));
                    }
                }
            }
            from = content_start;
        }
    }
    best.map(|(_, review, query)| (review, query))
}

pub const REDACTION_MARKER: &str = "[redacted]";

/// Longest common substring between two char sequences; returns its length
/// and the matching char range in `a`.
fn longest_common_substring(a: &[char], b: &[char]) -> (usize, std::ops::Range<usize>) {
    if a.is_empty() || b.is_empty() {
        return (0, 0..0);
    }
    let mut previous = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    let mut best_len = 0;
    let mut best_end = 0;
    for (i, &ca) in a.iter().enumerate() {
        for (j, &cb) in b.iter().enumerate() {
            current[j + 1] = if ca == cb { previous[j] + 1 } else { 0 };
            if current[j + 1] > best_len {
                best_len = current[j + 1];
                best_end = i + 1;
            }
        }
        std::mem::swap(&mut previous, &mut current);
    }
    (best_len, best_end - best_len..best_end)
}

/// Redacts any contiguous overlap with the task instruction of at least
/// `threshold` characters, replacing each such span with a marker until no
/// qualifying overlap remains. Queries without long overlaps pass through
/// unchanged.
pub fn guard_query(query: &str, task: &Task, threshold: usize) -> String {
    let threshold = threshold.max(1);
    let instruction: Vec<char> = task.instruction.chars().collect();
    let mut current: Vec<char> = query.chars().collect();
    loop {
        let (len, range) = longest_common_substring(&current, &instruction);
        if len < threshold {
            break;
        }
        let mut replaced: Vec<char> = current[..range.start].to_vec();
        replaced.extend(REDACTION_MARKER.chars());
        replaced.extend_from_slice(&current[range.end..]);
        current = replaced;
    }
    current.into_iter().collect()
}

/// Compact one-line rendering of an execution report, used to extend code
/// review queries and observation text.
pub fn render_execution_compact(report: &ExecutionReport) -> String {
    let status = match report.exit_status {
        crate::model::ExitStatus::Ok => "ok",
        crate::model::ExitStatus::NonzeroExit => "nonzero_exit",
        crate::model::ExitStatus::Timeout => "timeout",
        crate::model::ExitStatus::SandboxError => "sandbox_error",
    };
    let mut out = format!("exit: {status}");
    if !report.stdout.trim().is_empty() {
        out.push_str("; stdout: ");
        out.push_str(truncate_chars(report.stdout.trim(), 300).as_str());
    }
    if !report.stderr.trim().is_empty() {
        out.push_str("; stderr: ");
        out.push_str(truncate_chars(report.stderr.trim(), 500).as_str());
    }
    out
}

pub(crate) fn truncate_chars(text: &str, limit: usize) -> String {
    if text.chars().count() <= limit {
        text.to_string()
    } else {
        text.chars().take(limit).collect()
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv64(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hex digest keying fixture files by query.
pub fn query_hash(query: &str) -> String {
    format!("{:016x}", fnv64(query))
}

/// A knowledge source the critics can query.
pub trait KnowledgeTool: Send + Sync {
    fn id(&self) -> ToolId;
    fn search(&self, query: &str) -> Result<Vec<Snippet>, ToolError>;
}

/// Fixed results, for tests and offline smoke runs.
pub struct StaticTool {
    pub tool_id: ToolId,
    pub snippets: Vec<Snippet>,
    pub error: Option<String>,
}

impl StaticTool {
    pub fn new(tool_id: ToolId, results: &[(&str, &str)]) -> Self {
        Self {
            tool_id,
            snippets: results
                .iter()
                .map(|(title, excerpt)| Snippet {
                    source: tool_id,
                    title: title.to_string(),
                    excerpt: excerpt.to_string(),
                })
                .collect(),
            error: None,
        }
    }

    pub fn failing(tool_id: ToolId, message: &str) -> Self {
        Self {
            tool_id,
            snippets: Vec::new(),
            error: Some(message.to_string()),
        }
    }
}

impl KnowledgeTool for StaticTool {
    fn id(&self) -> ToolId {
        self.tool_id
    }

    fn search(&self, _query: &str) -> Result<Vec<Snippet>, ToolError> {
        match &self.error {
            Some(message) => Err(ToolError::Transport(message.clone())),
            None => Ok(self.snippets.clone()),
        }
    }
}

/// How to pull titles and excerpts out of a search endpoint's response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRules {
    /// Walk `results_path` to an array of objects and read two keys.
    Json {
        results_path: String,
        title_key: String,
        excerpt_key: String,
    },
    /// Apply a regex with two capture groups (title, excerpt) to the body.
    Html { item_pattern: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebSearchConfig {
    pub endpoint: String,
    #[serde(default = "default_query_param")]
    pub query_param: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_param: Option<String>,
    pub extraction: ExtractionRules,
    #[serde(default = "default_max_snippets")]
    pub max_snippets: usize,
    #[serde(default = "default_excerpt_chars")]
    pub excerpt_chars: usize,
    #[serde(default = "default_tool_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_query_param() -> String {
    "q".to_string()
}
fn default_max_snippets() -> usize {
    3
}
fn default_excerpt_chars() -> usize {
    500
}
fn default_tool_timeout_ms() -> u64 {
    10_000
}

pub struct WebSearchTool {
    config: WebSearchConfig,
    agent: ureq::Agent,
}

impl WebSearchTool {
    pub fn new(config: WebSearchConfig) -> Self {
        let agent = http_agent(config.timeout_ms);
        Self { config, agent }
    }
}

fn http_agent(timeout_ms: u64) -> ureq::Agent {
    ureq::Agent::new_with_config(
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build(),
    )
}

fn fetch_text(
    agent: &ureq::Agent,
    endpoint: &str,
    params: &[(&str, &str)],
) -> Result<String, ToolError> {
    let mut request = agent.get(endpoint);
    for (key, value) in params {
        request = request.query(key, value);
    }
    let mut response = request
        .call()
        .map_err(|e| ToolError::Transport(e.to_string()))?;
    let status = response.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(ToolError::Status(status));
    }
    response
        .body_mut()
        .read_to_string()
        .map_err(|e| ToolError::Transport(e.to_string()))
}

fn extract_snippets(
    body: &str,
    rules: &ExtractionRules,
    source: ToolId,
    max_snippets: usize,
    excerpt_chars: usize,
) -> Result<Vec<Snippet>, ToolError> {
    let mut snippets = Vec::new();
    match rules {
        ExtractionRules::Json {
            results_path,
            title_key,
            excerpt_key,
        } => {
            let value: serde_json::Value =
                serde_json::from_str(body).map_err(|e| ToolError::Parse(e.to_string()))?;
            let mut current = &value;
            for component in results_path.split('.').filter(|c| !c.is_empty()) {
                current = match component.parse::<usize>() {
                    Ok(index) => current.get(index),
                    Err(_) => current.get(component),
                }
                .ok_or_else(|| ToolError::Parse(format!("missing path `{results_path}`")))?;
            }
            let items = current
                .as_array()
                .ok_or_else(|| ToolError::Parse(format!("`{results_path}` is not an array")))?;
            for item in items.iter().take(max_snippets) {
                let title = item.get(title_key).and_then(|v| v.as_str()).unwrap_or("");
                let excerpt = item.get(excerpt_key).and_then(|v| v.as_str()).unwrap_or("");
                snippets.push(Snippet {
                    source,
                    title: strip_markup(title),
                    excerpt: truncate_chars(&strip_markup(excerpt), excerpt_chars),
                });
            }
        }
        ExtractionRules::Html { item_pattern } => {
            let pattern =
                regex::Regex::new(item_pattern).map_err(|e| ToolError::Parse(e.to_string()))?;
            for captures in pattern.captures_iter(body).take(max_snippets) {
                let title = captures.get(1).map(|m| m.as_str()).unwrap_or("");
                let excerpt = captures.get(2).map(|m| m.as_str()).unwrap_or("");
                snippets.push(Snippet {
                    source,
                    title: strip_markup(title),
                    excerpt: truncate_chars(&strip_markup(excerpt), excerpt_chars),
                });
            }
        }
    }
    Ok(snippets)
}

fn strip_markup(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_tag = false;
    for ch in text.chars() {
        match ch {
            '<' => in_tag = true,
            '>' if in_tag => in_tag = false,
            c if !in_tag => out.push(c),
            _ => {}
        }
    }
    out.trim().to_string()
}

impl KnowledgeTool for WebSearchTool {
    fn id(&self) -> ToolId {
        ToolId::WebSearch
    }

    fn search(&self, query: &str) -> Result<Vec<Snippet>, ToolError> {
        let key;
        let mut params = vec![(self.config.query_param.as_str(), query)];
        if let (Some(env), Some(param)) = (&self.config.api_key_env, &self.config.api_key_param) {
            key = std::env::var(env)
                .map_err(|_| ToolError::Transport(format!("env var {env} not set")))?;
            params.push((param.as_str(), key.as_str()));
        }
        let body = fetch_text(&self.agent, &self.config.endpoint, &params)?;
        extract_snippets(
            &body,
            &self.config.extraction,
            ToolId::WebSearch,
            self.config.max_snippets,
            self.config.excerpt_chars,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WikiConfig {
    #[serde(default = "default_wiki_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_max_snippets")]
    pub max_snippets: usize,
    #[serde(default = "default_excerpt_chars")]
    pub excerpt_chars: usize,
    #[serde(default = "default_tool_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_wiki_endpoint() -> String {
    "https://en.wikipedia.org/w/rest.php/v1/search/page".to_string()
}

impl Default for WikiConfig {
    fn default() -> Self {
        Self {
            endpoint: default_wiki_endpoint(),
            max_snippets: default_max_snippets(),
            excerpt_chars: default_excerpt_chars(),
            timeout_ms: default_tool_timeout_ms(),
        }
    }
}

pub struct WikiTool {
    config: WikiConfig,
    agent: ureq::Agent,
}

impl WikiTool {
    pub fn new(config: WikiConfig) -> Self {
        let agent = http_agent(config.timeout_ms);
        Self { config, agent }
    }
}

impl KnowledgeTool for WikiTool {
    fn id(&self) -> ToolId {
        ToolId::Wiki
    }

    fn search(&self, query: &str) -> Result<Vec<Snippet>, ToolError> {
        let limit = self.config.max_snippets.to_string();
        let body = fetch_text(
            &self.agent,
            &self.config.endpoint,
            &[("q", query), ("limit", &limit)],
        )?;
        extract_snippets(
            &body,
            &ExtractionRules::Json {
                results_path: "pages".to_string(),
                title_key: "title".to_string(),
                excerpt_key: "excerpt".to_string(),
            },
            ToolId::Wiki,
            self.config.max_snippets,
            self.config.excerpt_chars,
        )
    }
}

/// Any chat backend used in single-shot question answering mode.
pub struct LlmKbTool {
    backend: Arc<Backend>,
    max_tokens: u32,
    excerpt_chars: usize,
}

impl LlmKbTool {
    pub fn new(backend: Arc<Backend>, max_tokens: u32) -> Self {
        Self {
            backend,
            max_tokens,
            excerpt_chars: default_excerpt_chars(),
        }
    }
}

impl KnowledgeTool for LlmKbTool {
    fn id(&self) -> ToolId {
        ToolId::LlmKb
    }

    fn search(&self, query: &str) -> Result<Vec<Snippet>, ToolError> {
        let request = CompletionRequest::build(
            vec![
                ChatMessage::system(
                    "You are a concise knowledge base. Answer the query factually in a few sentences.",
                ),
                ChatMessage::user(query),
            ],
            self.max_tokens,
            self.max_tokens,
            0.0,
            None,
        )?;
        let answer = self.backend.complete(&request)?;
        Ok(vec![Snippet {
            source: ToolId::LlmKb,
            title: "knowledge base answer".to_string(),
            excerpt: truncate_chars(answer.trim(), self.excerpt_chars),
        }])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureFile {
    query: String,
    snippets: Vec<Snippet>,
}

/// Replays recorded responses from a directory keyed by query hash.
pub struct FixtureTool {
    dir: PathBuf,
    emulates: ToolId,
}

impl FixtureTool {
    pub fn new(dir: impl Into<PathBuf>, emulates: ToolId) -> Self {
        Self {
            dir: dir.into(),
            emulates,
        }
    }

    pub fn fixture_path(dir: &std::path::Path, tool: ToolId, query: &str) -> PathBuf {
        dir.join(tool.as_str())
            .join(format!("{}.json", query_hash(query)))
    }
}

impl KnowledgeTool for FixtureTool {
    fn id(&self) -> ToolId {
        self.emulates
    }

    fn search(&self, query: &str) -> Result<Vec<Snippet>, ToolError> {
        let path = Self::fixture_path(&self.dir, self.emulates, query);
        let content = std::fs::read_to_string(&path)
            .map_err(|_| ToolError::MissingFixture(path.display().to_string()))?;
        let fixture: FixtureFile =
            serde_json::from_str(&content).map_err(|e| ToolError::Parse(e.to_string()))?;
        Ok(fixture.snippets)
    }
}

/// Passes queries through to a live adapter and records each response as a
/// replayable fixture.
pub struct RecordingTool {
    inner: Box<dyn KnowledgeTool>,
    dir: PathBuf,
}

impl RecordingTool {
    pub fn new(inner: Box<dyn KnowledgeTool>, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl KnowledgeTool for RecordingTool {
    fn id(&self) -> ToolId {
        self.inner.id()
    }

    fn search(&self, query: &str) -> Result<Vec<Snippet>, ToolError> {
        let snippets = self.inner.search(query)?;
        let path = FixtureTool::fixture_path(&self.dir, self.inner.id(), query);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let fixture = FixtureFile {
            query: query.to_string(),
            snippets: snippets.clone(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&fixture)?)?;
        Ok(snippets)
    }
}

impl From<serde_json::Error> for ToolError {
    fn from(e: serde_json::Error) -> Self {
        ToolError::Parse(e.to_string())
    }
}

/// The adapter set for one run, queried sequentially in construction order.
pub struct ToolLayer {
    tools: Vec<Box<dyn KnowledgeTool>>,
    contamination_threshold: usize,
}

impl ToolLayer {
    pub fn new(tools: Vec<Box<dyn KnowledgeTool>>, contamination_threshold: usize) -> Self {
        Self {
            tools,
            contamination_threshold,
        }
    }

    /// No knowledge adapters; critic turns degrade to thought-only.
    pub fn offline() -> Self {
        Self {
            tools: Vec::new(),
            contamination_threshold: 80,
        }
    }

    pub fn has_knowledge_tools(&self) -> bool {
        !self.tools.is_empty()
    }

    /// Queries every adapter with the guarded query and merges the results.
    /// Code review actions extend the query with a compact execution-report
    /// rendering. All-adapter failure degrades to an error-only observation.
    pub fn dispatch(
        &self,
        action: &ToolAction,
        task: &Task,
        report: Option<&ExecutionReport>,
    ) -> Observation {
        let mut query = action.text_query.clone();
        if let Some(snippet) = &action.code_snippet {
            query.push_str("\ncode snippet:\n");
            query.push_str(&truncate_chars(&snippet.body, 500));
        }
        if action.kind == ToolActionKind::CodeReview {
            if let Some(report) = report {
                query.push('\n');
                query.push_str(&render_execution_compact(report));
            }
        }
        let guarded = guard_query(&query, task, self.contamination_threshold);

        let mut observation = Observation::default();
        for tool in &self.tools {
            match tool.search(&guarded) {
                Ok(snippets) => observation.snippets.extend(snippets),
                Err(e) => observation.errors.push((tool.id(), e.to_string())),
            }
        }
        if observation.snippets.is_empty() && observation.errors.is_empty() {
            observation.errors.push((
                ToolId::Interpreter,
                "no knowledge adapters enabled".to_string(),
            ));
        }
        observation.rendered = render_observation(&observation);
        observation
    }
}

fn render_observation(observation: &Observation) -> String {
    let mut lines = Vec::new();
    for snippet in &observation.snippets {
        lines.push(format!(
            "[{}] {}: {}",
            snippet.source.as_str(),
            snippet.title,
            snippet.excerpt
        ));
    }
    for (source, message) in &observation.errors {
        lines.push(format!("[{} error] {}", source.as_str(), message));
    }
    lines.join("\n")
}
