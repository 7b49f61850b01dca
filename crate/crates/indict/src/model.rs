//! Domain types and the transcript-event grammar every other module
//! produces or consumes, plus whole-record invariant checking.
//!
//! All types are immutable value objects once constructed and serialize to
//! JSON with deterministic field and map ordering, so a run record written
//! twice from the same inputs is byte-identical.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::gateway::BackendBinding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskDomain {
    Code,
    OpenEnded,
}

/// The input: a natural-language instruction plus optional code context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_hint: Option<String>,
    pub domain: TaskDomain,
}

impl Task {
    pub fn code(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            code_context: None,
            language_hint: None,
            domain: TaskDomain::Code,
        }
    }

    pub fn open_ended(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            code_context: None,
            language_hint: None,
            domain: TaskDomain::OpenEnded,
        }
    }

    /// The task as presented to models: the instruction, with any code
    /// context appended as a fenced block.
    pub fn rendered_question(&self) -> String {
        match &self.code_context {
            Some(context) => format!(
                "{}\n\nCode context:\n```{}\n{}\n```",
                self.instruction,
                self.language_hint.as_deref().unwrap_or(""),
                context
            ),
            None => self.instruction.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Preemptive,
    Posthoc,
}

/// One fenced code block extracted from a response.
///
/// `span` holds character offsets into the raw text, covering the block
/// including its fences. Unclosed trailing fences are flagged via the
/// language-tag convention "unclosed".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_tag: Option<String>,
    pub body: String,
    pub span: (usize, usize),
}

pub const UNCLOSED_TAG: &str = "unclosed";

/// A model response with its extracted code blocks and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub raw_text: String,
    pub code_blocks: Vec<CodeBlock>,
    pub stage: Stage,
    pub round: u32,
    /// Index of the prior candidate in the run record, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    Safety,
    Helpfulness,
}

impl CriticKind {
    pub fn label(self) -> &'static str {
        match self {
            CriticKind::Safety => "safety",
            CriticKind::Helpfulness => "helpfulness",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticRole {
    pub kind: CriticKind,
    pub system_prompt_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolActionKind {
    CodeSearch,
    CodeReview,
}

/// A parsed critic action: a textual query, optionally a code snippet, and
/// (code review only) the snippet's execution report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolAction {
    pub kind: ToolActionKind,
    pub text_query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_snippet: Option<CodeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_report: Option<ExecutionReport>,
}

/// One critic's thought/action/observation triple for a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritiqueTurn {
    pub role: CriticRole,
    pub round: u32,
    pub stage: Stage,
    pub thought: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ToolAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    pub final_critique: String,
}

/// Persistent interaction record across rounds and stages, plus the rolling
/// per-round summaries. Events are append-only within a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueState {
    pub events: Vec<CritiqueTurn>,
    pub summaries: BTreeMap<u32, String>,
    /// Index into `events` where preemptive turns end and posthoc begin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_boundary: Option<usize>,
}

impl DialogueState {
    /// Turns belonging to the given round, in append order.
    pub fn round_events(&self, round: u32) -> impl Iterator<Item = &CritiqueTurn> {
        self.events.iter().filter(move |e| e.round == round)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Ok,
    NonzeroExit,
    Timeout,
    SandboxError,
}

/// Outcome of executing one code block in the sandbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub exit_status: ExitStatus,
    pub stdout: String,
    pub stderr: String,
    pub wall_time_ms: u64,
    pub executed_block: CodeBlock,
}

/// A report captured by the orchestrator before a posthoc round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionEvent {
    pub round: u32,
    pub report: ExecutionReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolId {
    WebSearch,
    Wiki,
    LlmKb,
    Interpreter,
}

impl ToolId {
    pub fn as_str(self) -> &'static str {
        match self {
            ToolId::WebSearch => "web_search",
            ToolId::Wiki => "wiki",
            ToolId::LlmKb => "llm_kb",
            ToolId::Interpreter => "interpreter",
        }
    }
}

/// Resource limits for sandboxed execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxLimits {
    pub timeout_ms: u64,
    pub stdout_cap_bytes: usize,
    pub stderr_cap_bytes: usize,
    pub max_concurrent: usize,
    pub allow_network: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox_root: Option<std::path::PathBuf>,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self {
            timeout_ms: 10_000,
            stdout_cap_bytes: 16 * 1024,
            stderr_cap_bytes: 16 * 1024,
            max_concurrent: 4,
            allow_network: false,
            sandbox_root: None,
        }
    }
}

/// Backend bindings per model role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleBindings {
    pub actor: BackendBinding,
    pub safety_critic: BackendBinding,
    pub helpfulness_critic: BackendBinding,
    pub summarizer: BackendBinding,
    pub judge: BackendBinding,
}

/// Full configuration for one run.
///
/// The five-round default budget is split three preemptive plus two posthoc;
/// both halves are independent knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preemptive_rounds: u32,
    pub posthoc_rounds: u32,
    pub inner_interactions_per_round: u32,
    pub max_output_tokens: u32,
    pub samples_per_generation: u32,
    pub tools_enabled: BTreeSet<ToolId>,
    pub posthoc_enabled: bool,
    pub safety_critic_enabled: bool,
    pub helpfulness_critic_enabled: bool,
    /// Insert the raw dialogue history into critic prompts instead of the
    /// rolling summary, and skip summarizer calls.
    pub raw_history: bool,
    /// Include the prior candidate text in revision prompts alongside the
    /// dialogue summary.
    pub revision_includes_prior: bool,
    /// Stop early once the detector reports clean output and the actor
    /// output is unchanged between rounds.
    pub early_exit: bool,
    pub seed: u64,
    /// Observation text is truncated to this many characters before prompt
    /// insertion.
    pub observation_char_limit: usize,
    /// Queries sharing a contiguous instruction substring at least this long
    /// are redacted before tool dispatch.
    pub contamination_threshold: usize,
    pub sandbox: SandboxLimits,
    pub backends: RoleBindings,
}

impl RunConfig {
    /// Total outer rounds across both stages.
    pub fn outer_rounds(&self) -> u32 {
        self.preemptive_rounds + self.posthoc_rounds
    }

    /// Field-named validation problems, empty when the config is usable.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.outer_rounds() < 1 {
            errors.push(
                "outer_rounds: preemptive_rounds + posthoc_rounds must be at least 1".to_string(),
            );
        }
        if self.inner_interactions_per_round < 1 {
            errors.push("inner_interactions_per_round: must be at least 1".to_string());
        }
        if self.max_output_tokens == 0 {
            errors.push("max_output_tokens: must be at least 1".to_string());
        }
        if self.samples_per_generation != 1 {
            errors.push("samples_per_generation: only 1 is supported".to_string());
        }
        for (role, binding) in [
            ("actor", &self.backends.actor),
            ("safety_critic", &self.backends.safety_critic),
            ("helpfulness_critic", &self.backends.helpfulness_critic),
            ("summarizer", &self.backends.summarizer),
            ("judge", &self.backends.judge),
        ] {
            if let Err(e) = binding.validate() {
                errors.push(format!("backends.{role}: {e}"));
            }
        }
        errors
    }

    /// A scripted-everything configuration useful as a base for tests and
    /// offline smoke runs.
    pub fn scripted_default(policy_for_all: crate::gateway::ScriptedPolicy) -> Self {
        let binding = BackendBinding::scripted(policy_for_all);
        Self {
            preemptive_rounds: 3,
            posthoc_rounds: 2,
            inner_interactions_per_round: 1,
            max_output_tokens: 2048,
            samples_per_generation: 1,
            tools_enabled: [
                ToolId::WebSearch,
                ToolId::Wiki,
                ToolId::LlmKb,
                ToolId::Interpreter,
            ]
            .into_iter()
            .collect(),
            posthoc_enabled: true,
            safety_critic_enabled: true,
            helpfulness_critic_enabled: true,
            raw_history: false,
            revision_includes_prior: true,
            early_exit: false,
            seed: 0,
            observation_char_limit: 2_000,
            contamination_threshold: 80,
            sandbox: SandboxLimits::default(),
            backends: RoleBindings {
                actor: binding.clone(),
                safety_critic: binding.clone(),
                helpfulness_critic: binding.clone(),
                summarizer: binding.clone(),
                judge: binding,
            },
        }
    }
}

/// Cumulative accounting for one run. `wall_time_ms` is volatile and excluded
/// from canonical comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub backend_calls: u64,
    pub tokens_in_estimated: u64,
    pub tokens_out_estimated: u64,
    pub wall_time_ms: u64,
}

/// Full transcript of one run: every event, the config, and the final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: Task,
    pub config: RunConfig,
    pub candidates: Vec<Candidate>,
    pub dialogue: DialogueState,
    pub executions: Vec<ExecutionEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub counters: RunCounters,
}

impl RunRecord {
    pub fn final_candidate(&self) -> Option<&Candidate> {
        self.final_index.and_then(|i| self.candidates.get(i))
    }
}

/// One violated invariant, naming the invariant and the offending index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.index {
            Some(i) => write!(f, "{} (index {}): {}", self.invariant, i, self.detail),
            None => write!(f, "{}: {}", self.invariant, self.detail),
        }
    }
}

fn violation(invariant: &str, index: Option<usize>, detail: impl Into<String>) -> Violation {
    Violation {
        invariant: invariant.to_string(),
        index,
        detail: detail.into(),
    }
}

/// Checks every structural invariant of a run record. Returns an empty list
/// iff the record is well-formed; total over all inputs.
pub fn validate_run_record(record: &RunRecord) -> Vec<Violation> {
    let mut out = Vec::new();

    if record.task.instruction.is_empty() {
        out.push(violation(
            "instruction-non-empty",
            None,
            "task instruction is empty",
        ));
    }
    if record.task.domain == TaskDomain::OpenEnded && record.task.code_context.is_some() {
        out.push(violation(
            "open-ended-no-code-context",
            None,
            "open-ended task carries a code context",
        ));
    }

    if let Some(first) = record.candidates.first() {
        if first.stage != Stage::Initial {
            out.push(violation(
                "initial-first",
                Some(0),
                format!("candidates[0].stage is {:?}, expected initial", first.stage),
            ));
        }
    }
    for (i, candidate) in record.candidates.iter().enumerate() {
        let is_initial = candidate.stage == Stage::Initial;
        if is_initial != (candidate.round == 0) {
            out.push(violation(
                "round-zero-iff-initial",
                Some(i),
                format!("stage {:?} with round {}", candidate.stage, candidate.round),
            ));
        }
        if i == 0 {
            if candidate.parent.is_some() {
                out.push(violation(
                    "parent-provenance",
                    Some(0),
                    "first candidate has a parent",
                ));
            }
        } else {
            match candidate.parent {
                None => out.push(violation(
                    "parent-provenance",
                    Some(i),
                    "non-initial candidate lacks a parent reference",
                )),
                Some(p) if p >= i => out.push(violation(
                    "parent-provenance",
                    Some(i),
                    format!("parent index {p} does not precede candidate {i}"),
                )),
                Some(p) => {
                    if record.candidates[p].round >= candidate.round {
                        out.push(violation(
                            "parent-provenance",
                            Some(i),
                            format!(
                                "round {} does not increase over parent round {}",
                                candidate.round, record.candidates[p].round
                            ),
                        ));
                    }
                }
            }
        }

        let expected = crate::sandbox::extract_code_blocks(&candidate.raw_text);
        if expected != candidate.code_blocks {
            out.push(violation(
                "code-blocks-extraction",
                Some(i),
                "stored code blocks differ from re-extraction of raw_text",
            ));
        }
        let text_chars = candidate.raw_text.chars().count();
        let mut spans: Vec<(usize, usize)> = candidate.code_blocks.iter().map(|b| b.span).collect();
        spans.sort_unstable();
        for (b, span) in spans.iter().enumerate() {
            if span.0 > span.1 || span.1 > text_chars {
                out.push(violation(
                    "span-bounds",
                    Some(i),
                    format!("block span {span:?} out of bounds for {text_chars} chars"),
                ));
            }
            if b > 0 && spans[b - 1].1 > span.0 {
                out.push(violation(
                    "span-overlap",
                    Some(i),
                    format!("block spans {:?} and {:?} overlap", spans[b - 1], span),
                ));
            }
        }
    }

    if !record.candidates.is_empty() {
        match record.final_index {
            Some(f) if f == record.candidates.len() - 1 => {}
            other => out.push(violation(
                "final-is-last",
                other.filter(|f| *f < record.candidates.len()),
                "final must reference the last candidate",
            )),
        }
    }

    let mut rounds_seen = BTreeSet::new();
    for (i, event) in record.dialogue.events.iter().enumerate() {
        rounds_seen.insert(event.round);
        if event.round == 0 {
            out.push(violation(
                "round-starts-at-one",
                Some(i),
                "critic turn at round 0",
            ));
        }
        if event.stage == Stage::Initial {
            out.push(violation(
                "turn-stage",
                Some(i),
                "critic turn carries stage initial",
            ));
        }
        if event.final_critique.is_empty() {
            out.push(violation(
                "critique-non-empty",
                Some(i),
                "final critique is empty",
            ));
        }
        if event.action.is_some() != event.observation.is_some() {
            out.push(violation(
                "observation-iff-action",
                Some(i),
                "observation presence must match action presence",
            ));
        }
        if let Some(action) = &event.action {
            if action.kind == ToolActionKind::CodeReview && action.code_snippet.is_none() {
                out.push(violation(
                    "code-review-requires-snippet",
                    Some(i),
                    "code_review action lacks a code snippet",
                ));
            }
            if event.stage == Stage::Preemptive && action.kind == ToolActionKind::CodeReview {
                out.push(violation(
                    "preemptive tool restriction",
                    Some(i),
                    "code_review action in a preemptive-stage turn",
                ));
            }
        }
        if let Some(boundary) = record.dialogue.stage_boundary {
            let expected = if i < boundary {
                Stage::Preemptive
            } else {
                Stage::Posthoc
            };
            if event.stage != Stage::Initial && event.stage != expected {
                out.push(violation(
                    "stage-boundary",
                    Some(i),
                    format!(
                        "event stage {:?} inconsistent with boundary {boundary}",
                        event.stage
                    ),
                ));
            }
        } else if event.stage == Stage::Posthoc {
            out.push(violation(
                "stage-boundary",
                Some(i),
                "posthoc event present but stage_boundary unset",
            ));
        }
    }

    for round in &rounds_seen {
        if !record.dialogue.summaries.contains_key(round) {
            out.push(violation(
                "summary-per-round",
                None,
                format!("no summary recorded for completed round {round}"),
            ));
        }
        let first_safety = record
            .dialogue
            .events
            .iter()
            .position(|e| e.round == *round && e.role.kind == CriticKind::Safety);
        let first_help = record
            .dialogue
            .events
            .iter()
            .position(|e| e.round == *round && e.role.kind == CriticKind::Helpfulness);
        if let (Some(s), Some(h)) = (first_safety, first_help) {
            if s > h {
                out.push(violation(
                    "turn-order",
                    Some(h),
                    format!("helpfulness turn precedes safety turn in round {round}"),
                ));
            }
        }
    }

    for (i, execution) in record.executions.iter().enumerate() {
        if execution.report.exit_status == ExitStatus::Timeout
            && execution.report.wall_time_ms < record.config.sandbox.timeout_ms
        {
            out.push(violation(
                "timeout-wall-time",
                Some(i),
                format!(
                    "timeout report with wall time {} ms below the {} ms limit",
                    execution.report.wall_time_ms, record.config.sandbox.timeout_ms
                ),
            ));
        }
    }

    for error in record.config.validation_errors() {
        out.push(violation("config", None, error));
    }

    out
}

/// Recursively removes volatile timing fields from a serialized record or
/// log line, for byte-exact comparisons between repeated runs.
pub fn strip_volatile_fields(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("wall_time_ms");
            for (_, v) in map.iter_mut() {
                strip_volatile_fields(v);
            }
        }
        serde_json::Value::Array(items) => {
            for item in items.iter_mut() {
                strip_volatile_fields(item);
            }
        }
        _ => {}
    }
}
