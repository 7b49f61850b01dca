//! One critic interaction round: the safety critic's thought, action,
//! observation, and critique, then the helpfulness critic's, conditioned on
//! the safety critique of the same round, then the dialogue summary.
//!
//! A turn issues separate completions for the thought and the action; the
//! observation comes from the tool layer, and the final critique is the
//! thought composed with the observation. Unparseable action text degrades a
//! turn to thought-only rather than erroring, since model output is
//! unreliable in unattended batch runs.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::gateway::{Backend, ChatMessage, CompletionRequest, GatewayError};
use crate::model::{
    CriticKind, CriticRole, CritiqueTurn, DialogueState, RoleBindings, RunConfig, Stage, Task,
    ToolActionKind, ToolId,
};
use crate::prompts::{PromptError, PromptKit};
use crate::sandbox::Executor;
use crate::tools::{parse_action, truncate_chars, ToolLayer};

/// Temperature used for critics, the summarizer, and judges.
pub const ANALYSIS_TEMPERATURE: f32 = 0.0;
/// Temperature used for the actor.
pub const ACTOR_TEMPERATURE: f32 = 0.2;

/// Marker shown to posthoc critics when the candidate has nothing to run.
pub const NO_EXECUTABLE_CODE: &str = "no executable code found";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{role} backend in round {round}: {source}")]
    Backend {
        role: &'static str,
        round: u32,
        source: GatewayError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Runtime backend instances, one per model role.
pub struct RoleBackends {
    pub actor: Arc<Backend>,
    pub safety: Arc<Backend>,
    pub helpfulness: Arc<Backend>,
    pub summarizer: Arc<Backend>,
    pub judge: Arc<Backend>,
}

impl RoleBackends {
    pub fn from_bindings(bindings: &RoleBindings) -> Result<Self, GatewayError> {
        Ok(Self {
            actor: Arc::new(Backend::new(bindings.actor.clone())?),
            safety: Arc::new(Backend::new(bindings.safety_critic.clone())?),
            helpfulness: Arc::new(Backend::new(bindings.helpfulness_critic.clone())?),
            summarizer: Arc::new(Backend::new(bindings.summarizer.clone())?),
            judge: Arc::new(Backend::new(bindings.judge.clone())?),
        })
    }

    fn critic(&self, kind: CriticKind) -> &Backend {
        match kind {
            CriticKind::Safety => &self.safety,
            CriticKind::Helpfulness => &self.helpfulness,
        }
    }
}

pub struct CriticEngine<'a> {
    pub kit: &'a PromptKit,
    pub tools: &'a ToolLayer,
    pub executor: &'a Executor,
    pub config: &'a RunConfig,
    pub backends: &'a RoleBackends,
}

impl CriticEngine<'_> {
    fn knowledge_tools_active(&self) -> bool {
        self.tools.has_knowledge_tools()
    }

    fn request(
        &self,
        system: String,
        user: String,
        temperature: f32,
    ) -> Result<CompletionRequest, GatewayError> {
        CompletionRequest::build(
            vec![ChatMessage::system(system), ChatMessage::user(user)],
            self.config.max_output_tokens,
            self.config.max_output_tokens,
            temperature,
            Some(self.config.seed),
        )
    }

    /// The dialogue context inserted into a critic prompt for `round`:
    /// the previous round's rolling summary (or the raw history under the
    /// no-summary ablation), extended with the same-round safety critique
    /// for the helpfulness critic.
    fn scratchpad(
        &self,
        state: &DialogueState,
        round: u32,
        stage: Stage,
        peer_critique: Option<&str>,
    ) -> String {
        let mut scratch = if self.config.raw_history {
            history_view(state, stage)
        } else {
            match round
                .checked_sub(1)
                .filter(|r| *r >= 1)
                .and_then(|r| state.summaries.get(&r))
            {
                Some(summary) => format!("Dialogue summary so far:\n{summary}"),
                None => String::new(),
            }
        };
        if scratch.is_empty() {
            scratch = "(no critic dialogue yet)".to_string();
        }
        if let Some(peer) = peer_critique {
            if !peer.is_empty() {
                scratch.push_str("\n\nSafety critic (this round):\n");
                scratch.push_str(peer);
            }
        }
        scratch
    }

    /// Runs one critic turn per the thought/action/observation decomposition.
    ///
    /// `execution_summary` must be provided for posthoc turns (the rendered
    /// report of the candidate's latest execution, or the no-code marker);
    /// `peer_critique` carries the same-round safety critique into the
    /// helpfulness critic's conditioning.
    #[allow(clippy::too_many_arguments)]
    pub fn critic_turn(
        &self,
        kind: CriticKind,
        task: &Task,
        candidate_text: &str,
        state: &DialogueState,
        round: u32,
        stage: Stage,
        execution_summary: Option<&str>,
        peer_critique: Option<&str>,
    ) -> Result<CritiqueTurn, EngineError> {
        let backend = self.backends.critic(kind);
        let wrap = |source: GatewayError| EngineError::Backend {
            role: kind.label(),
            round,
            source,
        };
        let bundle = self.kit.select_critic_bundle(kind, stage, task.domain)?;
        let system = self.kit.render(&bundle.system_id, &BTreeMap::new())?;
        let scratch = self.scratchpad(state, round, stage, peer_critique);

        let mut bindings: BTreeMap<&str, String> = BTreeMap::new();
        bindings.insert("question", task.rendered_question());
        bindings.insert("answer", candidate_text.to_string());
        bindings.insert("scratchpad", scratch.clone());
        if stage == Stage::Posthoc {
            bindings.insert(
                "execution_result",
                execution_summary.unwrap_or(NO_EXECUTABLE_CODE).to_string(),
            );
        }
        let thought_prompt = self.kit.render(&bundle.thought_id, &bindings)?;
        let thought = backend
            .complete(
                &self
                    .request(system.clone(), thought_prompt, ANALYSIS_TEMPERATURE)
                    .map_err(wrap)?,
            )
            .map_err(wrap)?;

        let mut action = None;
        let mut observation = None;
        if self.knowledge_tools_active() {
            let mut action_bindings = bindings.clone();
            let mut action_scratch = scratch.clone();
            action_scratch.push_str("\n\nYour current analysis:\n");
            action_scratch.push_str(&thought);
            action_bindings.insert("scratchpad", action_scratch);
            let action_prompt = self.kit.render(&bundle.action_id, &action_bindings)?;
            let action_text = backend
                .complete(
                    &self
                        .request(system, action_prompt, ANALYSIS_TEMPERATURE)
                        .map_err(wrap)?,
                )
                .map_err(wrap)?;

            if let Some(mut parsed) = parse_action(&action_text, stage) {
                if parsed.kind == ToolActionKind::CodeReview {
                    if self.config.tools_enabled.contains(&ToolId::Interpreter) {
                        let snippet = parsed
                            .code_snippet
                            .as_ref()
                            .expect("code review carries a snippet");
                        parsed.execution_report = Some(self.executor.execute(snippet));
                    } else {
                        parsed.kind = ToolActionKind::CodeSearch;
                    }
                }
                let merged = self
                    .tools
                    .dispatch(&parsed, task, parsed.execution_report.as_ref());
                observation = Some(truncate_chars(
                    &merged.rendered,
                    self.config.observation_char_limit,
                ));
                action = Some(parsed);
            }
        }

        let final_critique = match &observation {
            Some(obs) => format!("{thought}\n\nObservation:\n{obs}"),
            None => thought.clone(),
        };
        Ok(CritiqueTurn {
            role: CriticRole {
                kind,
                system_prompt_id: bundle.system_id,
            },
            round,
            stage,
            thought,
            action,
            observation,
            final_critique,
        })
    }

    /// Appends one safety turn then one helpfulness turn per configured
    /// inner interaction, then records the round summary. Prior events are
    /// never touched.
    pub fn run_interaction_round(
        &self,
        state: &mut DialogueState,
        task: &Task,
        candidate_text: &str,
        round: u32,
        stage: Stage,
        execution_summary: Option<&str>,
    ) -> Result<(), EngineError> {
        for _ in 0..self.config.inner_interactions_per_round {
            let mut safety_critique = None;
            if self.config.safety_critic_enabled {
                let turn = self.critic_turn(
                    CriticKind::Safety,
                    task,
                    candidate_text,
                    state,
                    round,
                    stage,
                    execution_summary,
                    None,
                )?;
                safety_critique = Some(turn.final_critique.clone());
                state.events.push(turn);
            }
            if self.config.helpfulness_critic_enabled {
                let turn = self.critic_turn(
                    CriticKind::Helpfulness,
                    task,
                    candidate_text,
                    state,
                    round,
                    stage,
                    execution_summary,
                    safety_critique.as_deref(),
                )?;
                state.events.push(turn);
            }
        }
        let summary = self.summarize_round(state, task, round, stage)?;
        state.summaries.insert(round, summary);
        Ok(())
    }

    /// Produces the round summary over every turn's thought and observation
    /// (posthoc: over the preemptive summaries plus the posthoc turns).
    /// Under the no-summary ablation the rendered history itself is stored.
    fn summarize_round(
        &self,
        state: &DialogueState,
        task: &Task,
        round: u32,
        stage: Stage,
    ) -> Result<String, EngineError> {
        let view = history_view(state, stage);
        let view = if view.is_empty() {
            "(no critic turns this round)".to_string()
        } else {
            view
        };
        if self.config.raw_history {
            return Ok(view);
        }
        let prompt = self.kit.render(
            PromptKit::summarizer_id(task.domain),
            &BTreeMap::from([("scratchpad", view)]),
        )?;
        let wrap = |source: GatewayError| EngineError::Backend {
            role: "summarizer",
            round,
            source,
        };
        let system = "You summarize critic dialogues faithfully and concisely.".to_string();
        self.backends
            .summarizer
            .complete(
                &self
                    .request(system, prompt, ANALYSIS_TEMPERATURE)
                    .map_err(wrap)?,
            )
            .map_err(wrap)
    }
}

/// Renders the summarizer's input: each turn's thought concatenated with its
/// observation. In the posthoc stage the preemptive portion enters as its
/// per-round summaries followed by the posthoc turns.
pub fn history_view(state: &DialogueState, stage: Stage) -> String {
    let mut sections = Vec::new();
    match stage {
        Stage::Posthoc => {
            let preemptive_rounds: std::collections::BTreeSet<u32> = state
                .events
                .iter()
                .filter(|e| e.stage == Stage::Preemptive)
                .map(|e| e.round)
                .collect();
            for (round, summary) in &state.summaries {
                if preemptive_rounds.contains(round) {
                    sections.push(format!("Summary of preemptive round {round}:\n{summary}"));
                }
            }
            sections.extend(
                state
                    .events
                    .iter()
                    .filter(|e| e.stage == Stage::Posthoc)
                    .map(render_turn),
            );
        }
        _ => {
            sections.extend(
                state
                    .events
                    .iter()
                    .filter(|e| e.stage == Stage::Preemptive)
                    .map(render_turn),
            );
        }
    }
    sections.join("\n\n")
}

fn render_turn(turn: &CritiqueTurn) -> String {
    let mut out = format!(
        "Round {} {} critic thought:\n{}",
        turn.round,
        turn.role.kind.label(),
        turn.thought
    );
    if let Some(observation) = &turn.observation {
        out.push_str("\nObservation:\n");
        out.push_str(observation);
    }
    out
}
