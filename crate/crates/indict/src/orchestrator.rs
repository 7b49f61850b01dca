//! The full loop for one task: initial generation, preemptive critic rounds
//! with actor revisions, execution of the candidate, posthoc critic rounds
//! with actor revisions, producing one run record.
//!
//! The dialogue state persists across both stages. A per-task failure never
//! poisons a batch: the partial record is kept with its failure cause and
//! the batch continues.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::critic::{
    CriticEngine, EngineError, RoleBackends, ACTOR_TEMPERATURE, NO_EXECUTABLE_CODE,
};
use crate::gateway::{ChatMessage, CompletionRequest, GatewayError};
use crate::model::{
    Candidate, DialogueState, ExecutionEvent, RunConfig, RunCounters, RunRecord, Stage, Task,
    TaskDomain,
};
use crate::prompts::{PromptError, PromptKit};
use crate::sandbox::{select_principal_block, Executor};
use crate::tools::{render_execution_compact, ToolLayer};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("startup: {0}")]
    Startup(String),
    #[error("actor backend: {0}")]
    Actor(GatewayError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("run log: {0}")]
    Io(#[from] std::io::Error),
}

/// Aggregate counters for one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchSummary {
    pub total: usize,
    pub completed: usize,
    pub failed: usize,
    pub backend_calls: u64,
    pub tokens_in_estimated: u64,
    pub tokens_out_estimated: u64,
}

pub struct Orchestrator {
    kit: PromptKit,
    tools: ToolLayer,
    executor: Executor,
    config: RunConfig,
}

impl Orchestrator {
    pub fn new(
        config: RunConfig,
        kit: PromptKit,
        tools: ToolLayer,
        executor: Executor,
    ) -> Result<Self, RunError> {
        let errors = config.validation_errors();
        if !errors.is_empty() {
            return Err(RunError::Startup(errors.join("; ")));
        }
        Ok(Self {
            kit,
            tools,
            executor,
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Runs the full loop with fresh per-run backends.
    pub fn run_indict(&self, task: &Task) -> RunRecord {
        match RoleBackends::from_bindings(&self.config.backends) {
            Ok(backends) => self.run_with_backends(task, &backends),
            Err(e) => RunRecord {
                task: task.clone(),
                config: self.config.clone(),
                candidates: Vec::new(),
                dialogue: DialogueState::default(),
                executions: Vec::new(),
                final_index: None,
                failure: Some(format!("startup: {e}")),
                counters: RunCounters::default(),
            },
        }
    }

    /// Runs the full loop against caller-supplied backends, so their call
    /// logs stay observable afterwards. Failures abort the schedule but the
    /// partial record is returned with its cause.
    pub fn run_with_backends(&self, task: &Task, backends: &RoleBackends) -> RunRecord {
        let started = Instant::now();
        let mut record = RunRecord {
            task: task.clone(),
            config: self.config.clone(),
            candidates: Vec::new(),
            dialogue: DialogueState::default(),
            executions: Vec::new(),
            final_index: None,
            failure: None,
            counters: RunCounters::default(),
        };
        if let Err(e) = self.drive(task, backends, &mut record) {
            record.failure = Some(e.to_string());
        }
        record.final_index = if record.candidates.is_empty() {
            None
        } else {
            Some(record.candidates.len() - 1)
        };
        for backend in [
            &backends.actor,
            &backends.safety,
            &backends.helpfulness,
            &backends.summarizer,
            &backends.judge,
        ] {
            let (tokens_in, tokens_out) = backend.token_totals();
            record.counters.backend_calls += backend.call_count();
            record.counters.tokens_in_estimated += tokens_in;
            record.counters.tokens_out_estimated += tokens_out;
        }
        record.counters.wall_time_ms = started.elapsed().as_millis() as u64;
        record
    }

    fn drive(
        &self,
        task: &Task,
        backends: &RoleBackends,
        record: &mut RunRecord,
    ) -> Result<(), RunError> {
        let engine = CriticEngine {
            kit: &self.kit,
            tools: &self.tools,
            executor: &self.executor,
            config: &self.config,
            backends,
        };

        record
            .candidates
            .push(self.generate_initial(task, backends)?);

        for round in 1..=self.config.preemptive_rounds {
            self.one_round(
                &engine,
                task,
                backends,
                record,
                round,
                Stage::Preemptive,
                None,
            )?;
            if self.should_stop_early(record) {
                return Ok(());
            }
        }

        let posthoc_applies = self.config.posthoc_enabled
            && self.config.posthoc_rounds > 0
            && task.domain == TaskDomain::Code;
        if posthoc_applies {
            record.dialogue.stage_boundary = Some(record.dialogue.events.len());
            for offset in 1..=self.config.posthoc_rounds {
                let round = self.config.preemptive_rounds + offset;
                // Re-execute the newest candidate so critics always review
                // current behaviour.
                let latest = record.candidates.last().expect("initial candidate exists");
                let execution_summary = match select_principal_block(
                    &latest.code_blocks,
                    task.language_hint.as_deref(),
                ) {
                    Some(block) => {
                        let report = self.executor.execute(block);
                        let summary = render_execution_compact(&report);
                        record.executions.push(ExecutionEvent { round, report });
                        summary
                    }
                    None => NO_EXECUTABLE_CODE.to_string(),
                };
                self.one_round(
                    &engine,
                    task,
                    backends,
                    record,
                    round,
                    Stage::Posthoc,
                    Some(&execution_summary),
                )?;
                if self.should_stop_early(record) {
                    return Ok(());
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn one_round(
        &self,
        engine: &CriticEngine<'_>,
        task: &Task,
        backends: &RoleBackends,
        record: &mut RunRecord,
        round: u32,
        stage: Stage,
        execution_summary: Option<&str>,
    ) -> Result<(), RunError> {
        let candidate_text = record
            .candidates
            .last()
            .expect("initial candidate exists")
            .raw_text
            .clone();
        let critics_active =
            self.config.safety_critic_enabled || self.config.helpfulness_critic_enabled;
        if critics_active {
            engine.run_interaction_round(
                &mut record.dialogue,
                task,
                &candidate_text,
                round,
                stage,
                execution_summary,
            )?;
        } else {
            // Baseline mode: iterative self-regeneration. The revision
            // context is the concatenation of previously generated samples.
            let prior_samples = record
                .candidates
                .iter()
                .enumerate()
                .map(|(i, c)| format!("Previously generated sample {}:\n{}", i + 1, c.raw_text))
                .collect::<Vec<_>>()
                .join("\n\n");
            record.dialogue.summaries.insert(round, prior_samples);
        }

        let summary = record.dialogue.summaries[&round].clone();
        let prior_index = record.candidates.len() - 1;
        let revised = self.revise(record, prior_index, &summary, stage, round, backends)?;
        record.candidates.push(revised);
        Ok(())
    }

    fn should_stop_early(&self, record: &RunRecord) -> bool {
        if !self.config.early_exit || record.candidates.len() < 2 {
            return false;
        }
        let last = &record.candidates[record.candidates.len() - 1];
        let previous = &record.candidates[record.candidates.len() - 2];
        if last.raw_text != previous.raw_text {
            return false;
        }
        let pack = crate::eval::detector::builtin_pack();
        last.code_blocks
            .iter()
            .all(|block| pack.detect(block).is_empty())
    }

    /// First actor pass over the task prompt.
    pub fn generate_initial(
        &self,
        task: &Task,
        backends: &RoleBackends,
    ) -> Result<Candidate, RunError> {
        let prompt = self.kit.render(
            PromptKit::actor_initial_id(task.domain),
            &BTreeMap::from([("question", task.rendered_question())]),
        )?;
        let raw_text = self.actor_complete(backends, prompt)?;
        Ok(Candidate {
            code_blocks: crate::sandbox::extract_code_blocks(&raw_text),
            raw_text,
            stage: Stage::Initial,
            round: 0,
            parent: None,
        })
    }

    /// One actor revision conditioned on the task, the prior candidate, and
    /// the dialogue summary.
    fn revise(
        &self,
        record: &RunRecord,
        prior_index: usize,
        summary: &str,
        stage: Stage,
        round: u32,
        backends: &RoleBackends,
    ) -> Result<Candidate, RunError> {
        let task = &record.task;
        let prior = &record.candidates[prior_index];
        let answer = if self.config.revision_includes_prior {
            prior.raw_text.clone()
        } else {
            "(previous response omitted)".to_string()
        };
        let prompt = self.kit.render(
            PromptKit::actor_revise_id(task.domain),
            &BTreeMap::from([
                ("question", task.rendered_question()),
                ("answer", answer),
                ("critique_summary", summary.to_string()),
            ]),
        )?;
        let raw_text = self.actor_complete(backends, prompt)?;
        Ok(Candidate {
            code_blocks: crate::sandbox::extract_code_blocks(&raw_text),
            raw_text,
            stage,
            round,
            parent: Some(prior_index),
        })
    }

    fn actor_complete(&self, backends: &RoleBackends, prompt: String) -> Result<String, RunError> {
        let request = CompletionRequest::build(
            vec![ChatMessage::user(prompt)],
            self.config.max_output_tokens,
            self.config.max_output_tokens,
            ACTOR_TEMPERATURE,
            Some(self.config.seed),
        )
        .map_err(RunError::Actor)?;
        backends.actor.complete(&request).map_err(RunError::Actor)
    }

    /// Runs every task, appending one record per task to the log in task
    /// order regardless of completion order, so fixed inputs yield identical
    /// logs at any concurrency.
    pub fn run_batch(
        &self,
        tasks: &[Task],
        out_log: &Path,
        concurrency: usize,
    ) -> Result<BatchSummary, RunError> {
        if tasks.is_empty() {
            return Err(RunError::Startup("task list is empty".to_string()));
        }
        let mut writer = crate::runlog::RunLogWriter::create(out_log)
            .map_err(|e| RunError::Startup(format!("run log {}: {e}", out_log.display())))?;

        let next = AtomicUsize::new(0);
        let results: Mutex<BTreeMap<usize, RunRecord>> = Mutex::new(BTreeMap::new());
        let workers = concurrency.clamp(1, tasks.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    if index >= tasks.len() {
                        break;
                    }
                    let record = self.run_indict(&tasks[index]);
                    results
                        .lock()
                        .expect("results lock poisoned")
                        .insert(index, record);
                });
            }
        });

        let mut summary = BatchSummary {
            total: tasks.len(),
            ..BatchSummary::default()
        };
        let results = results.into_inner().expect("results lock poisoned");
        for (_, record) in results {
            if record.failure.is_some() {
                summary.failed += 1;
            } else {
                summary.completed += 1;
            }
            summary.backend_calls += record.counters.backend_calls;
            summary.tokens_in_estimated += record.counters.tokens_in_estimated;
            summary.tokens_out_estimated += record.counters.tokens_out_estimated;
            writer.append(&record)?;
        }
        Ok(summary)
    }
}
