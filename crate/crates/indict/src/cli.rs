//! Command-line entry points: run batches, evaluate run logs, inspect
//! transcripts, and manage tool fixtures.
//!
//! Exit codes: 0 on success, 1 on startup/configuration errors, 2 when a
//! batch completed with per-task failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::eval::{self, detector::RulePack, expand_then_judge, judge_pair, JudgeCriterion};
use crate::gateway::Backend;
use crate::model::{strip_volatile_fields, RunRecord, Task, ToolId};
use crate::runlog;
use crate::tools::KnowledgeTool;

pub const EXIT_OK: i32 = 0;
pub const EXIT_STARTUP: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Parser)]
#[command(
    name = "indict",
    version,
    about = "Dual-critic code generation loop and evaluation harness"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a task batch and write a run log.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
        /// Overrides the run seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a run log.
    Eval {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        /// Baseline outputs (NDJSON {id, output}); required for pairwise.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Rule directory overriding the builtin pack (insecure_coding).
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Report file; defaults to stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Config supplying the judge binding; defaults to the binding
        /// embedded in the log's records.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = CriterionArg::Helpfulness)]
        criterion: CriterionArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render one task's transcript from a run log.
    Show {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// Record or replay knowledge-tool fixtures.
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
}

#[derive(Subcommand)]
enum FixturesAction {
    /// Query a live adapter and store the response keyed by query hash.
    Record {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, value_enum, default_value_t = AdapterArg::WebSearch)]
        adapter: AdapterArg,
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a stored response for a query.
    Replay {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, value_enum, default_value_t = AdapterArg::WebSearch)]
        adapter: AdapterArg,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    #[value(alias = "insecure_coding")]
    InsecureCoding,
    Attack,
    Pairwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Helpfulness,
    Safety,
}

impl From<CriterionArg> for JudgeCriterion {
    fn from(value: CriterionArg) -> Self {
        match value {
            CriterionArg::Helpfulness => JudgeCriterion::Helpfulness,
            CriterionArg::Safety => JudgeCriterion::Safety,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterArg {
    #[value(alias = "web_search")]
    WebSearch,
    Wiki,
    #[value(alias = "llm_kb")]
    LlmKb,
}

impl From<AdapterArg> for ToolId {
    fn from(value: AdapterArg) -> Self {
        match value {
            AdapterArg::WebSearch => ToolId::WebSearch,
            AdapterArg::Wiki => ToolId::Wiki,
            AdapterArg::LlmKb => ToolId::LlmKb,
        }
    }
}

/// Parses argv and dispatches; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_STARTUP
            } else {
                EXIT_OK
            };
        }
    };
    match cli.command {
        Command::Run {
            config,
            tasks,
            out,
            concurrency,
            seed,
        } => cmd_run(&config, &tasks, &out, concurrency, seed),
        Command::Eval {
            log,
            mode,
            baseline,
            rules,
            out,
            config,
            criterion,
            seed,
        } => cmd_eval(
            &log,
            mode,
            baseline.as_deref(),
            rules.as_deref(),
            out.as_deref(),
            config.as_deref(),
            criterion.into(),
            seed,
        ),
        Command::Show { log, id } => cmd_show(&log, &id),
        Command::Fixtures { action } => match action {
            FixturesAction::Record {
                dir,
                query,
                adapter,
                config,
            } => cmd_fixtures_record(&dir, &query, adapter.into(), &config),
            FixturesAction::Replay {
                dir,
                query,
                adapter,
            } => cmd_fixtures_replay(&dir, &query, adapter.into()),
        },
    }
}

fn startup_error(message: impl std::fmt::Display) -> i32 {
    eprintln!("error: {message}");
    EXIT_STARTUP
}

/// Prints a line to stdout, tolerating a closed pipe so commands behave in
/// `indict ... | head` pipelines.
fn emit(text: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

/// Loads an NDJSON task file; every line must parse.
pub fn load_tasks(path: &Path) -> Result<Vec<Task>, String> {
    let content =
        std::fs::read_to_string(path).map_err(|e| format!("tasks {}: {e}", path.display()))?;
    let mut tasks = Vec::new();
    for (number, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(line)
            .map_err(|e| format!("tasks {} line {}: {e}", path.display(), number + 1))?;
        if task.instruction.is_empty() {
            return Err(format!(
                "tasks {} line {}: instruction is empty",
                path.display(),
                number + 1
            ));
        }
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(format!("tasks {}: no tasks", path.display()));
    }
    Ok(tasks)
}

pub fn cmd_run(
    config_path: &Path,
    tasks_path: &Path,
    out_log: &Path,
    concurrency: usize,
    seed: Option<u64>,
) -> i32 {
    let mut config = match AppConfig::load(config_path) {
        Ok(config) => config,
        Err(e) => return startup_error(e),
    };
    if let Some(seed) = seed {
        config.run.seed = seed;
    }
    let tasks = match load_tasks(tasks_path) {
        Ok(tasks) => tasks,
        Err(e) => return startup_error(e),
    };
    let orchestrator = match config.orchestrator() {
        Ok(orchestrator) => orchestrator,
        Err(e) => return startup_error(e),
    };
    let summary = match orchestrator.run_batch(&tasks, out_log, concurrency) {
        Ok(summary) => summary,
        Err(e) => return startup_error(e),
    };
    emit(format!(
        "tasks: {} completed: {} failed: {} backend_calls: {} tokens_in~{} tokens_out~{}",
        summary.total,
        summary.completed,
        summary.failed,
        summary.backend_calls,
        summary.tokens_in_estimated,
        summary.tokens_out_estimated
    ));
    emit(format!("log: {}", out_log.display()));
    if summary.failed > 0 {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    }
}

#[derive(Debug, Serialize)]
struct EvalReport {
    mode: String,
    criterion: Option<String>,
    headline_metric: f64,
    records_evaluated: usize,
    skipped_log_lines: usize,
    per_task: Vec<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct BaselineEntry {
    id: String,
    output: String,
}

fn load_baselines(path: &Path) -> Result<BTreeMap<String, String>, String> {
    let content =
        std::fs::read_to_string(path).map_err(|e| format!("baseline {}: {e}", path.display()))?;
    let mut baselines = BTreeMap::new();
    for (number, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: BaselineEntry = serde_json::from_str(line)
            .map_err(|e| format!("baseline {} line {}: {e}", path.display(), number + 1))?;
        baselines.insert(entry.id, entry.output);
    }
    Ok(baselines)
}

/// The judge binding comes from an explicit config when given, otherwise
/// from the config embedded in the log's records.
fn resolve_judge(config: Option<&Path>, records: &[RunRecord]) -> Result<Backend, String> {
    let binding = match config {
        Some(path) => {
            AppConfig::load(path)
                .map_err(|e| e.to_string())?
                .run
                .backends
                .judge
        }
        None => records
            .first()
            .map(|r| r.config.backends.judge.clone())
            .ok_or_else(|| "no records to take a judge binding from".to_string())?,
    };
    Backend::new(binding).map_err(|e| e.to_string())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    log: &Path,
    mode: EvalMode,
    baseline: Option<&Path>,
    rules: Option<&Path>,
    out: Option<&Path>,
    config: Option<&Path>,
    criterion: JudgeCriterion,
    seed: u64,
) -> i32 {
    let (records, skipped) = match runlog::read_run_log(log) {
        Ok(read) => read,
        Err(e) => return startup_error(e),
    };
    for line in &skipped {
        eprintln!(
            "warning: skipping corrupt log line {}: {}",
            line.line_number, line.error
        );
    }

    let report = match mode {
        EvalMode::InsecureCoding => {
            let pack = match rules {
                Some(dir) => match RulePack::load_dir(dir) {
                    Ok(pack) => pack,
                    Err(e) => return startup_error(e),
                },
                None => match RulePack::builtin() {
                    Ok(pack) => pack,
                    Err(e) => return startup_error(e),
                },
            };
            let policy = match config {
                Some(path) => match AppConfig::load(path) {
                    Ok(config) => config.eval.no_code_policy,
                    Err(e) => return startup_error(e),
                },
                None => Default::default(),
            };
            let metric = match eval::safety_metric(&records, &pack, policy) {
                Ok(metric) => metric,
                Err(e) => return startup_error(e),
            };
            let per_task = records
                .iter()
                .map(|record| {
                    let findings: Vec<_> = record
                        .final_candidate()
                        .map(|c| {
                            c.code_blocks
                                .iter()
                                .flat_map(|b| pack.detect(b))
                                .collect::<Vec<_>>()
                        })
                        .unwrap_or_default();
                    serde_json::json!({
                        "id": record.task.id,
                        "clean": findings.is_empty(),
                        "findings": findings,
                        "failed_run": record.failure.is_some(),
                    })
                })
                .collect();
            EvalReport {
                mode: "insecure_coding".into(),
                criterion: None,
                headline_metric: metric,
                records_evaluated: records.len(),
                skipped_log_lines: skipped.len(),
                per_task,
            }
        }
        EvalMode::Attack => {
            let judge = match resolve_judge(config, &records) {
                Ok(judge) => judge,
                Err(e) => return startup_error(e),
            };
            let kit = crate::prompts::PromptKit::builtin();
            let mut labels = Vec::new();
            let mut per_task = Vec::new();
            for record in &records {
                let response = record
                    .final_candidate()
                    .map(|c| c.raw_text.as_str())
                    .unwrap_or("");
                match expand_then_judge(&judge, &kit, &record.task, response) {
                    Ok(verdict) => {
                        per_task.push(serde_json::json!({
                            "id": record.task.id,
                            "label": verdict.label,
                            "audit_flagged": verdict.audit_flagged,
                        }));
                        labels.push(verdict.label);
                    }
                    Err(e) => return startup_error(e),
                }
            }
            let metric = match eval::attack_metric(&labels) {
                Ok(metric) => metric,
                Err(e) => return startup_error(e),
            };
            EvalReport {
                mode: "attack".into(),
                criterion: None,
                headline_metric: metric,
                records_evaluated: records.len(),
                skipped_log_lines: skipped.len(),
                per_task,
            }
        }
        EvalMode::Pairwise => {
            let Some(baseline_path) = baseline else {
                return startup_error("pairwise mode requires --baseline");
            };
            let baselines = match load_baselines(baseline_path) {
                Ok(baselines) => baselines,
                Err(e) => return startup_error(e),
            };
            let judge = match resolve_judge(config, &records) {
                Ok(judge) => judge,
                Err(e) => return startup_error(e),
            };
            let kit = crate::prompts::PromptKit::builtin();
            let mut per_task = Vec::new();
            let (mut wins, mut ties, mut judged) = (0usize, 0usize, 0usize);
            for record in &records {
                let Some(base) = baselines.get(&record.task.id) else {
                    eprintln!("warning: no baseline for task {}; skipped", record.task.id);
                    continue;
                };
                let ours = record
                    .final_candidate()
                    .map(|c| c.raw_text.as_str())
                    .unwrap_or("");
                match judge_pair(&judge, &kit, &record.task, ours, base, criterion, seed) {
                    Ok(verdict) => {
                        match verdict.winner {
                            eval::Winner::A => wins += 1,
                            eval::Winner::Tie => ties += 1,
                            eval::Winner::B => {}
                        }
                        judged += 1;
                        per_task.push(serde_json::json!({
                            "id": record.task.id,
                            "winner": verdict.winner,
                            "presentation_order": verdict.presentation_order,
                            "audit_flags": verdict.audit_flags,
                        }));
                    }
                    Err(e) => return startup_error(e),
                }
            }
            if judged == 0 {
                return startup_error(eval::EvalError::NoOverlap);
            }
            // Ties count as half a win, matching the 0.5 self-baseline.
            let metric = (wins as f64 + 0.5 * ties as f64) / judged as f64;
            EvalReport {
                mode: "pairwise".into(),
                criterion: Some(format!("{criterion:?}").to_lowercase()),
                headline_metric: metric,
                records_evaluated: judged,
                skipped_log_lines: skipped.len(),
                per_task,
            }
        }
    };

    emit(format!("{}: {:.3}", report.mode, report.headline_metric));
    let serialized = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = out {
        if let Err(e) = std::fs::write(out, &serialized) {
            return startup_error(format!("report {}: {e}", out.display()));
        }
        emit(format!("report: {}", out.display()));
    } else {
        emit(serialized);
    }
    EXIT_OK
}

pub fn cmd_show(log: &Path, id: &str) -> i32 {
    let (records, _) = match runlog::read_run_log(log) {
        Ok(read) => read,
        Err(e) => return startup_error(e),
    };
    let Some(record) = records.iter().find(|r| r.task.id == id) else {
        return startup_error(format!("no record for task id `{id}`"));
    };
    emit(render_transcript(record).trim_end());
    EXIT_OK
}

/// Human-readable ordered rendering of one run.
pub fn render_transcript(record: &RunRecord) -> String {
    let mut out = String::new();
    let push = |out: &mut String, line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    push(
        &mut out,
        format!("task {} ({:?})", record.task.id, record.task.domain),
    );
    push(
        &mut out,
        format!("instruction: {}", record.task.instruction),
    );
    if let Some(failure) = &record.failure {
        push(&mut out, format!("RUN FAILED: {failure}"));
    }
    for candidate in record.candidates.iter().filter(|c| c.round == 0) {
        push(&mut out, "== initial candidate (round 0)".to_string());
        push(&mut out, candidate.raw_text.clone());
    }
    let last_round = record
        .candidates
        .iter()
        .map(|c| c.round)
        .chain(record.dialogue.summaries.keys().copied())
        .max()
        .unwrap_or(0);
    for round in 1..=last_round {
        for execution in record.executions.iter().filter(|e| e.round == round) {
            push(
                &mut out,
                format!(
                    "== execution before round {} [{:?}] {} ms",
                    round, execution.report.exit_status, execution.report.wall_time_ms
                ),
            );
            if !execution.report.stdout.is_empty() {
                push(
                    &mut out,
                    format!("stdout: {}", execution.report.stdout.trim_end()),
                );
            }
            if !execution.report.stderr.is_empty() {
                push(
                    &mut out,
                    format!("stderr: {}", execution.report.stderr.trim_end()),
                );
            }
        }
        for event in record.dialogue.round_events(round) {
            push(
                &mut out,
                format!(
                    "-- round {} {:?} {} critic",
                    round,
                    event.stage,
                    event.role.kind.label()
                ),
            );
            push(&mut out, format!("thought: {}", event.thought));
            if let Some(action) = &event.action {
                push(
                    &mut out,
                    format!("action [{:?}]: {}", action.kind, action.text_query),
                );
                if let Some(report) = &action.execution_report {
                    push(
                        &mut out,
                        format!("snippet execution: {:?}", report.exit_status),
                    );
                }
            }
            if let Some(observation) = &event.observation {
                push(&mut out, format!("observation: {observation}"));
            }
        }
        if let Some(summary) = record.dialogue.summaries.get(&round) {
            push(&mut out, format!("-- round {round} summary"));
            push(&mut out, summary.clone());
        }
        for candidate in record.candidates.iter().filter(|c| c.round == round) {
            push(
                &mut out,
                format!("== revision (round {}, {:?})", round, candidate.stage),
            );
            push(&mut out, candidate.raw_text.clone());
        }
    }
    if let Some(final_candidate) = record.final_candidate() {
        push(
            &mut out,
            format!("== final answer (round {})", final_candidate.round),
        );
        push(&mut out, final_candidate.raw_text.clone());
    }
    out
}

fn cmd_fixtures_record(dir: &Path, query: &str, adapter: ToolId, config: &Path) -> i32 {
    let app = match AppConfig::load(config) {
        Ok(app) => app,
        Err(e) => return startup_error(e),
    };
    let live = match app.build_adapter(adapter) {
        Ok(Some(live)) => live,
        Ok(None) => {
            return startup_error(format!(
                "adapter {} is not configured or not enabled",
                adapter.as_str()
            ))
        }
        Err(e) => return startup_error(e),
    };
    let recorder = crate::tools::RecordingTool::new(live, dir);
    match recorder.search(query) {
        Ok(snippets) => {
            emit(format!(
                "recorded {} snippet(s) for `{query}` under {}",
                snippets.len(),
                dir.display()
            ));
            EXIT_OK
        }
        Err(e) => startup_error(e),
    }
}

fn cmd_fixtures_replay(dir: &Path, query: &str, adapter: ToolId) -> i32 {
    let tool = crate::tools::FixtureTool::new(dir, adapter);
    match tool.search(query) {
        Ok(snippets) => {
            for snippet in snippets {
                emit(format!(
                    "[{}] {}: {}",
                    snippet.source.as_str(),
                    snippet.title,
                    snippet.excerpt
                ));
            }
            EXIT_OK
        }
        Err(e) => startup_error(e),
    }
}

/// Canonical (timing-stripped) JSON for comparing run logs across
/// executions.
pub fn canonical_log_lines(path: &Path) -> std::io::Result<Vec<String>> {
    let content = std::fs::read_to_string(path)?;
    Ok(content
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(
            |line| match serde_json::from_str::<serde_json::Value>(line) {
                Ok(mut value) => {
                    strip_volatile_fields(&mut value);
                    value.to_string()
                }
                Err(_) => line.to_string(),
            },
        )
        .collect())
}
