//! Application configuration: the run config plus template, rule-pack,
//! tool-adapter, and evaluation settings. Config files are JSON and carry no
//! credentials; secrets are only ever named as environment variables.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::detector::{DetectError, RulePack};
use crate::eval::NoCodePolicy;
use crate::gateway::{Backend, BackendBinding, GatewayError};
use crate::model::{RunConfig, ToolId};
use crate::orchestrator::Orchestrator;
use crate::prompts::{PromptError, PromptKit};
use crate::sandbox::{Executor, RunnerRegistry};
use crate::tools::{
    FixtureTool, KnowledgeTool, LlmKbTool, RecordingTool, ToolLayer, WebSearchConfig,
    WebSearchTool, WikiConfig, WikiTool,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Rules(#[from] DetectError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Fixture recording/replay for the knowledge adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixturesConfig {
    pub dir: PathBuf,
    /// Record live responses instead of replaying stored ones.
    #[serde(default)]
    pub record: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub web_search: Option<WebSearchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wiki: Option<WikiConfig>,
    /// Gateway binding used for single-shot knowledge-base queries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_kb: Option<BackendBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<FixturesConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default)]
    pub no_code_policy: NoCodePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules_dir: Option<PathBuf>,
    #[serde(default)]
    pub tools: ToolsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runners: Option<RunnerRegistry>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let display = path.display().to_string();
        let content = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: display.clone(),
            source,
        })?;
        let config: AppConfig = serde_json::from_str(&content).map_err(|e| ConfigError::Parse {
            path: display,
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let errors = self.run.validation_errors();
        if !errors.is_empty() {
            return Err(ConfigError::Invalid(errors.join("; ")));
        }
        Ok(())
    }

    /// Serializes the effective configuration; reloading the dump yields an
    /// identical configuration.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn prompt_kit(&self) -> Result<PromptKit, ConfigError> {
        Ok(match &self.templates_dir {
            Some(dir) => PromptKit::load_dir(dir)?,
            None => PromptKit::builtin(),
        })
    }

    pub fn rule_pack(&self) -> Result<RulePack, ConfigError> {
        Ok(match &self.rules_dir {
            Some(dir) => RulePack::load_dir(dir)?,
            None => RulePack::builtin()?,
        })
    }

    /// Builds one knowledge adapter, honoring fixture record/replay modes.
    pub fn build_adapter(&self, id: ToolId) -> Result<Option<Box<dyn KnowledgeTool>>, ConfigError> {
        if !self.run.tools_enabled.contains(&id) {
            return Ok(None);
        }
        if let Some(fixtures) = &self.tools.fixtures {
            if !fixtures.record {
                return Ok(Some(Box::new(FixtureTool::new(&fixtures.dir, id))));
            }
        }
        let live: Option<Box<dyn KnowledgeTool>> = match id {
            ToolId::WebSearch => self
                .tools
                .web_search
                .clone()
                .map(|c| Box::new(WebSearchTool::new(c)) as Box<dyn KnowledgeTool>),
            ToolId::Wiki => self
                .tools
                .wiki
                .clone()
                .map(|c| Box::new(WikiTool::new(c)) as Box<dyn KnowledgeTool>),
            ToolId::LlmKb => match &self.tools.llm_kb {
                Some(binding) => Some(Box::new(LlmKbTool::new(
                    Arc::new(Backend::new(binding.clone())?),
                    self.run.max_output_tokens,
                ))),
                None => None,
            },
            ToolId::Interpreter => None,
        };
        Ok(match (live, &self.tools.fixtures) {
            (Some(adapter), Some(fixtures)) if fixtures.record => {
                Some(Box::new(RecordingTool::new(adapter, &fixtures.dir)))
            }
            (live, _) => live,
        })
    }

    /// Knowledge adapters in the fixed dispatch order: web search, wiki,
    /// LLM knowledge base.
    pub fn tool_layer(&self) -> Result<ToolLayer, ConfigError> {
        let mut adapters: Vec<Box<dyn KnowledgeTool>> = Vec::new();
        for id in [ToolId::WebSearch, ToolId::Wiki, ToolId::LlmKb] {
            if let Some(adapter) = self.build_adapter(id)? {
                adapters.push(adapter);
            }
        }
        Ok(ToolLayer::new(adapters, self.run.contamination_threshold))
    }

    pub fn executor(&self) -> Executor {
        let registry = self.runners.clone().unwrap_or_default();
        Executor::new(registry, self.run.sandbox.clone())
    }

    pub fn orchestrator(&self) -> Result<Orchestrator, ConfigError> {
        Orchestrator::new(
            self.run.clone(),
            self.prompt_kit()?,
            self.tool_layer()?,
            self.executor(),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedPolicy;

    fn scripted_app_config() -> AppConfig {
        AppConfig {
            run: RunConfig::scripted_default(ScriptedPolicy::always("ok")),
            templates_dir: None,
            rules_dir: None,
            tools: ToolsConfig::default(),
            runners: None,
            eval: EvalConfig::default(),
        }
    }

    #[test]
    fn dumped_config_reloads_identically() {
        let config = scripted_app_config();
        let dumped = config.dump();
        let reloaded: AppConfig = serde_json::from_str(&dumped).unwrap();
        assert_eq!(reloaded, config);
        assert_eq!(reloaded.dump(), dumped);
    }

    #[test]
    fn invalid_round_budget_names_the_field() {
        let mut config = scripted_app_config();
        config.run.preemptive_rounds = 0;
        config.run.posthoc_rounds = 0;
        let error = config.validate().unwrap_err().to_string();
        assert!(error.contains("outer_rounds"), "{error}");
    }

    #[test]
    fn fixtures_replay_replaces_live_adapters() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = scripted_app_config();
        config.tools.fixtures = Some(FixturesConfig {
            dir: dir.path().to_path_buf(),
            record: false,
        });
        let layer = config.tool_layer().unwrap();
        assert!(layer.has_knowledge_tools());
    }

    #[test]
    fn adapters_require_both_enablement_and_configuration() {
        let mut config = scripted_app_config();
        // Enabled but unconfigured: no live endpoint to talk to.
        assert!(config.build_adapter(ToolId::WebSearch).unwrap().is_none());
        // Configured but disabled.
        config.tools.wiki = Some(WikiConfig::default());
        config.run.tools_enabled.remove(&ToolId::Wiki);
        assert!(config.build_adapter(ToolId::Wiki).unwrap().is_none());
    }

    #[test]
    fn load_reports_parse_errors_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, "{\"run\": {\n  \"preemptive_rounds\": oops\n}}").unwrap();
        let error = AppConfig::load(&path).unwrap_err().to_string();
        assert!(error.contains("line"), "{error}");
    }

    fn demo_dir() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/demo")
    }

    fn demo_app_config() -> AppConfig {
        use crate::gateway::Matcher;
        let critic = |focus: &str| {
            ScriptedPolicy::always(format!(
                "The response should be checked for {focus}; the current draft leaves input handling implicit."
            ))
            .rule(
                Matcher::Contains("To ground your critique".into()),
                "Search[python input validation best practices]",
            )
        };
        let actor = ScriptedPolicy::always(
            "Here is a solution:\n```python\nvalue = \"demo\"\nprint(value)\n```",
        )
        .rule(
            Matcher::Contains("fingerprint".into()),
            "Here is a hashing helper:\n```python\nimport hashlib\nprint(hashlib.md5(b\"demo\").hexdigest())\n```",
        )
        .rule(
            Matcher::Contains("Your previous response".into()),
            "Revised per the critiques:\n```python\nvalue = \"demo\"\nif value:\n    print(value)\n```",
        );
        let mut run = RunConfig::scripted_default(critic("security risks"));
        run.backends.actor = BackendBinding::scripted(actor);
        run.backends.helpfulness_critic =
            BackendBinding::scripted(critic("alignment with the task requirements"));
        run.backends.summarizer =
            BackendBinding::scripted(ScriptedPolicy::echo("Summary of the critic dialogue: "));
        run.backends.judge = BackendBinding::scripted(ScriptedPolicy::always("tie"));
        AppConfig {
            run,
            templates_dir: None,
            rules_dir: None,
            tools: ToolsConfig {
                web_search: None,
                wiki: None,
                llm_kb: Some(BackendBinding::scripted(ScriptedPolicy::always(
                    "Validate and allow-list user input before passing it to shells or queries.",
                ))),
                fixtures: None,
            },
            runners: None,
            eval: EvalConfig::default(),
        }
    }

    /// Maintenance helper: `cargo test -p indict regenerate_demo_assets -- --ignored`
    #[test]
    #[ignore]
    fn regenerate_demo_assets() {
        std::fs::create_dir_all(demo_dir()).unwrap();
        std::fs::write(
            demo_dir().join("config.scripted.json"),
            demo_app_config().dump(),
        )
        .unwrap();
        let tasks = [
            serde_json::json!({"id": "greet", "instruction": "Write a python program that prints a greeting.", "domain": "code", "language_hint": "python"}),
            serde_json::json!({"id": "fingerprint", "instruction": "Write a python helper that fingerprints a file.", "domain": "code", "language_hint": "python"}),
            serde_json::json!({"id": "advice", "instruction": "Explain how to store user passwords responsibly.", "domain": "open_ended"}),
        ];
        let lines: Vec<String> = tasks.iter().map(|t| t.to_string()).collect();
        std::fs::write(demo_dir().join("tasks.ndjson"), lines.join("\n") + "\n").unwrap();
    }

    #[test]
    fn demo_assets_stay_loadable_and_runnable() {
        let config = AppConfig::load(&demo_dir().join("config.scripted.json")).unwrap();
        assert_eq!(config, demo_app_config(), "regenerate the demo assets");
        let tasks = crate::cli::load_tasks(&demo_dir().join("tasks.ndjson")).unwrap();
        assert_eq!(tasks.len(), 3);
    }
}
