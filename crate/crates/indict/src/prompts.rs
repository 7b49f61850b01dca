//! Prompt templates and placeholder substitution.
//!
//! Templates are configuration, not code: UTF-8 files with a small
//! front-matter header (id, placeholders, domain), shipped under
//! `assets/templates/` and embedded as the builtin set. A directory of the
//! same format can replace them at load time without a rebuild.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CriticKind, Stage, TaskDomain};

/// The complete placeholder vocabulary. Any other `{word}` token in a
/// template body is a load-time error.
pub const PLACEHOLDERS: [&str; 7] = [
    "question",
    "answer",
    "scratchpad",
    "execution_result",
    "critique_summary",
    "response_a",
    "response_b",
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template id `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}` rendered without a binding for `{placeholder}`")]
    MissingBinding {
        template: String,
        placeholder: String,
    },
    #[error("template `{template}` declares or uses unknown placeholder `{placeholder}`")]
    UnknownPlaceholder {
        template: String,
        placeholder: String,
    },
    #[error("template file `{file}`: {message}")]
    BadTemplateFile { file: String, message: String },
    #[error("duplicate template id `{0}`")]
    DuplicateId(String),
    #[error("no template bundle for role {role} in stage {stage:?} with domain {domain:?}")]
    NoTemplateForCombination {
        role: &'static str,
        stage: Stage,
        domain: TaskDomain,
    },
    #[error("template directory: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
    pub domain_variant: TaskDomain,
}

/// System, thought, and action template ids for one critic role in one
/// stage and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBundle {
    pub system_id: String,
    pub thought_id: String,
    pub action_id: String,
}

/// Immutable template registry; rendering is pure.
#[derive(Debug, Clone)]
pub struct PromptKit {
    templates: BTreeMap<String, PromptTemplate>,
}

macro_rules! builtin_templates {
    ($($name:literal),+ $(,)?) => {
        &[$(($name, include_str!(concat!("../assets/templates/", $name, ".txt")))),+]
    };
}

const BUILTIN: &[(&str, &str)] = builtin_templates![
    "safety_system_code",
    "safety_thought_preemptive_code",
    "safety_thought_posthoc_code",
    "helpfulness_system_code",
    "helpfulness_thought_preemptive_code",
    "helpfulness_thought_posthoc_code",
    "summarizer_code",
    "action_search_preemptive_code",
    "action_review_posthoc_code",
    "actor_initial_code",
    "actor_revise_code",
    "safety_system_open_ended",
    "safety_thought_preemptive_open_ended",
    "helpfulness_system_open_ended",
    "helpfulness_thought_preemptive_open_ended",
    "summarizer_open_ended",
    "action_search_preemptive_open_ended",
    "actor_initial_open_ended",
    "actor_revise_open_ended",
    "judge_pairwise_helpfulness",
    "judge_pairwise_safety",
    "judge_expand",
    "judge_label",
];

impl PromptKit {
    /// The embedded template set shipped with the binary.
    pub fn builtin() -> Self {
        let mut kit = Self {
            templates: BTreeMap::new(),
        };
        for (name, content) in BUILTIN {
            let template = parse_template_file(name, content)
                .unwrap_or_else(|e| panic!("builtin template {name} is invalid: {e}"));
            kit.templates.insert(template.id.clone(), template);
        }
        kit
    }

    /// Loads every `*.txt` template from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut kit = Self {
            templates: BTreeMap::new(),
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
            .collect();
        paths.sort();
        for path in paths {
            let name = path
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            let content = std::fs::read_to_string(&path)?;
            let template = parse_template_file(&name, &content)?;
            if kit.templates.contains_key(&template.id) {
                return Err(PromptError::DuplicateId(template.id));
            }
            kit.templates.insert(template.id.clone(), template);
        }
        Ok(kit)
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(|s| s.as_str())
    }

    /// Renders a template by single-pass placeholder substitution. Every
    /// required placeholder must be bound; binding values are inserted
    /// verbatim and never re-scanned.
    pub fn render(
        &self,
        id: &str,
        bindings: &BTreeMap<&str, String>,
    ) -> Result<String, PromptError> {
        let template = self.get(id)?;
        for placeholder in &template.required_placeholders {
            if !bindings.contains_key(placeholder.as_str()) {
                return Err(PromptError::MissingBinding {
                    template: id.to_string(),
                    placeholder: placeholder.clone(),
                });
            }
        }
        let mut out = String::with_capacity(template.body.len());
        let mut rest = template.body.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            match placeholder_token(tail) {
                Some(name) => {
                    // Load-time validation guarantees a binding exists.
                    out.push_str(bindings.get(name).expect("validated placeholder"));
                    rest = &tail[name.len() + 2..];
                }
                None => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Selects the critic prompt bundle for a role, stage, and task domain.
    ///
    /// Preemptive bundles carry the search-only action prompt; posthoc
    /// bundles carry the review-capable one. Open-ended tasks have no
    /// executor, so no posthoc bundle exists for them.
    pub fn select_critic_bundle(
        &self,
        kind: CriticKind,
        stage: Stage,
        domain: TaskDomain,
    ) -> Result<CriticBundle, PromptError> {
        let role = kind.label();
        let bundle = match (stage, domain) {
            (Stage::Preemptive, TaskDomain::Code) => CriticBundle {
                system_id: format!("{role}_system_code"),
                thought_id: format!("{role}_thought_preemptive_code"),
                action_id: "action_search_preemptive_code".to_string(),
            },
            (Stage::Posthoc, TaskDomain::Code) => CriticBundle {
                system_id: format!("{role}_system_code"),
                thought_id: format!("{role}_thought_posthoc_code"),
                action_id: "action_review_posthoc_code".to_string(),
            },
            (Stage::Preemptive, TaskDomain::OpenEnded) => CriticBundle {
                system_id: format!("{role}_system_open_ended"),
                thought_id: format!("{role}_thought_preemptive_open_ended"),
                action_id: "action_search_preemptive_open_ended".to_string(),
            },
            (Stage::Posthoc, TaskDomain::OpenEnded) | (Stage::Initial, _) => {
                return Err(PromptError::NoTemplateForCombination {
                    role,
                    stage,
                    domain,
                })
            }
        };
        for id in [&bundle.system_id, &bundle.thought_id, &bundle.action_id] {
            self.get(id)?;
        }
        Ok(bundle)
    }

    pub fn actor_initial_id(domain: TaskDomain) -> &'static str {
        match domain {
            TaskDomain::Code => "actor_initial_code",
            TaskDomain::OpenEnded => "actor_initial_open_ended",
        }
    }

    pub fn actor_revise_id(domain: TaskDomain) -> &'static str {
        match domain {
            TaskDomain::Code => "actor_revise_code",
            TaskDomain::OpenEnded => "actor_revise_open_ended",
        }
    }

    pub fn summarizer_id(domain: TaskDomain) -> &'static str {
        match domain {
            TaskDomain::Code => "summarizer_code",
            TaskDomain::OpenEnded => "summarizer_open_ended",
        }
    }
}

/// Returns the placeholder name if `tail` starts with `{name}` for a known
/// vocabulary word.
fn placeholder_token(tail: &str) -> Option<&str> {
    let inner = tail.strip_prefix('{')?;
    let close = inner.find('}')?;
    let name = &inner[..close];
    PLACEHOLDERS.contains(&name).then_some(name)
}

/// Any `{lower_snake}` token, for load-time vocabulary checking.
fn scan_tokens(body: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let tail = &rest[open + 1..];
        if let Some(close) = tail.find('}') {
            let name = &tail[..close];
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                tokens.push(name);
                rest = &tail[close + 1..];
                continue;
            }
        }
        rest = tail;
    }
    tokens
}

fn parse_template_file(file: &str, content: &str) -> Result<PromptTemplate, PromptError> {
    let bad = |message: &str| PromptError::BadTemplateFile {
        file: file.to_string(),
        message: message.to_string(),
    };
    let rest = content
        .strip_prefix("---\n")
        .ok_or_else(|| bad("missing front matter"))?;
    let (header, body) = rest
        .split_once("\n---\n")
        .ok_or_else(|| bad("unterminated front matter"))?;

    let mut id = None;
    let mut placeholders = BTreeSet::new();
    let mut domain = None;
    for line in header.lines() {
        let Some((key, value)) = line.split_once(':') else {
            return Err(bad(&format!("malformed front-matter line `{line}`")));
        };
        let value = value.trim();
        match key.trim() {
            "id" => id = Some(value.to_string()),
            "placeholders" => {
                for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    if !PLACEHOLDERS.contains(&part) {
                        return Err(PromptError::UnknownPlaceholder {
                            template: file.to_string(),
                            placeholder: part.to_string(),
                        });
                    }
                    placeholders.insert(part.to_string());
                }
            }
            "domain" => {
                domain = Some(match value {
                    "code" => TaskDomain::Code,
                    "open_ended" => TaskDomain::OpenEnded,
                    other => return Err(bad(&format!("unknown domain `{other}`"))),
                })
            }
            other => return Err(bad(&format!("unknown front-matter key `{other}`"))),
        }
    }
    let id = id.ok_or_else(|| bad("missing id"))?;
    let domain = domain.ok_or_else(|| bad("missing domain"))?;
    let body = body.trim_end_matches('\n').to_string();

    for token in scan_tokens(&body) {
        if !placeholders.contains(token) {
            return Err(PromptError::UnknownPlaceholder {
                template: id.clone(),
                placeholder: token.to_string(),
            });
        }
    }

    Ok(PromptTemplate {
        id,
        body,
        required_placeholders: placeholders,
        domain_variant: domain,
    })
}
