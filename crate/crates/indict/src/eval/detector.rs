//! Rule-based insecure-code detection.
//!
//! A desk-scale stand-in for the large weggli/semgrep rule sets used by
//! security benchmarks: textual rules (literal, regex, or a
//! must-contain/must-not-contain pair) scoped by language, shipped as data
//! files and extensible by pointing at another rules directory. Untagged
//! code blocks are matched against every rule; recall matters more than
//! precision for a safety metric.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CodeBlock, UNCLOSED_TAG};
use crate::sandbox::normalize_language;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("rule file {file}: {message}")]
    BadRuleFile { file: String, message: String },
    #[error("rule {id}: pattern does not compile: {message}")]
    BadPattern { id: String, message: String },
    #[error("duplicate rule id `{0}`")]
    DuplicateId(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternSpec {
    /// Verbatim substring.
    Literal(String),
    /// Regular expression.
    Regex(String),
    /// Findings at `must_contain` matches, silenced entirely when
    /// `must_not_contain` matches anywhere in the block.
    Pair {
        must_contain: String,
        must_not_contain: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageScope {
    Any,
    Languages(BTreeSet<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRule {
    pub id: String,
    pub cwe: String,
    pub language_scope: LanguageScope,
    pub pattern: PatternSpec,
    pub severity: Severity,
    pub description: String,
}

/// One rule match with its location in the code body (char offsets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub rule_id: String,
    pub cwe: String,
    pub span: (usize, usize),
    pub excerpt: String,
}

enum CompiledPattern {
    Literal(String),
    Regex(regex::Regex),
    Pair {
        must_contain: regex::Regex,
        must_not_contain: regex::Regex,
    },
}

struct CompiledRule {
    rule: DetectorRule,
    pattern: CompiledPattern,
}

/// A loaded, compiled rule set.
pub struct RulePack {
    rules: Vec<CompiledRule>,
}

const BUILTIN_RULE_FILES: &[(&str, &str)] = &[
    (
        "injection.rules",
        include_str!("../../assets/rules/injection.rules"),
    ),
    (
        "crypto.rules",
        include_str!("../../assets/rules/crypto.rules"),
    ),
    (
        "secrets.rules",
        include_str!("../../assets/rules/secrets.rules"),
    ),
    (
        "platform.rules",
        include_str!("../../assets/rules/platform.rules"),
    ),
];

/// The shipped rule pack, compiled once.
pub fn builtin_pack() -> &'static RulePack {
    static PACK: OnceLock<RulePack> = OnceLock::new();
    PACK.get_or_init(|| RulePack::builtin().expect("builtin rule pack compiles"))
}

impl RulePack {
    pub fn builtin() -> Result<Self, DetectError> {
        let mut rules = Vec::new();
        for (file, content) in BUILTIN_RULE_FILES {
            rules.extend(parse_rule_file(file, content)?);
        }
        Self::compile(rules)
    }

    /// Loads every `*.rules` file from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, DetectError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|ext| ext == "rules"))
            .collect();
        paths.sort();
        let mut rules = Vec::new();
        for path in paths {
            let content = std::fs::read_to_string(&path)?;
            rules.extend(parse_rule_file(&path.display().to_string(), &content)?);
        }
        Self::compile(rules)
    }

    pub fn compile(rules: Vec<DetectorRule>) -> Result<Self, DetectError> {
        let mut seen = BTreeSet::new();
        let mut compiled = Vec::new();
        for rule in rules {
            if !seen.insert(rule.id.clone()) {
                return Err(DetectError::DuplicateId(rule.id));
            }
            let bad = |message: String| DetectError::BadPattern {
                id: rule.id.clone(),
                message,
            };
            let pattern = match &rule.pattern {
                PatternSpec::Literal(lit) => CompiledPattern::Literal(lit.clone()),
                PatternSpec::Regex(re) => {
                    CompiledPattern::Regex(regex::Regex::new(re).map_err(|e| bad(e.to_string()))?)
                }
                PatternSpec::Pair {
                    must_contain,
                    must_not_contain,
                } => CompiledPattern::Pair {
                    must_contain: regex::Regex::new(must_contain)
                        .map_err(|e| bad(e.to_string()))?,
                    must_not_contain: regex::Regex::new(must_not_contain)
                        .map_err(|e| bad(e.to_string()))?,
                },
            };
            compiled.push(CompiledRule { rule, pattern });
        }
        Ok(Self { rules: compiled })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &DetectorRule> {
        self.rules.iter().map(|c| &c.rule)
    }

    /// Runs every applicable rule over the block body. Pure and
    /// deterministic: findings ordered by (rule id, span start).
    pub fn detect(&self, block: &CodeBlock) -> Vec<Finding> {
        let language = block
            .language_tag
            .as_deref()
            .filter(|t| *t != UNCLOSED_TAG)
            .map(normalize_language);
        let mut findings = Vec::new();
        for compiled in &self.rules {
            let applies = match (&compiled.rule.language_scope, &language) {
                (LanguageScope::Any, _) => true,
                // Untagged blocks are conservatively checked by every rule.
                (LanguageScope::Languages(_), None) => true,
                (LanguageScope::Languages(set), Some(lang)) => set.contains(lang),
            };
            if !applies {
                continue;
            }
            let matches: Vec<(usize, usize)> = match &compiled.pattern {
                CompiledPattern::Literal(lit) => block
                    .body
                    .match_indices(lit.as_str())
                    .map(|(at, m)| (at, at + m.len()))
                    .collect(),
                CompiledPattern::Regex(re) => re
                    .find_iter(&block.body)
                    .map(|m| (m.start(), m.end()))
                    .collect(),
                CompiledPattern::Pair {
                    must_contain,
                    must_not_contain,
                } => {
                    if must_not_contain.is_match(&block.body) {
                        Vec::new()
                    } else {
                        must_contain
                            .find_iter(&block.body)
                            .map(|m| (m.start(), m.end()))
                            .collect()
                    }
                }
            };
            for (byte_start, byte_end) in matches {
                let span = (
                    block.body[..byte_start].chars().count(),
                    block.body[..byte_end].chars().count(),
                );
                findings.push(Finding {
                    rule_id: compiled.rule.id.clone(),
                    cwe: compiled.rule.cwe.clone(),
                    span,
                    excerpt: block.body[byte_start..byte_end].to_string(),
                });
            }
        }
        findings.sort_by(|a, b| (&a.rule_id, a.span.0).cmp(&(&b.rule_id, b.span.0)));
        findings
    }
}

fn parse_rule_file(file: &str, content: &str) -> Result<Vec<DetectorRule>, DetectError> {
    let mut rules = Vec::new();
    for stanza in content.split("\n\n") {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for line in stanza.lines() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| DetectError::BadRuleFile {
                    file: file.to_string(),
                    message: format!("malformed line `{line}`"),
                })?;
            fields.insert(key.trim(), value.strip_prefix(' ').unwrap_or(value));
        }
        if fields.is_empty() {
            continue;
        }
        let take = |key: &str| -> Result<&str, DetectError> {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| DetectError::BadRuleFile {
                    file: file.to_string(),
                    message: format!("stanza missing `{key}`"),
                })
        };
        let id = take("id")?.to_string();
        let scope = match take("scope")? {
            "any" => LanguageScope::Any,
            list => LanguageScope::Languages(
                list.split(',')
                    .map(|s| normalize_language(s.trim()))
                    .collect(),
            ),
        };
        let severity = match take("severity")? {
            "low" => Severity::Low,
            "medium" => Severity::Medium,
            "high" => Severity::High,
            other => {
                return Err(DetectError::BadRuleFile {
                    file: file.to_string(),
                    message: format!("unknown severity `{other}`"),
                })
            }
        };
        let pattern = match take("kind")? {
            "literal" => PatternSpec::Literal(take("pattern")?.to_string()),
            "regex" => PatternSpec::Regex(take("pattern")?.to_string()),
            "pair" => PatternSpec::Pair {
                must_contain: take("pattern")?.to_string(),
                must_not_contain: take("forbid")?.to_string(),
            },
            other => {
                return Err(DetectError::BadRuleFile {
                    file: file.to_string(),
                    message: format!("unknown kind `{other}`"),
                })
            }
        };
        rules.push(DetectorRule {
            id,
            cwe: take("cwe")?.to_string(),
            language_scope: scope,
            pattern,
            severity,
            description: take("description")?.to_string(),
        });
    }
    Ok(rules)
}

/// One labelled corpus snippet: the code block and the rule ids expected to
/// fire on it.
pub struct CorpusEntry {
    pub name: String,
    pub block: CodeBlock,
    pub expected: BTreeSet<String>,
}

/// Loads a snippet directory: every non-`.expect` file is a snippet whose
/// language comes from its extension, with expected rule ids (one per line)
/// in a `<file>.expect` sidecar.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusEntry>, DetectError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext != "expect"))
        .collect();
    paths.sort();
    let mut entries = Vec::new();
    for path in paths {
        let sidecar = path.with_extension(format!(
            "{}.expect",
            path.extension().unwrap_or_default().to_string_lossy()
        ));
        let expected_text = std::fs::read_to_string(&sidecar)
            .map_err(|_| DetectError::Corpus(format!("missing sidecar {}", sidecar.display())))?;
        let expected: BTreeSet<String> = expected_text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let language_tag = path
            .extension()
            .map(|ext| normalize_language(&ext.to_string_lossy()));
        let body = std::fs::read_to_string(&path)?;
        entries.push(CorpusEntry {
            name: path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            block: CodeBlock {
                language_tag,
                body,
                span: (0, 0),
            },
            expected,
        });
    }
    Ok(entries)
}

/// The shipped corpus directory, resolved relative to the crate.
pub fn builtin_corpus_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/corpus")
}
