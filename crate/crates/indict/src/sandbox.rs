//! Fenced-block extraction and isolated subprocess execution.
//!
//! Isolation posture: each execution gets a fresh temp working directory
//! (removed afterwards), a cleared environment, a wall-clock timeout, and
//! capped output capture. This contains relative-path writes and runaway
//! processes; container/seccomp hardening is out of scope and left as a
//! runner-wrapper extension point.

use std::collections::BTreeMap;
use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{CodeBlock, ExecutionReport, ExitStatus, SandboxLimits, UNCLOSED_TAG};

/// Extracts every fenced code block from `raw_text`, in order.
///
/// A fence is a line starting with three backticks; the opening fence may
/// carry a language tag. An unclosed trailing fence yields a block extending
/// to end-of-text whose language tag is the convention marker "unclosed".
/// Spans are character offsets covering the block including its fences.
pub fn extract_code_blocks(raw_text: &str) -> Vec<CodeBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<(usize, Option<String>, usize)> = None; // (fence start, tag, body start)
    let mut pos = 0usize; // char offset of current line start
    let mut body = String::new();

    for line in raw_text.split_inclusive('\n') {
        let line_chars = line.chars().count();
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if let Some(rest) = trimmed.strip_prefix("```") {
            match open.take() {
                None => {
                    let tag = rest.trim();
                    let tag = if tag.is_empty() {
                        None
                    } else {
                        Some(tag.to_string())
                    };
                    open = Some((pos, tag, pos + line_chars));
                    body.clear();
                }
                Some((start, tag, _)) => {
                    let end = pos + trimmed.chars().count();
                    blocks.push(CodeBlock {
                        language_tag: tag,
                        body: finish_body(&body),
                        span: (start, end),
                    });
                }
            }
        } else if open.is_some() {
            body.push_str(line);
        }
        pos += line_chars;
    }

    if let Some((start, _, _)) = open {
        blocks.push(CodeBlock {
            language_tag: Some(UNCLOSED_TAG.to_string()),
            body: finish_body(&body),
            span: (start, raw_text.chars().count()),
        });
    }
    blocks
}

fn finish_body(body: &str) -> String {
    body.strip_suffix('\n').unwrap_or(body).to_string()
}

/// Canonical language name for a fence tag or runner key.
pub fn normalize_language(tag: &str) -> String {
    match tag.trim().to_ascii_lowercase().as_str() {
        "py" | "python3" => "python".to_string(),
        "js" | "node" => "javascript".to_string(),
        "shell" | "sh" => "bash".to_string(),
        other => other.to_string(),
    }
}

/// Picks the block to execute: the longest block whose tag matches the hint,
/// else the longest block overall. Ties go to the earliest block.
pub fn select_principal_block<'a>(
    blocks: &'a [CodeBlock],
    language_hint: Option<&str>,
) -> Option<&'a CodeBlock> {
    let longest = |candidates: Vec<&'a CodeBlock>| -> Option<&'a CodeBlock> {
        candidates
            .into_iter()
            .max_by(|a, b| a.body.chars().count().cmp(&b.body.chars().count()))
    };
    if let Some(hint) = language_hint {
        let hint = normalize_language(hint);
        let matching: Vec<&CodeBlock> = blocks
            .iter()
            .rev() // max_by keeps the last max; reversed input keeps the first
            .filter(|b| b.language_tag.as_deref().map(normalize_language) == Some(hint.clone()))
            .collect();
        if let Some(best) = longest(matching) {
            return Some(best);
        }
    }
    longest(blocks.iter().rev().collect())
}

/// Command template for one language: `{file}` in `cmd` is replaced with the
/// path of the written source file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerSpec {
    pub cmd: Vec<String>,
    pub file_extension: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<u64>,
}

/// Maps canonical language names to runner command templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerRegistry {
    pub runners: BTreeMap<String, RunnerSpec>,
    /// Language assumed for untagged blocks, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_language: Option<String>,
}

impl Default for RunnerRegistry {
    fn default() -> Self {
        let mut runners = BTreeMap::new();
        runners.insert(
            "python".to_string(),
            RunnerSpec {
                cmd: vec!["python3".into(), "-I".into(), "{file}".into()],
                file_extension: "py".into(),
                timeout_s: None,
            },
        );
        Self {
            runners,
            default_language: Some("python".to_string()),
        }
    }
}

/// Executes code blocks in isolated subprocesses under a shared
/// concurrent-execution cap.
pub struct Executor {
    registry: RunnerRegistry,
    limits: SandboxLimits,
    slots: Arc<(Mutex<usize>, Condvar)>,
}

impl Executor {
    pub fn new(registry: RunnerRegistry, limits: SandboxLimits) -> Self {
        let cap = limits.max_concurrent.max(1);
        Self {
            registry,
            limits,
            slots: Arc::new((Mutex::new(cap), Condvar::new())),
        }
    }

    pub fn limits(&self) -> &SandboxLimits {
        &self.limits
    }

    /// Runs the block and reports what actually happened. Never panics or
    /// errors: unsupported languages and spawn failures yield sandbox_error
    /// reports.
    pub fn execute(&self, block: &CodeBlock) -> ExecutionReport {
        let _slot = SlotGuard::acquire(&self.slots);
        let language = block
            .language_tag
            .as_deref()
            .filter(|t| *t != UNCLOSED_TAG)
            .map(normalize_language)
            .or_else(|| self.registry.default_language.clone());
        let Some(language) = language else {
            return self.error_report(block, "no language tag and no default runner configured");
        };
        let Some(spec) = self.registry.runners.get(&language) else {
            return self.error_report(block, &format!("no runner configured for `{language}`"));
        };

        let dir = match &self.limits.sandbox_root {
            Some(root) => {
                if let Err(e) = std::fs::create_dir_all(root) {
                    return self.error_report(block, &format!("sandbox root: {e}"));
                }
                tempfile::TempDir::with_prefix_in("exec-", root)
            }
            None => tempfile::TempDir::with_prefix("indict-exec-"),
        };
        let dir = match dir {
            Ok(dir) => dir,
            Err(e) => return self.error_report(block, &format!("temp dir: {e}")),
        };
        let file_path = dir.path().join(format!("main.{}", spec.file_extension));
        if let Err(e) = std::fs::write(&file_path, &block.body) {
            return self.error_report(block, &format!("write source: {e}"));
        }

        let file_str = file_path.to_string_lossy();
        let argv: Vec<String> = spec
            .cmd
            .iter()
            .map(|part| part.replace("{file}", &file_str))
            .collect();
        if argv.is_empty() {
            return self.error_report(block, "runner command template is empty");
        }

        let mut command = Command::new(&argv[0]);
        command
            .args(&argv[1..])
            .current_dir(dir.path())
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", dir.path())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());

        let start = Instant::now();
        let mut child = match command.spawn() {
            Ok(child) => child,
            Err(e) => return self.error_report(block, &format!("spawn {}: {e}", argv[0])),
        };

        let stdout_reader = capped_reader(child.stdout.take(), self.limits.stdout_cap_bytes);
        let stderr_reader = capped_reader(child.stderr.take(), self.limits.stderr_cap_bytes);

        let timeout = Duration::from_millis(
            spec.timeout_s
                .map(|s| s * 1_000)
                .unwrap_or(self.limits.timeout_ms),
        );
        let mut timed_out = false;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) => {
                    if start.elapsed() >= timeout {
                        timed_out = true;
                        let _ = child.kill();
                        break child.wait().ok();
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(_) => break None,
            }
        };
        let wall_time_ms = start.elapsed().as_millis() as u64;
        let stdout = stdout_reader
            .map(|h| h.join().unwrap_or_default())
            .unwrap_or_default();
        let stderr = stderr_reader
            .map(|h| h.join().unwrap_or_default())
            .unwrap_or_default();

        let exit_status = if timed_out {
            ExitStatus::Timeout
        } else {
            match status {
                Some(s) if s.success() => ExitStatus::Ok,
                Some(_) => ExitStatus::NonzeroExit,
                None => ExitStatus::SandboxError,
            }
        };
        ExecutionReport {
            exit_status,
            stdout,
            stderr,
            // A killed process always reports at least the limit it ran to.
            wall_time_ms: if timed_out {
                wall_time_ms.max(timeout.as_millis() as u64)
            } else {
                wall_time_ms
            },
            executed_block: block.clone(),
        }
    }

    fn error_report(&self, block: &CodeBlock, message: &str) -> ExecutionReport {
        ExecutionReport {
            exit_status: ExitStatus::SandboxError,
            stdout: String::new(),
            stderr: message.to_string(),
            wall_time_ms: 0,
            executed_block: block.clone(),
        }
    }
}

pub const TRUNCATION_MARKER: &str = "\n...[truncated]";

/// Drains a child stream on its own thread, retaining at most `cap` bytes.
fn capped_reader(
    stream: Option<impl Read + Send + 'static>,
    cap: usize,
) -> Option<std::thread::JoinHandle<String>> {
    let mut stream = stream?;
    Some(std::thread::spawn(move || {
        let mut kept = Vec::with_capacity(cap.min(64 * 1024));
        let mut buf = [0u8; 8192];
        let mut truncated = false;
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if kept.len() < cap {
                        let take = n.min(cap - kept.len());
                        kept.extend_from_slice(&buf[..take]);
                        if take < n {
                            truncated = true;
                        }
                    } else {
                        truncated = true;
                    }
                }
            }
        }
        let mut text = String::from_utf8_lossy(&kept).into_owned();
        if truncated {
            text.push_str(TRUNCATION_MARKER);
        }
        text
    }))
}

struct SlotGuard<'a> {
    slots: &'a (Mutex<usize>, Condvar),
}

impl<'a> SlotGuard<'a> {
    fn acquire(slots: &'a Arc<(Mutex<usize>, Condvar)>) -> Self {
        let (lock, cvar) = &**slots;
        let mut available = lock.lock().expect("slot lock poisoned");
        while *available == 0 {
            available = cvar.wait(available).expect("slot lock poisoned");
        }
        *available -= 1;
        Self { slots }
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let (lock, cvar) = self.slots;
        *lock.lock().expect("slot lock poisoned") += 1;
        cvar.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent character-scan reference for fenced-block extraction,
    /// written before the production scanner; enumerates fence lines by
    /// splitting on newlines and tracking char offsets by hand.
    fn reference_extract(text: &str) -> Vec<(Option<String>, String, (usize, usize))> {
        let mut lines: Vec<(usize, String)> = Vec::new();
        let mut current = String::new();
        let mut line_start = 0;
        for (offset, ch) in text.chars().enumerate() {
            if current.is_empty() {
                line_start = offset;
            }
            current.push(ch);
            if ch == '\n' {
                lines.push((line_start, current.clone()));
                current.clear();
            }
        }
        if !current.is_empty() {
            lines.push((line_start, current.clone()));
        }

        let mut result = Vec::new();
        let mut open: Option<(usize, Option<String>)> = None;
        let mut body_lines: Vec<String> = Vec::new();
        for (start, line) in &lines {
            let stripped = line.trim_end_matches(['\n', '\r']);
            if let Some(tag_part) = stripped.strip_prefix("```") {
                if let Some((open_start, tag)) = open.take() {
                    let end = start + stripped.chars().count();
                    result.push((tag, body_lines.join(""), (open_start, end)));
                    body_lines.clear();
                } else {
                    let tag = tag_part.trim();
                    open = Some((
                        *start,
                        if tag.is_empty() {
                            None
                        } else {
                            Some(tag.to_string())
                        },
                    ));
                }
            } else if open.is_some() {
                body_lines.push(line.clone());
            }
        }
        if let Some((open_start, _)) = open {
            result.push((
                Some("unclosed".to_string()),
                body_lines.join(""),
                (open_start, text.chars().count()),
            ));
        }
        result
            .into_iter()
            .map(|(tag, body, span)| {
                (
                    tag,
                    body.strip_suffix('\n').unwrap_or(&body).to_string(),
                    span,
                )
            })
            .collect()
    }

    fn assert_matches_reference(text: &str) {
        let got: Vec<(Option<String>, String, (usize, usize))> = extract_code_blocks(text)
            .into_iter()
            .map(|b| (b.language_tag, b.body, b.span))
            .collect();
        assert_eq!(got, reference_extract(text), "input: {text:?}");
    }

    #[test]
    fn single_python_block() {
        let blocks = extract_code_blocks("```python\nprint(1)\n```");
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].language_tag.as_deref(), Some("python"));
        assert_eq!(blocks[0].body, "print(1)");
        assert_matches_reference("```python\nprint(1)\n```");
    }

    #[test]
    fn empty_text_yields_nothing() {
        assert!(extract_code_blocks("").is_empty());
    }

    #[test]
    fn two_closed_blocks_and_one_unclosed_trailing_fence() {
        let text = "intro\n```python\na = 1\n```\nmiddle\n```js\nconsole.log(1)\n```\ntail\n```rust\nfn main() {}\n";
        let blocks = extract_code_blocks(text);
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[0].language_tag.as_deref(), Some("python"));
        assert_eq!(blocks[1].language_tag.as_deref(), Some("js"));
        assert_eq!(blocks[2].language_tag.as_deref(), Some(UNCLOSED_TAG));
        assert_eq!(blocks[2].body, "fn main() {}");
        assert_matches_reference(text);
    }

    #[test]
    fn surrounding_prose_is_excluded() {
        let text = "Some explanation.\n```\nraw block\n```\nAnd a closing note.";
        let blocks = extract_code_blocks(text);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].language_tag, None);
        assert_eq!(blocks[0].body, "raw block");
        assert_matches_reference(text);
    }

    #[test]
    fn spans_are_in_bounds_and_ordered() {
        let text = "a\n```py\nx\n```\nb\n```\ny\n```";
        let blocks = extract_code_blocks(text);
        let total = text.chars().count();
        let mut last_end = 0;
        for block in &blocks {
            assert!(block.span.0 >= last_end);
            assert!(block.span.1 <= total);
            last_end = block.span.1;
        }
        assert_matches_reference(text);
    }

    #[test]
    fn principal_block_prefers_hint_match() {
        let text = "```python\nline\nline\nline\nline\nline\nline\nline\nline\nline\nline\n```\n```bash\nls\nls\n```";
        let blocks = extract_code_blocks(text);
        let principal = select_principal_block(&blocks, Some("python")).unwrap();
        assert_eq!(principal.language_tag.as_deref(), Some("python"));

        // Hint with no matching block falls back to the longest overall.
        let principal = select_principal_block(&blocks, Some("rust")).unwrap();
        assert_eq!(principal.language_tag.as_deref(), Some("python"));
    }

    #[test]
    fn principal_block_of_empty_list_is_none() {
        assert!(select_principal_block(&[], Some("python")).is_none());
    }

    #[test]
    fn hint_aliases_normalize() {
        let text = "```py\nshort\n```";
        let blocks = extract_code_blocks(text);
        assert!(select_principal_block(&blocks, Some("python")).is_some());
    }

    fn python_block(body: &str) -> CodeBlock {
        CodeBlock {
            language_tag: Some("python".into()),
            body: body.into(),
            span: (0, 0),
        }
    }

    fn quick_executor(timeout_ms: u64) -> Executor {
        let limits = SandboxLimits {
            timeout_ms,
            ..SandboxLimits::default()
        };
        Executor::new(RunnerRegistry::default(), limits)
    }

    #[test]
    fn echo_program_reports_ok() {
        let report = quick_executor(10_000).execute(&python_block("print(\"hi\")"));
        assert_eq!(report.exit_status, ExitStatus::Ok);
        assert_eq!(report.stdout, "hi\n");
        assert_eq!(report.stderr, "");
    }

    #[test]
    fn infinite_loop_times_out_at_the_limit() {
        let report = quick_executor(1_000).execute(&python_block("while True: pass"));
        assert_eq!(report.exit_status, ExitStatus::Timeout);
        assert!(
            report.wall_time_ms >= 1_000,
            "wall time {}",
            report.wall_time_ms
        );
    }

    #[test]
    fn missing_module_is_a_nonzero_exit() {
        let report = quick_executor(10_000).execute(&python_block("import nonexistent_mod_xyz"));
        assert_eq!(report.exit_status, ExitStatus::NonzeroExit);
        assert!(
            report.stderr.contains("ModuleNotFoundError"),
            "stderr: {}",
            report.stderr
        );
    }

    #[test]
    fn unsupported_language_is_a_sandbox_error() {
        let block = CodeBlock {
            language_tag: Some("cobol".into()),
            body: "DISPLAY 'HI'.".into(),
            span: (0, 0),
        };
        let report = quick_executor(10_000).execute(&block);
        assert_eq!(report.exit_status, ExitStatus::SandboxError);
    }

    #[test]
    fn missing_runner_binary_is_a_sandbox_error() {
        let mut registry = RunnerRegistry::default();
        registry.runners.insert(
            "python".into(),
            RunnerSpec {
                cmd: vec!["definitely-not-a-real-binary-xyz".into(), "{file}".into()],
                file_extension: "py".into(),
                timeout_s: None,
            },
        );
        let executor = Executor::new(registry, SandboxLimits::default());
        let report = executor.execute(&python_block("print(1)"));
        assert_eq!(report.exit_status, ExitStatus::SandboxError);
    }

    #[test]
    fn output_is_capped_with_a_marker() {
        let limits = SandboxLimits {
            stdout_cap_bytes: 100,
            ..SandboxLimits::default()
        };
        let executor = Executor::new(RunnerRegistry::default(), limits);
        let report = executor.execute(&python_block("print('x' * 100000)"));
        assert!(report.stdout.len() <= 100 + TRUNCATION_MARKER.len());
        assert!(report.stdout.ends_with(TRUNCATION_MARKER));
    }

    #[test]
    fn relative_writes_stay_in_the_temp_dir() {
        let before: Vec<_> = std::fs::read_dir(".")
            .unwrap()
            .flatten()
            .map(|e| e.path())
            .collect();
        let report = quick_executor(10_000).execute(&python_block(
            "open('escaped.txt', 'w').write('x')\nprint('done')",
        ));
        assert_eq!(report.exit_status, ExitStatus::Ok);
        let after: Vec<_> = std::fs::read_dir(".")
            .unwrap()
            .flatten()
            .map(|e| e.path())
            .collect();
        assert_eq!(before, after);
        assert!(!std::path::Path::new("escaped.txt").exists());
    }
}
