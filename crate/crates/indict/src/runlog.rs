//! Newline-delimited JSON run logs: a schema header line, then one run
//! record per line. Lines are independently parseable, so corruption of one
//! line loses only that record.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::RunRecord;

pub const SCHEMA_NAME: &str = "indict-run-log";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("run log {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("run log {path}: bad header: {message}")]
    BadHeader { path: String, message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// A line that failed to parse, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line_number: usize,
    pub error: String,
}

pub struct RunLogWriter {
    out: BufWriter<std::fs::File>,
}

impl RunLogWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        let header = Header {
            schema: SCHEMA_NAME.to_string(),
            version: SCHEMA_VERSION,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, record: &RunRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Reads a run log, skipping corrupt record lines rather than failing.
pub fn read_run_log(path: &Path) -> Result<(Vec<RunRecord>, Vec<SkippedLine>), LogError> {
    let display = path.display().to_string();
    let io = |source: std::io::Error| LogError::Io {
        path: display.clone(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let reader = std::io::BufReader::new(file);

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut saw_header = false;
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let header: Header = serde_json::from_str(&line).map_err(|e| LogError::BadHeader {
                path: display.clone(),
                message: e.to_string(),
            })?;
            if header.schema != SCHEMA_NAME || header.version != SCHEMA_VERSION {
                return Err(LogError::BadHeader {
                    path: display.clone(),
                    message: format!(
                        "expected {SCHEMA_NAME} v{SCHEMA_VERSION}, found {} v{}",
                        header.schema, header.version
                    ),
                });
            }
            saw_header = true;
            continue;
        }
        match serde_json::from_str::<RunRecord>(&line) {
            Ok(record) => records.push(record),
            Err(e) => skipped.push(SkippedLine {
                line_number: index + 1,
                error: e.to_string(),
            }),
        }
    }
    if !saw_header {
        return Err(LogError::BadHeader {
            path: display,
            message: "empty file".to_string(),
        });
    }
    Ok((records, skipped))
}
