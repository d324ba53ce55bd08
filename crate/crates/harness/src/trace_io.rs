//! JSON Lines trace files: one header object, then one row per step.

use std::fmt::Write as _;
use std::path::Path;

use errdiag::trace::TRACE_SCHEMA_VERSION;
use errdiag::{DiagnosticConfig, TraceRecord};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentKind;
use crate::error::{HarnessError, Result};

pub const TRACE_SCHEMA: &str = "errdiag-trace";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Stopped early on a numeric failure; the rows up to it are kept.
    Failed,
}

/// What the `signal` column holds and how the diagnostics consumed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// A loss; the diagnostics see its increments.
    Loss,
    /// A TD error, fed to the diagnostics directly.
    TdError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub kind: ExperimentKind,
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub rows: usize,
    pub signal: SignalKind,
    pub diag: DiagnosticConfig,
    /// Diagnostics restart at every new `episode` value.
    pub diag_reset_per_episode: bool,
}

impl TraceHeader {
    pub fn check_schema(&self, path: &Path) -> Result<()> {
        if self.schema != TRACE_SCHEMA || self.version != TRACE_SCHEMA_VERSION {
            return Err(HarnessError::Trace {
                path: path.to_path_buf(),
                msg: format!(
                    "schema {} v{} is not supported (expected {TRACE_SCHEMA} v{TRACE_SCHEMA_VERSION})",
                    self.schema, self.version
                ),
            });
        }
        Ok(())
    }
}

pub fn to_jsonl(header: &TraceHeader, rows: &[TraceRecord]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", serde_json::to_string(header).expect("header serializes"));
    for row in rows {
        let _ = writeln!(out, "{}", serde_json::to_string(row).expect("row serializes"));
    }
    out
}

pub fn write_trace(path: &Path, header: &TraceHeader, rows: &[TraceRecord]) -> Result<()> {
    std::fs::write(path, to_jsonl(header, rows)).map_err(HarnessError::output(path))
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let bad = |line: usize, e: serde_json::Error| HarnessError::Trace {
        path: path.to_path_buf(),
        msg: format!("line {line}: {e}"),
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| HarnessError::Trace {
        path: path.to_path_buf(),
        msg: "empty file".into(),
    })?;
    let header: TraceHeader = serde_json::from_str(first).map_err(|e| bad(1, e))?;
    header.check_schema(path)?;
    let rows = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i + 1, e)))
        .collect::<Result<Vec<TraceRecord>>>()?;
    if rows.len() != header.rows {
        return Err(HarnessError::Trace {
            path: path.to_path_buf(),
            msg: format!("header announces {} rows, found {}", header.rows, rows.len()),
        });
    }
    Ok((header, rows))
}

pub fn read_trace(path: &Path) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(&text, path)
}
