//! Writing a batch of runs to disk: one trace per run plus a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentKind, RunConfig};
use crate::error::{HarnessError, Result};
use crate::runner::{run_all, RunOutput};
use crate::trace_io::{write_trace, RunStatus};

pub const MANIFEST_SCHEMA: &str = "errdiag-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub run_id: String,
    pub trace: String,
    pub seed: u64,
    pub variant: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub rows: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_optimizer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub tool_version: String,
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<ManifestRun>,
}

impl Manifest {
    pub fn failed_runs(&self) -> Vec<&str> {
        self.runs
            .iter()
            .filter(|r| r.status == RunStatus::Failed)
            .map(|r| r.run_id.as_str())
            .collect()
    }
}

/// Writes traces (and trained meta-optimizers) for `outputs` into `out_dir`
/// and returns the manifest, which is written as well.
pub fn write_outputs(config: &RunConfig, out_dir: &Path, outputs: &[RunOutput]) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(HarnessError::output(out_dir))?;
    let mut runs = Vec::with_capacity(outputs.len());
    for out in outputs {
        let id = &out.header.run_id;
        let trace = format!("{id}.jsonl");
        write_trace(&out_dir.join(&trace), &out.header, &out.rows)?;
        let meta_optimizer = match &out.meta_optimizer {
            Some(text) => {
                let name = format!("{id}.meta");
                let path = out_dir.join(&name);
                std::fs::write(&path, text).map_err(HarnessError::output(&path))?;
                Some(name)
            }
            None => None,
        };
        runs.push(ManifestRun {
            run_id: id.clone(),
            trace,
            seed: out.header.seed,
            variant: out.header.variant.clone(),
            status: out.header.status,
            error: out.header.error.clone(),
            rows: out.rows.len(),
            metrics: out.metrics.clone(),
            meta_optimizer,
        });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        kind: config.kind,
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        runs,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).map_err(HarnessError::output(&path))?;
    Ok(manifest)
}

/// Turns failed runs into an error after their partial output has been saved.
pub fn check_failures(manifest: &Manifest, outputs: &[RunOutput]) -> Result<()> {
    let failed = manifest.failed_runs();
    if let Some(first) = outputs.iter().find_map(|o| o.error.clone()) {
        return Err(HarnessError::Numeric {
            run_id: failed.first().map(|s| s.to_string()).unwrap_or_default(),
            failed: failed.len(),
            source: first,
        });
    }
    Ok(())
}

/// `run`: every seed of `config`, traces and manifest into `out_dir`.
pub fn run_experiment(config: &RunConfig, out_dir: &Path, jobs: usize) -> Result<Manifest> {
    let outputs = run_all(config, jobs)?;
    let manifest = write_outputs(config, out_dir, &outputs)?;
    check_failures(&manifest, &outputs)?;
    Ok(manifest)
}
