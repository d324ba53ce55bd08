//! Offline summaries of a trace directory: per-step aggregates across seeds,
//! the paired entropy-coefficient series, and a replay check of the logged
//! diagnostics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use errdiag::{DiagnosticState, TraceRecord};
use serde::Serialize;

use crate::ablate::write_csv;
use crate::config::ExperimentKind;
use crate::error::{HarnessError, Result};
use crate::metrics::{mean, std_dev};
use crate::runner::run_metrics;
use crate::trace_io::{read_trace, RunStatus, SignalKind, TraceHeader};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const ENTROPY_CSV: &str = "entropy_paired.csv";
/// Largest tolerated gap between logged and recomputed diagnostics.
pub const REPLAY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub path: PathBuf,
    pub header: TraceHeader,
    pub rows: Vec<TraceRecord>,
}

/// Reads every `*.jsonl` file of `dir` in file-name order. All traces must
/// share one schema version and one experiment kind.
pub fn load_traces(dir: &Path) -> Result<Vec<LoadedTrace>> {
    let entries = std::fs::read_dir(dir).map_err(|source| HarnessError::Input {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for e in entries {
        let e = e.map_err(|source| HarnessError::Input { path: dir.to_path_buf(), source })?;
        let p = e.path();
        if p.extension().is_some_and(|x| x == "jsonl") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(HarnessError::Trace {
            path: dir.to_path_buf(),
            msg: "no .jsonl trace files".into(),
        });
    }
    let mut out: Vec<LoadedTrace> = Vec::with_capacity(paths.len());
    for path in paths {
        let (header, rows) = read_trace(&path)?;
        if let Some(first) = out.first() {
            if header.kind != first.header.kind {
                return Err(HarnessError::Trace {
                    path,
                    msg: format!(
                        "mixes {} traces with {} traces from {}",
                        header.kind.as_str(),
                        first.header.kind.as_str(),
                        first.path.display()
                    ),
                });
            }
        }
        out.push(LoadedTrace { path, header, rows });
    }
    Ok(out)
}

/// Recomputes the bias/noise diagnostics from the logged signal column and
/// returns the largest absolute difference to the logged values.
pub fn replay_max_error(header: &TraceHeader, rows: &[TraceRecord]) -> errdiag::Result<f64> {
    let mut state = DiagnosticState::new(header.diag)?;
    let mut episode = None;
    let mut worst: f64 = 0.0;
    for r in rows {
        if header.diag_reset_per_episode && episode != Some(r.episode) {
            state = DiagnosticState::new(header.diag)?;
            episode = Some(r.episode);
        }
        match header.signal {
            SignalKind::Loss => state.observe_loss(r.signal)?,
            SignalKind::TdError => state.observe_increment(r.signal)?,
        }
        let snap = state.snapshot();
        for (logged, replayed) in [
            (r.b, snap.b),
            (r.nu, snap.nu),
            (r.sigma2, snap.sigma2),
            (r.rho_bias, snap.rho_bias),
            (r.rho_noise, snap.rho_noise),
        ] {
            let d = (logged - replayed).abs();
            // NaN must not hide behind max()
            worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
        }
    }
    Ok(worst)
}

/// Plottable numeric columns of a row, in output order.
fn columns(r: &TraceRecord) -> [(&'static str, Option<f64>); 20] {
    [
        ("signal", Some(r.signal)),
        ("b", Some(r.b)),
        ("nu", Some(r.nu)),
        ("sigma2", Some(r.sigma2)),
        ("s", Some(r.s)),
        ("rho_bias", Some(r.rho_bias)),
        ("rho_noise", Some(r.rho_noise)),
        ("update_norm", Some(r.update_norm)),
        ("true_loss", r.true_loss),
        ("kappa", r.kappa),
        ("delta_gate", r.delta_gate),
        ("alpha_eff", r.alpha_eff),
        ("update_parallel", r.update_parallel),
        ("critic_gate", r.critic_gate),
        ("policy_gate", r.policy_gate),
        ("beta_h", r.beta_h),
        ("reward", r.reward),
        ("alpha_meta_mean", r.alpha_meta_mean),
        ("alpha_meta_min", r.alpha_meta_min),
        ("alpha_meta_max", r.alpha_meta_max),
    ]
}

/// Writes `step, n, <col>_mean, <col>_std, ...` with one line per step that
/// occurs in any of `traces`. Standard deviations are population values.
pub fn write_aggregate(path: &Path, traces: &[&LoadedTrace]) -> Result<()> {
    let mut by_step: BTreeMap<u64, Vec<&TraceRecord>> = BTreeMap::new();
    for t in traces {
        for r in &t.rows {
            by_step.entry(r.step).or_default().push(r);
        }
    }
    let present: Vec<usize> = (0..20)
        .filter(|&i| traces.iter().flat_map(|t| &t.rows).any(|r| columns(r)[i].1.is_some()))
        .collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["step".to_string(), "n".to_string()];
    let names = columns(&TraceRecord::default());
    for &i in &present {
        head.push(format!("{}_mean", names[i].0));
        head.push(format!("{}_std", names[i].0));
    }
    w.write_record(&head)?;
    for (step, rows) in &by_step {
        let mut rec = vec![step.to_string(), rows.len().to_string()];
        let cols: Vec<_> = rows.iter().map(|r| columns(r)).collect();
        for &i in &present {
            let vals: Vec<f64> = cols.iter().filter_map(|c| c[i].1).collect();
            if vals.is_empty() {
                rec.extend([String::new(), String::new()]);
            } else {
                rec.push(mean(&vals).to_string());
                rec.push(std_dev(&vals).to_string());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(HarnessError::output(path))?;
    Ok(())
}

/// Per-episode mean entropy coefficient of every variant: mean and std over
/// seeds, and the number of seeds that reached the episode.
pub fn write_entropy_paired(path: &Path, variants: &[(String, Vec<&LoadedTrace>)]) -> Result<()> {
    // variant -> episode -> per-run episode means
    let mut table: Vec<BTreeMap<u64, Vec<f64>>> = Vec::new();
    for (_, traces) in variants {
        let mut eps: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for t in traces {
            let mut per_run: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for r in &t.rows {
                if let (Some(e), Some(beta)) = (r.episode, r.beta_h) {
                    per_run.entry(e).or_default().push(beta);
                }
            }
            for (e, betas) in per_run {
                eps.entry(e).or_default().push(mean(&betas));
            }
        }
        table.push(eps);
    }
    let mut episodes: Vec<u64> = table.iter().flat_map(|t| t.keys().copied()).collect();
    episodes.sort_unstable();
    episodes.dedup();
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["episode".to_string()];
    for (label, _) in variants {
        head.extend([format!("{label}_n"), format!("{label}_beta_mean"), format!("{label}_beta_std")]);
    }
    w.write_record(&head)?;
    for e in episodes {
        let mut rec = vec![e.to_string()];
        for eps in &table {
            match eps.get(&e) {
                Some(v) => rec.extend([v.len().to_string(), mean(v).to_string(), std_dev(v).to_string()]),
                None => rec.extend(["0".to_string(), String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(HarnessError::output(path))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub status: RunStatus,
    pub rows: usize,
    pub objective: f64,
    pub update_norm_variance: f64,
    pub overshoot_count: usize,
    pub oscillation_rate: f64,
    pub replay_max_error: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub kind: ExperimentKind,
    pub runs: Vec<RunSummary>,
    pub files: Vec<PathBuf>,
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

/// `report`: reads `trace_dir`, writes CSV summaries to `out_dir`. Fails with
/// a trace error after writing if any replay exceeds [`REPLAY_TOLERANCE`].
pub fn report(trace_dir: &Path, out_dir: &Path) -> Result<Report> {
    let traces = load_traces(trace_dir)?;
    let kind = traces[0].header.kind;
    std::fs::create_dir_all(out_dir).map_err(HarnessError::output(out_dir))?;

    let mut runs = Vec::with_capacity(traces.len());
    for t in &traces {
        let replay = replay_max_error(&t.header, &t.rows).map_err(|e| HarnessError::Trace {
            path: t.path.clone(),
            msg: format!("replay failed: {e}"),
        })?;
        let m = run_metrics(kind, &t.rows);
        runs.push(RunSummary {
            run_id: t.header.run_id.clone(),
            variant: t.header.variant.clone(),
            seed: t.header.seed,
            status: t.header.status,
            rows: t.rows.len(),
            objective: m.objective,
            update_norm_variance: m.update_norm_variance,
            overshoot_count: m.overshoot_count,
            oscillation_rate: m.oscillation_rate,
            replay_max_error: replay,
        });
    }

    let mut variants: Vec<(String, Vec<&LoadedTrace>)> = Vec::new();
    for t in &traces {
        match variants.iter_mut().find(|(v, _)| *v == t.header.variant) {
            Some((_, list)) => list.push(t),
            None => variants.push((t.header.variant.clone(), vec![t])),
        }
    }
    let mut files = Vec::new();
    let summary = out_dir.join(SUMMARY_CSV);
    write_csv(&summary, &runs)?;
    files.push(summary);
    for (label, list) in &variants {
        let path = out_dir.join(format!("aggregate_{}.csv", file_safe(label)));
        write_aggregate(&path, list)?;
        files.push(path);
    }
    if kind == ExperimentKind::Hedrl {
        let path = out_dir.join(ENTROPY_CSV);
        write_entropy_paired(&path, &variants)?;
        files.push(path);
    }

    if let Some((t, r)) = traces
        .iter()
        .zip(&runs)
        .find(|(_, r)| r.replay_max_error.is_nan() || r.replay_max_error > REPLAY_TOLERANCE)
    {
        return Err(HarnessError::Trace {
            path: t.path.clone(),
            msg: format!(
                "logged diagnostics differ from their replay by {:e} (tolerance {REPLAY_TOLERANCE:e})",
                r.replay_max_error
            ),
        });
    }
    Ok(Report { kind, runs, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::runner::{run_one, RunJob};

    #[test]
    fn replay_matches_each_learner_exactly() {
        for text in [
            "kind = \"hsao\"\nbudget = 200\n[hsao]\nloss_noise_std = 0.3\n",
            "kind = \"hedrl\"\nbudget = 20\n",
            "kind = \"mllp\"\nbudget = 2\n[mllp]\neval_tasks = 3\n[mllp.es]\npairs = 2\ntasks_per_iteration = 2\nvalidation_tasks = 2\nvalidate_every = 1\n",
        ] {
            let c = RunConfig::from_toml(text).unwrap();
            let out = run_one(&c, RunJob { seed: 1, baseline: false });
            assert!(!out.failed());
            assert_eq!(replay_max_error(&out.header, &out.rows).unwrap(), 0.0, "{text}");
        }
    }

    #[test]
    fn replay_detects_tampering() {
        let c = RunConfig::from_toml("kind = \"hsao\"\nbudget = 50\n").unwrap();
        let mut out = run_one(&c, RunJob { seed: 0, baseline: false });
        out.rows[20].signal += 1e-6;
        assert!(replay_max_error(&out.header, &out.rows).unwrap() > REPLAY_TOLERANCE);
    }

    #[test]
    fn missing_directory_is_an_input_error() {
        let err = load_traces(Path::new("/nonexistent/errdiag-traces")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
