//! Component ablations: the full method against one variant per removed
//! component, compared seed by seed.

use std::path::Path;

use errdiag::Ablation;
use serde::Serialize;

use crate::config::{ExperimentKind, RunConfig};
use crate::error::{HarnessError, Result};
use crate::experiment::{check_failures, write_outputs, Manifest};
use crate::metrics::{mean, median, ratio};
use crate::runner::{run_all, run_metrics, RunOutput};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_SUMMARY_CSV: &str = "ablation_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// `loss` or `return`, naming what `objective` holds.
    pub objective_kind: &'static str,
    pub objective: f64,
    pub update_norm_variance: f64,
    pub overshoot_count: usize,
    pub oscillation_rate: f64,
}

/// Means over seeds, and medians over seeds of the per-seed ratio
/// variant / full.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub n: usize,
    pub objective: f64,
    pub update_norm_variance: f64,
    pub overshoot_count: f64,
    pub oscillation_rate: f64,
    pub update_norm_variance_ratio: f64,
    pub overshoot_ratio: f64,
    pub oscillation_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, label: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == label)
    }
}

/// Masks to run: the config's own mask first, then that mask with each
/// remaining component removed as well.
pub fn variants(config: &RunConfig) -> Result<Vec<Ablation>> {
    let base = config.effective_ablation();
    let components: &[fn(&mut Ablation)] = match config.kind {
        ExperimentKind::Hsao => &[
            |a| a.bias_gate = true,
            |a| a.noise_gate = true,
            |a| a.alignment_correction = true,
        ],
        ExperimentKind::Hedrl => &[|a| a.bias_gate = true, |a| a.noise_gate = true],
        ExperimentKind::Mllp => {
            return Err(HarnessError::Config(
                "ablations apply to hsao and hedrl configs only".into(),
            ))
        }
    };
    let mut out = vec![base];
    for set in components {
        let mut v = base;
        set(&mut v);
        if v != base {
            out.push(v);
        }
    }
    Ok(out)
}

fn variant_config(config: &RunConfig, mask: Ablation) -> RunConfig {
    let mut c = config.clone();
    c.ablation = mask;
    c.hsao.optimizer.ablation = Ablation::NONE;
    c.hedrl.agent.ablation = Ablation::NONE;
    c.hedrl.with_baseline = false;
    c
}

/// Runs every variant for every seed without touching the disk.
pub fn run_variants(config: &RunConfig, jobs: usize) -> Result<(Vec<RunOutput>, AblationReport)> {
    let mut outputs = Vec::new();
    for mask in variants(config)? {
        outputs.extend(run_all(&variant_config(config, mask), jobs)?);
    }
    let report = summarize(config.kind, &outputs);
    Ok((outputs, report))
}

pub fn summarize(kind: ExperimentKind, outputs: &[RunOutput]) -> AblationReport {
    let rows: Vec<AblationRow> = outputs
        .iter()
        .map(|o| {
            let m = run_metrics(kind, &o.rows);
            AblationRow {
                variant: o.header.variant.clone(),
                seed: o.header.seed,
                objective_kind: if kind == ExperimentKind::Hedrl { "return" } else { "loss" },
                objective: m.objective,
                update_norm_variance: m.update_norm_variance,
                overshoot_count: m.overshoot_count,
                oscillation_rate: m.oscillation_rate,
            }
        })
        .collect();
    let mut labels: Vec<&str> = Vec::new();
    for r in &rows {
        if !labels.contains(&r.variant.as_str()) {
            labels.push(&r.variant);
        }
    }
    let reference = labels.first().copied().unwrap_or("full");
    let summary = labels
        .iter()
        .map(|&label| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == label).collect();
            let paired = |f: fn(&AblationRow) -> f64| {
                let ratios: Vec<f64> = mine
                    .iter()
                    .filter_map(|r| {
                        rows.iter()
                            .find(|b| b.variant == reference && b.seed == r.seed)
                            .map(|b| ratio(f(r), f(b)))
                    })
                    .collect();
                median(&ratios)
            };
            let avg = |f: fn(&AblationRow) -> f64| mean(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            VariantSummary {
                variant: label.to_string(),
                n: mine.len(),
                objective: avg(|r| r.objective),
                update_norm_variance: avg(|r| r.update_norm_variance),
                overshoot_count: avg(|r| r.overshoot_count as f64),
                oscillation_rate: avg(|r| r.oscillation_rate),
                update_norm_variance_ratio: paired(|r| r.update_norm_variance),
                overshoot_ratio: paired(|r| r.overshoot_count as f64),
                oscillation_ratio: paired(|r| r.oscillation_rate),
            }
        })
        .collect();
    AblationReport { rows, summary }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(HarnessError::output(path))?;
    Ok(())
}

/// `ablate`: traces for every variant, a manifest, and the two CSV tables.
pub fn ablate(config: &RunConfig, out_dir: &Path, jobs: usize) -> Result<(Manifest, AblationReport)> {
    let (outputs, report) = run_variants(config, jobs)?;
    let manifest = write_outputs(config, out_dir, &outputs)?;
    write_csv(&out_dir.join(ABLATION_CSV), &report.rows)?;
    write_csv(&out_dir.join(ABLATION_SUMMARY_CSV), &report.summary)?;
    check_failures(&manifest, &outputs)?;
    Ok((manifest, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_follow_the_base_mask() {
        let c = RunConfig::from_toml("kind = \"hsao\"\nbudget = 5\n").unwrap();
        let labels: Vec<String> = variants(&c).unwrap().iter().map(|a| a.label()).collect();
        assert_eq!(labels, ["full", "no_bias_gate", "no_noise_gate", "no_alignment"]);
        let c = RunConfig::from_toml("kind = \"hedrl\"\nbudget = 5\n[ablation]\nnoise_gate = true\n").unwrap();
        let labels: Vec<String> = variants(&c).unwrap().iter().map(|a| a.label()).collect();
        assert_eq!(labels, ["no_noise_gate", "no_bias_gate+no_noise_gate"]);
        let c = RunConfig::from_toml("kind = \"mllp\"\nbudget = 5\n").unwrap();
        assert_eq!(variants(&c).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn reference_variant_has_unit_ratios() {
        let c = RunConfig::from_toml("kind = \"hsao\"\nbudget = 120\nseeds = [0, 1]\n").unwrap();
        let (outs, report) = run_variants(&c, 1).unwrap();
        assert_eq!(outs.len(), 8);
        assert_eq!(report.rows.len(), 8);
        let full = report.variant("full").unwrap();
        assert_eq!(full.n, 2);
        assert_eq!(full.update_norm_variance_ratio, 1.0);
        assert_eq!(full.overshoot_ratio, 1.0);
        assert_eq!(full.oscillation_ratio, 1.0);
    }
}
