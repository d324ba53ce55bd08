//! Single runs and their fan-out over seeds.

use std::collections::BTreeMap;

use errdiag::envs::ChainEnv;
use errdiag::hedrl::{run_episode, Agent, AgentConfig};
use errdiag::hsao::{Hsao, HsaoConfig};
use errdiag::mllp::{adapt, adapt_sgd, meta_train, EsConfig, MetaOptimizer, TaskSpec};
use errdiag::rng::{mix, rng_from};
use errdiag::tasks::SupervisedTask;
use errdiag::trace::TRACE_SCHEMA_VERSION;
use errdiag::TraceRecord;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ExperimentKind, RunConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{mean, overshoot_count, sign_flip_rate, variance, OVERSHOOT_WINDOW};
use crate::trace_io::{RunStatus, SignalKind, TraceHeader, TRACE_SCHEMA};

/// One unit of work: a seed, and for actor-critic configs whether this is
/// the fixed-gate baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunJob {
    pub seed: u64,
    pub baseline: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub header: TraceHeader,
    pub rows: Vec<TraceRecord>,
    /// Finite summary numbers, recorded in the manifest.
    pub metrics: BTreeMap<String, f64>,
    /// Trained meta-optimizer in its text format (learned-optimizer runs).
    pub meta_optimizer: Option<String>,
    pub error: Option<errdiag::Error>,
}

impl RunOutput {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

pub fn jobs(config: &RunConfig) -> Vec<RunJob> {
    let with_baseline = config.kind == ExperimentKind::Hedrl && config.hedrl.with_baseline;
    config
        .seeds
        .iter()
        .flat_map(|&seed| {
            let base = with_baseline.then_some(RunJob { seed, baseline: true });
            std::iter::once(RunJob { seed, baseline: false }).chain(base)
        })
        .collect()
}

pub fn variant_label(config: &RunConfig, job: RunJob) -> String {
    if job.baseline || (config.kind == ExperimentKind::Hedrl && config.hedrl.agent.baseline_mode) {
        "baseline".to_string()
    } else {
        config.effective_ablation().label()
    }
}

pub fn run_id(config: &RunConfig, job: RunJob) -> String {
    format!("{}-{}-seed{}", config.kind.as_str(), variant_label(config, job), job.seed)
}

/// Per-run summary shared by ablations, reports and acceptance checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    /// Mean true loss (supervised), mean episode return (actor-critic) or
    /// mean post-adaptation loss (learned optimizer).
    pub objective: f64,
    pub update_norm_variance: f64,
    pub overshoot_count: usize,
    pub oscillation_rate: f64,
}

/// Per-episode undiscounted returns, in episode order.
pub fn episode_returns(rows: &[TraceRecord]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    let mut current = None;
    for r in rows {
        let r_ep = r.episode.unwrap_or(0);
        if current != Some(r_ep) {
            out.push(0.0);
            current = Some(r_ep);
        }
        *out.last_mut().expect("pushed above") += r.reward.unwrap_or(0.0);
    }
    out
}

pub fn run_metrics(kind: ExperimentKind, rows: &[TraceRecord]) -> RunMetrics {
    let norms: Vec<f64> = rows.iter().map(|r| r.update_norm).collect();
    let parallel: Vec<f64> = rows.iter().filter_map(|r| r.update_parallel).collect();
    let (objective, loss_curve) = match kind {
        ExperimentKind::Hedrl => {
            let rets = episode_returns(rows);
            (mean(&rets), rets.iter().map(|r| -r).collect::<Vec<_>>())
        }
        ExperimentKind::Hsao => {
            let l: Vec<f64> = rows.iter().filter_map(|r| r.true_loss).collect();
            (mean(&l), l)
        }
        ExperimentKind::Mllp => {
            let l: Vec<f64> = rows.iter().filter_map(|r| r.true_loss).collect();
            (mean(&l), l)
        }
    };
    RunMetrics {
        objective,
        update_norm_variance: variance(&norms),
        overshoot_count: overshoot_count(&loss_curve, OVERSHOOT_WINDOW),
        oscillation_rate: sign_flip_rate(&parallel),
    }
}

struct Partial {
    rows: Vec<TraceRecord>,
    metrics: BTreeMap<String, f64>,
    meta_optimizer: Option<String>,
}

impl Partial {
    fn metric(&mut self, key: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(key.to_string(), value);
        }
    }
}

/// Executes one run. Numeric failures stop the run and are reported in the
/// output together with every row produced before them.
pub fn run_one(config: &RunConfig, job: RunJob) -> RunOutput {
    let id = run_id(config, job);
    let mut part = Partial {
        rows: Vec::new(),
        metrics: BTreeMap::new(),
        meta_optimizer: None,
    };
    let (signal, diag, reset) = match config.kind {
        ExperimentKind::Hsao => (SignalKind::Loss, config.hsao.optimizer.diag, false),
        ExperimentKind::Hedrl => (SignalKind::TdError, config.hedrl.agent.diag, false),
        ExperimentKind::Mllp => (SignalKind::Loss, config.mllp.inner.diag, true),
    };
    let result = match config.kind {
        ExperimentKind::Hsao => run_hsao(config, job.seed, &mut part),
        ExperimentKind::Hedrl => run_hedrl(config, job, &mut part),
        ExperimentKind::Mllp => run_mllp(config, job.seed, &mut part),
    };
    for row in &mut part.rows {
        row.run_id.clone_from(&id);
        row.seed = job.seed;
    }
    let m = run_metrics(config.kind, &part.rows);
    part.metric("objective", m.objective);
    part.metric("update_norm_variance", m.update_norm_variance);
    part.metric("overshoot_count", m.overshoot_count as f64);
    part.metric("oscillation_rate", m.oscillation_rate);
    let error = result.err();
    if let Some(e) = &error {
        log::error!("{id}: {e}");
    }
    RunOutput {
        header: TraceHeader {
            schema: TRACE_SCHEMA.to_string(),
            version: TRACE_SCHEMA_VERSION,
            kind: config.kind,
            run_id: id,
            seed: job.seed,
            variant: variant_label(config, job),
            status: if error.is_some() { RunStatus::Failed } else { RunStatus::Complete },
            error: error.as_ref().map(|e| e.to_string()),
            rows: part.rows.len(),
            signal,
            diag,
            diag_reset_per_episode: reset,
        },
        rows: part.rows,
        metrics: part.metrics,
        meta_optimizer: part.meta_optimizer,
        error,
    }
}

fn run_hsao(config: &RunConfig, seed: u64, out: &mut Partial) -> errdiag::Result<()> {
    let s = &config.hsao;
    let task = SupervisedTask {
        seed: s.task.seed.wrapping_add(seed),
        ..s.task
    };
    let problem = task.build()?;
    let opt_cfg = HsaoConfig {
        ablation: config.effective_ablation(),
        ..s.optimizer
    };
    let mut opt = Hsao::new(opt_cfg, problem.dimension())?;
    let mut theta = problem.initial_params();
    let mut noise = rng_from(&[seed, 0x1055]);
    for t in 0..config.budget {
        let batch = problem.sample_batch(t, s.batch_size, seed)?;
        let (loss, grad) = problem.batch_loss_grad(&theta, t, &batch)?;
        let z: f64 = StandardNormal.sample(&mut noise);
        let step = opt.step(&mut theta, &grad, loss + s.loss_noise_std * z)?;
        let mut row = step.to_trace(&opt.state().m);
        row.true_loss = Some(problem.loss_oracle(&theta, t + 1)?);
        out.rows.push(row);
    }
    if let Some(last) = out.rows.last().and_then(|r| r.true_loss) {
        out.metric("final_true_loss", last);
    }
    Ok(())
}

fn run_hedrl(config: &RunConfig, job: RunJob, out: &mut Partial) -> errdiag::Result<()> {
    let s = &config.hedrl;
    let agent_cfg = AgentConfig {
        baseline_mode: s.agent.baseline_mode || job.baseline,
        ablation: config.effective_ablation(),
        ..s.agent
    };
    let mut env = ChainEnv::new(s.env, job.seed)?;
    let mut agent = Agent::new(agent_cfg, s.env.n_states, job.seed)?;
    let mut returns = Vec::new();
    for _ in 0..config.budget {
        let ep = run_episode(&mut agent, &mut env)?;
        returns.push(ep.ret);
        out.rows.extend(ep.rows);
    }
    let tail = &returns[returns.len().saturating_sub(50)..];
    out.metric("last50_mean_return", mean(tail));
    let betas: Vec<f64> = out.rows.iter().filter_map(|r| r.beta_h).collect();
    out.metric("mean_beta_h", mean(&betas));
    Ok(())
}

/// Held-out evaluation tasks of a learned-optimizer config.
pub fn eval_tasks(config: &RunConfig) -> errdiag::Result<Vec<TaskSpec>> {
    let m = &config.mllp;
    (0..m.eval_tasks as u64)
        .map(|j| m.tasks.sample(mix(&[m.eval_seed, j])))
        .collect()
}

fn run_mllp(config: &RunConfig, seed: u64, out: &mut Partial) -> errdiag::Result<()> {
    let m = &config.mllp;
    let mut init = rng_from(&[seed, 0x1417]);
    let initial = MetaOptimizer::new(&m.hidden, m.alpha_max, m.epsilon, &mut init)?;
    let es = EsConfig {
        iterations: config.budget as usize,
        seed,
        ..m.es
    };
    let trained = meta_train(&initial, &m.tasks, &m.inner, &es)?;
    out.metric("initial_validation_loss", trained.initial_validation_loss);
    out.metric("best_validation_loss", trained.best_validation_loss);
    let k = m.inner.steps as u64;
    let tasks = eval_tasks(config)?;
    let mut finals = Vec::with_capacity(tasks.len());
    for (j, task) in tasks.iter().enumerate() {
        let res = adapt(task, &trained.best, &m.inner)?;
        for mut row in res.rows {
            row.episode = Some(j as u64);
            row.step += j as u64 * k + 1;
            out.rows.push(row);
        }
        finals.push(res.final_loss);
    }
    out.metric("post_adaptation_loss", mean(&finals));
    let mut best_sgd = f64::INFINITY;
    for &lr in &m.sgd_rates {
        let losses = tasks
            .iter()
            .map(|t| adapt_sgd(t, lr, m.inner.steps))
            .collect::<errdiag::Result<Vec<f64>>>()?;
        let l = mean(&losses);
        out.metric(&format!("sgd_loss_lr{lr}"), l);
        if l < best_sgd {
            best_sgd = l;
        }
    }
    out.metric("sgd_best_loss", best_sgd);
    out.meta_optimizer = Some(trained.best.to_text());
    Ok(())
}

/// Runs every job of `config`, using up to `jobs` worker threads (0 picks the
/// number of cores). Outputs are in job order regardless of scheduling.
pub fn run_all(config: &RunConfig, jobs: usize) -> Result<Vec<RunOutput>> {
    let work = self::jobs(config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| HarnessError::Other(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        use rayon::prelude::*;
        work.par_iter().map(|&job| run_one(config, job)).collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_toml(text).unwrap()
    }

    #[test]
    fn hsao_rows_match_budget() {
        let out = run_one(&cfg("kind = \"hsao\"\nbudget = 25\n"), RunJob { seed: 3, baseline: false });
        assert!(!out.failed());
        assert_eq!(out.rows.len(), 25);
        assert_eq!(out.header.run_id, "hsao-full-seed3");
        assert!(out.rows.iter().all(|r| r.is_finite() && r.run_id == "hsao-full-seed3" && r.seed == 3));
        assert_eq!(out.rows[0].step, 1);
    }

    #[test]
    fn hedrl_fans_out_with_baseline() {
        let c = cfg("kind = \"hedrl\"\nbudget = 3\nseeds = [1, 2]\n");
        let j = jobs(&c);
        assert_eq!(j.len(), 4);
        assert_eq!(run_id(&c, j[1]), "hedrl-baseline-seed1");
        let outs = run_all(&c, 2).unwrap();
        let base = &outs[1];
        assert!(base.rows.iter().all(|r| r.beta_h == Some(0.01) && r.critic_gate == Some(1.0)));
    }

    #[test]
    fn returns_are_summed_per_episode() {
        let rows: Vec<TraceRecord> = [(0, -0.01), (0, 1.0), (1, -0.01), (1, -0.01), (1, 1.0)]
            .iter()
            .map(|&(e, r)| TraceRecord { episode: Some(e), reward: Some(r), ..Default::default() })
            .collect();
        assert_eq!(episode_returns(&rows), vec![0.99, 0.98]);
    }

    #[test]
    fn numeric_failure_keeps_partial_rows() {
        // alpha0 so large that the iterate overflows after a few steps
        let c = cfg("kind = \"hsao\"\nbudget = 5000\n[hsao.optimizer]\nalpha0 = 1e300\nc = 0.0\n[hsao.task]\nkind = \"ill_conditioned_valley\"\ncondition_number = 1e6\n");
        let out = run_one(&c, RunJob { seed: 0, baseline: false });
        assert!(out.failed());
        assert_eq!(out.header.status, RunStatus::Failed);
        assert!(out.rows.len() < 5000);
        assert_eq!(out.header.rows, out.rows.len());
    }
}
