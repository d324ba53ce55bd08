//! The acceptance suite: twelve checks with fixed seeds, tolerances and
//! runtime budgets, each producing a fingerprint of the numbers it computed.

use std::path::Path;
use std::time::{Duration, Instant};

use errdiag::envs::{Transition, NUM_ACTIONS};
use errdiag::hedrl::{entropy_coefficient, Agent, AgentConfig};
use errdiag::hsao::{base_lr, gates, Hsao, HsaoConfig};
use errdiag::mllp::{InnerConfig, InnerLoopState, MetaOptimizer, MetaTaskKind, TaskDistribution};
use errdiag::net::{fd_check, Activation, DenseNet, LossKind};
use errdiag::rng::rng_from;
use errdiag::tasks::SupervisedTask;
use errdiag::{DiagnosticConfig, DiagnosticSnapshot, DiagnosticState, TraceRecord};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::ablate::run_variants;
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{mean, median, spearman};
use crate::report::{replay_max_error, REPLAY_TOLERANCE};
use crate::runner::{run_all, RunOutput};
use crate::trace_io::{parse_jsonl, to_jsonl};

pub const HSAO_QUADRATIC: &str = include_str!("../../../configs/hsao_quadratic.toml");
pub const HSAO_NOISE_LEVELS: &str = include_str!("../../../configs/hsao_noise_levels.toml");
pub const HEDRL_NOISE: &str = include_str!("../../../configs/hedrl_noise.toml");
pub const HEDRL_FLIP: &str = include_str!("../../../configs/hedrl_flip.toml");
pub const ABLATE_NOISE: &str = include_str!("../../../configs/ablate_noise.toml");
pub const ABLATE_BIAS: &str = include_str!("../../../configs/ablate_bias.toml");
pub const ABLATE_ALIGNMENT: &str = include_str!("../../../configs/ablate_alignment.toml");
pub const MLLP: &str = include_str!("../../../configs/mllp.toml");

/// Loss-noise standard deviations of the noise-gate sweep.
pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.1, 0.3, 1.0, 3.0];

/// First step at which plain Adam (rate 0.1, moments 0.9/0.999, eps 1e-8)
/// brings the stationary quadratic of `hsao_quadratic.toml` below 1e-6, per
/// seed. Recorded once and re-verified on every run.
pub const ADAM_ORACLE_STEPS: [u64; 5] = [141, 129, 141, 143, 140];

/// Best mean held-out loss of the fixed-rate SGD grid in `mllp.toml`.
/// Recorded once and re-verified on every run.
pub const SGD_ORACLE_BEST: f64 = 0.2544419803813661;

const CONVERGENCE_TOL: f64 = 1e-6;

/// SHA-256 over the bit patterns of every number a check computed.
#[derive(Default)]
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn f(&mut self, x: f64) {
        self.0.update(x.to_bits().to_le_bytes());
    }

    pub fn fs(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.f(x));
    }

    pub fn u(&mut self, x: u64) {
        self.0.update(x.to_le_bytes());
    }

    pub fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Check {
    passed: bool,
    detail: String,
    fp: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    /// The property held (runtime not considered).
    pub held: bool,
    pub detail: String,
    pub fingerprint: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.held && self.elapsed <= self.budget
    }
}

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Result<Check>,
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

const CRITERIA: [Criterion; 11] = [
    Criterion { id: 1, name: "step size stays within [0, alpha0]", budget: secs(10), run: step_size_bound },
    Criterion { id: 2, name: "gates in (0, 1], entropy weight positive", budget: secs(10), run: gate_ranges },
    Criterion { id: 3, name: "analytic gradients match finite differences", budget: secs(30), run: gradient_oracle },
    Criterion { id: 4, name: "reduces to Adam with log decay", budget: secs(5), run: adam_reduction },
    Criterion { id: 5, name: "converges on the stationary quadratic", budget: secs(10), run: convergence },
    Criterion { id: 6, name: "noise gate falls with loss noise", budget: secs(60), run: noise_gate_monotone },
    Criterion { id: 7, name: "entropy weight drops under reward noise", budget: secs(180), run: entropy_under_noise },
    Criterion { id: 8, name: "bias ratio rises after the goal flip", budget: secs(180), run: bias_after_flip },
    Criterion { id: 9, name: "each component earns its keep", budget: secs(300), run: ablations },
    Criterion { id: 10, name: "learned updates respect the norm bound", budget: secs(30), run: learned_bound },
    Criterion { id: 11, name: "learned optimizer beats tuned SGD", budget: secs(600), run: learned_usefulness },
];

fn run_criterion(c: &Criterion) -> Outcome {
    let start = Instant::now();
    let result = (c.run)();
    let elapsed = start.elapsed();
    let (held, detail, fingerprint) = match result {
        Ok(check) => (check.passed, check.detail, check.fp.finish()),
        Err(e) => (false, format!("error: {e}"), String::new()),
    };
    Outcome { id: c.id, name: c.name, held, detail, fingerprint, elapsed, budget: c.budget }
}

/// Runs the whole suite, calling `progress` after each criterion.
pub fn run_suite(mut progress: impl FnMut(&Outcome)) -> Vec<Outcome> {
    let mut out: Vec<Outcome> = Vec::new();
    for c in &CRITERIA {
        let o = run_criterion(c);
        progress(&o);
        out.push(o);
    }
    let start = Instant::now();
    let mut mismatched = Vec::new();
    for (c, first) in CRITERIA.iter().zip(&out) {
        let again = run_criterion(c);
        if again.fingerprint != first.fingerprint || again.fingerprint.is_empty() {
            mismatched.push(c.id.to_string());
        }
    }
    let mut fp = Fingerprint::default();
    for o in &out {
        fp.0.update(o.fingerprint.as_bytes());
    }
    let det = Outcome {
        id: 12,
        name: "criteria 1-11 rerun bitwise-identically",
        held: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            "all 11 fingerprints reproduced".into()
        } else {
            format!("fingerprints differ for {}", mismatched.join(", "))
        },
        fingerprint: fp.finish(),
        elapsed: start.elapsed(),
        budget: CRITERIA.iter().map(|c| c.budget).sum(),
    };
    progress(&det);
    out.push(det);
    out
}

pub fn format_outcome(o: &Outcome) -> String {
    let verdict = match (o.held, o.passed()) {
        (_, true) => "PASS",
        (true, false) => "FAIL (over time budget)",
        _ => "FAIL",
    };
    format!(
        "[{verdict}] {:>2}. {} ({:.1}s / {}s): {}",
        o.id,
        o.name,
        o.elapsed.as_secs_f64(),
        o.budget.as_secs(),
        o.detail
    )
}

fn config(text: &str) -> Result<RunConfig> {
    RunConfig::from_toml(text)
}

fn completed(outputs: Vec<RunOutput>) -> Result<Vec<RunOutput>> {
    if let Some(o) = outputs.iter().find(|o| o.failed()) {
        return Err(HarnessError::Other(format!(
            "run {} failed: {}",
            o.header.run_id,
            o.header.error.as_deref().unwrap_or("unknown error")
        )));
    }
    Ok(outputs)
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo..hi))
}

/// Diagnostic state with magnitudes spread over many decades, and exact
/// zeros mixed in.
fn random_snapshot(rng: &mut impl Rng) -> DiagnosticSnapshot {
    let mut state = DiagnosticState::new(DiagnosticConfig::default()).expect("default diagnostics");
    let mut mag = |lo: f64, hi: f64| if rng.random_bool(0.1) { 0.0 } else { log_uniform(rng, lo, hi) };
    state.b = mag(-12.0, 6.0);
    state.nu = mag(-12.0, 6.0);
    state.sigma2 = mag(-24.0, 12.0);
    if rng.random_bool(0.5) {
        state.b = -state.b;
    }
    state.s = rng.random_range(-1.0..=1.0);
    state.snapshot()
}

fn step_size_bound() -> Result<Check> {
    let mut rng = rng_from(&[0xacc, 1]);
    let mut fp = Fingerprint::default();
    let mut violations = 0usize;
    let n = 100_000;
    for i in 0..n {
        let snap = random_snapshot(&mut rng);
        let t: u64 = match i {
            0 => 0,
            1 => 1_000_000,
            _ => rng.random_range(0..=1_000_000),
        };
        let alpha0 = log_uniform(&mut rng, -6.0, 1.0);
        let c = rng.random_range(0.0..5.0);
        let (k_b, k_n) = (log_uniform(&mut rng, -2.0, 2.0), log_uniform(&mut rng, -2.0, 2.0));
        let (kappa, delta) = gates(&snap, k_b, k_n);
        let alpha_h = base_lr(t, alpha0, c) * kappa * delta;
        if !(0.0 <= alpha_h && alpha_h <= alpha0) {
            violations += 1;
        }
        fp.f(alpha_h);
    }
    Ok(Check {
        passed: violations == 0,
        detail: format!("{violations} violations in {n} draws"),
        fp,
    })
}

fn gate_ranges() -> Result<Check> {
    let mut rng = rng_from(&[0xacc, 2]);
    let mut fp = Fingerprint::default();
    let in_unit = |g: f64| g > 0.0 && g <= 1.0;
    let (mut bad_gates, mut bad_beta) = (0usize, 0usize);
    let n = 100_000;
    let n_states = 7;
    let mut agent = None;
    for i in 0..n {
        let cfg = AgentConfig {
            k_b: log_uniform(&mut rng, -2.0, 2.0),
            k_n: log_uniform(&mut rng, -2.0, 2.0),
            beta0: log_uniform(&mut rng, -4.0, 0.0),
            lambda_b: log_uniform(&mut rng, -2.0, 2.0),
            lambda_n: log_uniform(&mut rng, -2.0, 2.0),
            ..AgentConfig::default()
        };
        if i % 1000 == 0 {
            agent = Some(Agent::new(cfg, n_states, i)?);
        }
        let a = agent.as_mut().expect("created above");
        let snap = random_snapshot(&mut rng);
        let (kappa, delta) = gates(&snap, cfg.k_b, cfg.k_n);
        let trans = Transition {
            s: rng.random_range(0..n_states),
            a: rng.random_range(0..NUM_ACTIONS),
            r: rng.random_range(-1.0..1.0),
            s_next: rng.random_range(0..n_states),
            done: rng.random_bool(0.1),
        };
        let td = rng.random_range(-1.0..1.0);
        let beta = entropy_coefficient(&snap, &cfg);
        let critic = a.critic_update(&trans, td, &snap)?;
        let policy = a.policy_update(&trans, td, &snap, beta)?.gate;
        if ![kappa, delta, critic, policy].into_iter().all(in_unit) {
            bad_gates += 1;
        }
        if beta.is_nan() || beta <= 0.0 {
            bad_beta += 1;
        }
        fp.fs(&[kappa, delta, critic, policy, beta]);
    }
    Ok(Check {
        passed: bad_gates == 0 && bad_beta == 0,
        detail: format!("{bad_gates} gate and {bad_beta} entropy-weight violations in {n} draws"),
        fp,
    })
}

fn gradient_oracle() -> Result<Check> {
    let mut rng = rng_from(&[0xacc, 3]);
    let mut fp = Fingerprint::default();
    let smooth = [Activation::Identity, Activation::Tanh, Activation::Softplus, Activation::Sigmoid];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=5)];
        for _ in 1..depth {
            dims.push(rng.random_range(1..=6));
        }
        dims.push(rng.random_range(1..=3));
        let logistic = rng.random_bool(0.5);
        let mut acts: Vec<Activation> = (0..depth).map(|_| smooth[rng.random_range(0..smooth.len())]).collect();
        if logistic {
            acts[depth - 1] = Activation::Identity;
        }
        let net = DenseNet::new(&dims, &acts, &mut rng)?;
        let batch = rng.random_range(1..=4);
        let inputs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..dims[0]).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let out = dims[depth];
        let targets: Vec<Vec<f64>> = (0..batch)
            .map(|_| {
                (0..out)
                    .map(|_| if logistic { f64::from(u8::from(rng.random_bool(0.5))) } else { StandardNormal.sample(&mut rng) })
                    .collect()
            })
            .collect();
        let kind = if logistic { LossKind::Logistic } else { LossKind::Mse };
        let err = fd_check(&net, &inputs, &targets, kind, 1e-6)?;
        fp.f(err);
        worst = worst.max(err);
    }
    Ok(Check {
        passed: worst < 1e-5,
        detail: format!("max relative error {worst:.2e} over 100 networks (limit 1e-5)"),
        fp,
    })
}

fn adam_reduction() -> Result<Check> {
    let mut rng = rng_from(&[0xacc, 4]);
    let mut fp = Fingerprint::default();
    let d = 10;
    let h: Vec<f64> = (0..d).map(|_| log_uniform(&mut rng, -1.0, 1.0)).collect();
    let opt: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let grad = |x: &[f64]| -> Vec<f64> { x.iter().zip(&opt).zip(&h).map(|((xi, oi), hi)| hi * (xi - oi)).collect() };
    let cfg = HsaoConfig { alpha0: 0.05, tau: 0.0, ..HsaoConfig::default() };
    let mut hsao = Hsao::new(cfg, d)?;
    let mut theta: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();

    // independent Adam-style recursion: first moment unused in the step,
    // second moment bias-corrected, base rate alpha0 / (1 + c ln(1 + t))
    let mut x = theta.clone();
    let mut v = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for t in 1..=1000u64 {
        let g = grad(&theta);
        // a constant loss keeps every diagnostic at zero
        hsao.step(&mut theta, &g, 1.0)?;

        let gx = grad(&x);
        let lr = cfg.alpha0 / (1.0 + cfg.c * ((1 + t) as f64).ln());
        let correction = 1.0 - cfg.eta.powf(t as f64);
        for i in 0..d {
            v[i] = cfg.eta * v[i] + (1.0 - cfg.eta) * gx[i] * gx[i];
            x[i] -= lr * gx[i] / ((v[i] / correction).sqrt() + cfg.epsilon);
        }
        for (a, b) in theta.iter().zip(&x) {
            worst = worst.max((a - b).abs());
        }
        fp.fs(&theta);
    }
    Ok(Check {
        passed: worst <= 1e-10,
        detail: format!("max per-step deviation {worst:.2e} over 1000 steps (limit 1e-10)"),
        fp,
    })
}

fn first_below(rows: &[TraceRecord], tol: f64) -> Option<u64> {
    rows.iter().find(|r| r.true_loss.is_some_and(|l| l < tol)).map(|r| r.step)
}

/// Plain Adam on the same problems, batches and seeds as the HSAO runs.
pub fn adam_first_hits(cfg: &RunConfig) -> Result<Vec<Option<u64>>> {
    let s = &cfg.hsao;
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut hits = Vec::new();
    for &seed in &cfg.seeds {
        let problem = SupervisedTask { seed: s.task.seed.wrapping_add(seed), ..s.task }.build()?;
        let mut theta = problem.initial_params();
        let d = theta.len();
        let (mut m, mut v) = (vec![0.0; d], vec![0.0; d]);
        let mut hit = None;
        for t in 0..cfg.budget {
            let batch = problem.sample_batch(t, s.batch_size, seed)?;
            let (_, g) = problem.batch_loss_grad(&theta, t, &batch)?;
            let k = (t + 1) as i32;
            for i in 0..d {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(k));
                let vh = v[i] / (1.0 - b2.powi(k));
                theta[i] -= lr * mh / (vh.sqrt() + eps);
            }
            if problem.loss_oracle(&theta, t + 1)? < CONVERGENCE_TOL {
                hit = Some(t + 1);
                break;
            }
        }
        hits.push(hit);
    }
    Ok(hits)
}

fn convergence() -> Result<Check> {
    let cfg = config(HSAO_QUADRATIC)?;
    let mut fp = Fingerprint::default();
    let outs = completed(run_all(&cfg, 0)?)?;
    let hsao: Vec<Option<u64>> = outs.iter().map(|o| first_below(&o.rows, CONVERGENCE_TOL)).collect();
    let adam = adam_first_hits(&cfg)?;
    for h in hsao.iter().chain(&adam) {
        fp.u(h.unwrap_or(u64::MAX));
    }
    let pinned: Vec<Option<u64>> = ADAM_ORACLE_STEPS.iter().map(|&s| Some(s)).collect();
    let all_hit = hsao.iter().all(|h| h.is_some_and(|s| s <= cfg.budget));
    let fmt = |v: &[Option<u64>]| {
        v.iter()
            .map(|h| h.map_or("-".to_string(), |s| s.to_string()))
            .collect::<Vec<_>>()
            .join(",")
    };
    Ok(Check {
        passed: all_hit && adam == pinned,
        detail: format!(
            "steps to loss < 1e-6: hsao [{}], adam [{}] (recorded [{}]), budget {}",
            fmt(&hsao),
            fmt(&adam),
            fmt(&pinned),
            cfg.budget
        ),
        fp,
    })
}

fn noise_gate_monotone() -> Result<Check> {
    let base = config(HSAO_NOISE_LEVELS)?;
    let mut fp = Fingerprint::default();
    // per level, per seed: mean noise gate after the first 100 steps
    let mut gate = Vec::new();
    for &level in &NOISE_LEVELS {
        let mut cfg = base.clone();
        cfg.hsao.loss_noise_std = level;
        let outs = completed(run_all(&cfg, 0)?)?;
        let means: Vec<f64> = outs
            .iter()
            .map(|o| mean(&o.rows[100.min(o.rows.len())..].iter().filter_map(|r| r.delta_gate).collect::<Vec<_>>()))
            .collect();
        fp.fs(&means);
        gate.push(means);
    }
    let rhos: Vec<f64> = (0..base.seeds.len())
        .map(|j| spearman(&NOISE_LEVELS, &gate.iter().map(|g| g[j]).collect::<Vec<_>>()))
        .collect();
    fp.fs(&rhos);
    let med = median(&rhos);
    Ok(Check {
        passed: med <= -0.9,
        detail: format!("median Spearman {med:.3} (limit -0.9), per seed {rhos:.3?}"),
        fp,
    })
}

fn window_mean(rows: &[TraceRecord], lo: u64, hi: u64, f: fn(&TraceRecord) -> Option<f64>) -> f64 {
    let xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.episode.is_some_and(|e| lo <= e && e < hi))
        .filter_map(f)
        .collect();
    mean(&xs)
}

fn entropy_under_noise() -> Result<Check> {
    let cfg = config(HEDRL_NOISE)?;
    let mut fp = Fingerprint::default();
    let outs = completed(run_all(&cfg, 0)?)?;
    let beta0 = cfg.hedrl.agent.beta0;
    let mut diffs = Vec::new();
    let mut baseline_constant = true;
    for o in &outs {
        if o.header.variant == "baseline" {
            baseline_constant &= !o.rows.is_empty() && o.rows.iter().all(|r| r.beta_h == Some(beta0));
            continue;
        }
        let early = window_mean(&o.rows, 100, 250, |r| r.beta_h);
        let late = window_mean(&o.rows, 350, 500, |r| r.beta_h);
        fp.fs(&[early, late]);
        diffs.push(late - early);
    }
    let med = median(&diffs);
    Ok(Check {
        passed: med < 0.0 && baseline_constant,
        detail: format!(
            "median late-minus-early entropy weight {med:.3e}; baseline constant at {beta0}: {baseline_constant}"
        ),
        fp,
    })
}

fn bias_after_flip() -> Result<Check> {
    let cfg = config(HEDRL_FLIP)?;
    let flip = cfg
        .hedrl
        .env
        .flip_episode
        .ok_or_else(|| HarnessError::Config("hedrl_flip.toml must set hedrl.env.flip_episode".into()))?;
    let mut fp = Fingerprint::default();
    let outs = completed(run_all(&cfg, 0)?)?;
    let mut diffs = Vec::new();
    let mut replay: f64 = 0.0;
    for o in &outs {
        let f = o
            .rows
            .iter()
            .position(|r| r.episode.is_some_and(|e| e >= flip))
            .ok_or_else(|| HarnessError::Other(format!("{} never reached the flip", o.header.run_id)))?;
        if f < 100 || o.rows.len() < f + 100 {
            return Err(HarnessError::Other(format!("{} has fewer than 100 transitions around the flip", o.header.run_id)));
        }
        let rho = |rows: &[TraceRecord]| mean(&rows.iter().map(|r| r.rho_bias).collect::<Vec<_>>());
        let (pre, post) = (rho(&o.rows[f - 100..f]), rho(&o.rows[f..f + 100]));
        fp.fs(&[pre, post]);
        diffs.push(post - pre);

        let text = to_jsonl(&o.header, &o.rows);
        let (header, rows) = parse_jsonl(&text, Path::new(&o.header.run_id))?;
        let err = replay_max_error(&header, &rows)?;
        fp.f(err);
        replay = replay.max(err);
    }
    let med = median(&diffs);
    Ok(Check {
        passed: med > 0.0 && replay <= REPLAY_TOLERANCE,
        detail: format!("median post-minus-pre bias ratio {med:.3e}; replay error {replay:.1e} (limit 1e-10)"),
        fp,
    })
}

fn ablations() -> Result<Check> {
    let mut fp = Fingerprint::default();
    let mut parts = Vec::new();
    let mut passed = true;
    for (text, variant, metric) in [
        (ABLATE_NOISE, "no_noise_gate", "update-norm variance"),
        (ABLATE_BIAS, "no_bias_gate", "overshoot count"),
        (ABLATE_ALIGNMENT, "no_alignment", "oscillation rate"),
    ] {
        let cfg = config(text)?;
        let (outs, report) = run_variants(&cfg, 0)?;
        completed(outs)?;
        let v = report
            .variant(variant)
            .ok_or_else(|| HarnessError::Other(format!("variant {variant} missing")))?;
        let r = match variant {
            "no_noise_gate" => v.update_norm_variance_ratio,
            "no_bias_gate" => v.overshoot_ratio,
            _ => v.oscillation_ratio,
        };
        for row in &report.rows {
            fp.fs(&[row.objective, row.update_norm_variance, row.overshoot_count as f64, row.oscillation_rate]);
        }
        passed &= r > 1.0;
        parts.push(format!("{metric} x{r:.2} without {}", variant.trim_start_matches("no_")));
    }
    Ok(Check {
        passed,
        detail: format!("median ratios: {}", parts.join("; ")),
        fp,
    })
}

fn learned_bound() -> Result<Check> {
    let mut fp = Fingerprint::default();
    let (mut violations, mut updates) = (0usize, 0usize);
    let draws = 1000u64;
    for draw in 0..draws {
        let mut rng = rng_from(&[0xacc, 10, draw]);
        let alpha_max = log_uniform(&mut rng, -2.0, 0.5);
        let meta = MetaOptimizer::new(&[16, 16], alpha_max, 1e-8, &mut rng)?;
        let scale = log_uniform(&mut rng, -1.0, 1.0);
        let meta = meta.with_params(&meta.params().iter().map(|p| p * scale).collect::<Vec<_>>())?;
        let dist = TaskDistribution {
            kind: if draw % 2 == 0 { MetaTaskKind::NoisyQuadratic } else { MetaTaskKind::Regression },
            ..TaskDistribution::default()
        };
        let task = dist.sample(rng.random())?;
        let inner = InnerConfig::default();
        let mut state = InnerLoopState::new(task.initial_params(), inner)?;
        for t in 0..inner.steps {
            let (loss, g) = task.sample(&state.theta, t)?;
            let upd = state.step(&g, loss, &meta)?;
            updates += 1;
            if !upd.satisfies_bound(alpha_max) {
                violations += 1;
            }
            fp.fs(&upd.delta);
        }
    }
    Ok(Check {
        passed: violations == 0,
        detail: format!("{violations} violations in {updates} inner updates from {draws} meta-parameter draws"),
        fp,
    })
}

fn learned_usefulness() -> Result<Check> {
    let cfg = config(MLLP)?;
    let mut fp = Fingerprint::default();
    let outs = completed(run_all(&cfg, 0)?)?;
    let metric = |o: &RunOutput, k: &str| {
        o.metrics
            .get(k)
            .copied()
            .ok_or_else(|| HarnessError::Other(format!("{} lacks {k}", o.header.run_id)))
    };
    let mut wins = 0;
    let mut losses = Vec::new();
    let sgd = metric(&outs[0], "sgd_best_loss")?;
    for o in &outs {
        let l = metric(o, "post_adaptation_loss")?;
        if metric(o, "sgd_best_loss")? != sgd {
            return Err(HarnessError::Other("SGD baseline differs between seeds".into()));
        }
        fp.f(l);
        losses.push(l);
        if l <= 0.9 * SGD_ORACLE_BEST {
            wins += 1;
        }
    }
    fp.f(sgd);
    // the recomputed grid must reproduce the recorded baseline
    let oracle_ok = (sgd - SGD_ORACLE_BEST).abs() <= 1e-9 * SGD_ORACLE_BEST;
    Ok(Check {
        passed: wins >= 4 && oracle_ok,
        detail: format!(
            "{wins}/{} seeds at least 10% below best SGD {SGD_ORACLE_BEST:.4} (recomputed {sgd:.4}); learned {losses:.4?}",
            outs.len()
        ),
        fp,
    })
}
