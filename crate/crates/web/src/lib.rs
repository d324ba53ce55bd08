//! WebAssembly bindings for the demo page in `www/`. Every export returns a
//! flat `Float64Array` with a fixed number of columns per row, so the page
//! can plot without a serialization layer.

use errdiag::envs::{ChainConfig, ChainEnv};
use errdiag::hedrl::{run_episode, Agent, AgentConfig};
use errdiag::hsao::{gates, Hsao, HsaoConfig};
use errdiag::tasks::{SupervisedKind, SupervisedTask};
use errdiag::{Ablation, DiagnosticConfig, DiagnosticState};
use wasm_bindgen::prelude::*;

fn js_err(e: errdiag::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Columns per row of [`diagnose`].
pub const DIAGNOSE_COLS: usize = 6;

/// Feeds a loss series through the streaming diagnostics. Per step:
/// `b, nu, sigma2, rho_bias, rho_noise, kappa * delta` with gate
/// sensitivities `k_b` and `k_n`.
#[wasm_bindgen]
pub fn diagnose(losses: &[f64], k_b: f64, k_n: f64) -> Result<Vec<f64>, JsError> {
    diagnose_series(losses, k_b, k_n).map_err(js_err)
}

pub fn diagnose_series(losses: &[f64], k_b: f64, k_n: f64) -> errdiag::Result<Vec<f64>> {
    let mut state = DiagnosticState::new(DiagnosticConfig::default())?;
    let mut out = Vec::with_capacity(losses.len() * DIAGNOSE_COLS);
    for &l in losses {
        state.observe_loss(l)?;
        let snap = state.snapshot();
        let (kappa, delta) = gates(&snap, k_b, k_n);
        out.extend([snap.b, snap.nu, snap.sigma2, snap.rho_bias, snap.rho_noise, kappa * delta]);
    }
    Ok(out)
}

/// Columns per row of [`optimize`].
pub const OPTIMIZE_COLS: usize = 4;

/// Runs the gated optimizer on a synthetic task. `task` is 0 (drifting
/// quadratic), 1 (regime-shift regression) or 2 (ill-conditioned valley);
/// `mask` bits 0..3 remove the bias gate, noise gate and alignment
/// correction. Per step: `true loss, kappa, delta, effective rate`.
#[wasm_bindgen]
pub fn optimize(task: u8, steps: u32, alpha0: f64, noise_std: f64, mask: u8, seed: u32) -> Result<Vec<f64>, JsError> {
    optimize_run(task, steps, alpha0, noise_std, mask, u64::from(seed)).map_err(js_err)
}

pub fn optimize_run(task: u8, steps: u32, alpha0: f64, noise_std: f64, mask: u8, seed: u64) -> errdiag::Result<Vec<f64>> {
    let kind = match task {
        0 => SupervisedKind::DriftingQuadratic,
        1 => SupervisedKind::RegimeShiftRegression,
        _ => SupervisedKind::IllConditionedValley,
    };
    let problem = SupervisedTask {
        kind,
        noise_std,
        seed,
        ..SupervisedTask::default()
    }
    .build()?;
    let ablation = Ablation {
        bias_gate: mask & 1 != 0,
        noise_gate: mask & 2 != 0,
        alignment_correction: mask & 4 != 0,
    };
    let mut opt = Hsao::new(HsaoConfig { alpha0, ablation, ..HsaoConfig::default() }, problem.dimension())?;
    let mut theta = problem.initial_params();
    let mut out = Vec::with_capacity(steps as usize * OPTIMIZE_COLS);
    for t in 0..u64::from(steps) {
        let batch = problem.sample_batch(t, 8, seed)?;
        let (loss, g) = problem.batch_loss_grad(&theta, t, &batch)?;
        let s = opt.step(&mut theta, &g, loss)?;
        out.extend([problem.loss_oracle(&theta, t + 1)?, s.kappa, s.delta, s.alpha_eff]);
    }
    Ok(out)
}

/// Columns per row of [`chain`].
pub const CHAIN_COLS: usize = 3;

/// Trains the gated actor-critic and the fixed-gate baseline side by side on
/// the chain walk, with reward noise from episode `noise_from` on. Per
/// episode: `gated return, gated mean entropy weight, baseline return`.
#[wasm_bindgen]
pub fn chain(episodes: u32, reward_noise_std: f64, noise_from: u32, seed: u32) -> Result<Vec<f64>, JsError> {
    chain_run(episodes, reward_noise_std, noise_from, u64::from(seed)).map_err(js_err)
}

pub fn chain_run(episodes: u32, reward_noise_std: f64, noise_from: u32, seed: u64) -> errdiag::Result<Vec<f64>> {
    let env_cfg = ChainConfig {
        reward_noise_std,
        noise_from_episode: u64::from(noise_from),
        ..ChainConfig::default()
    };
    let mut learners = Vec::new();
    for baseline_mode in [false, true] {
        let cfg = AgentConfig { baseline_mode, ..AgentConfig::default() };
        learners.push((Agent::new(cfg, env_cfg.n_states, seed)?, ChainEnv::new(env_cfg, seed)?));
    }
    let mut out = Vec::with_capacity(episodes as usize * CHAIN_COLS);
    for _ in 0..episodes {
        let (agent, env) = &mut learners[0];
        let gated = run_episode(agent, env)?;
        let beta = gated.rows.iter().filter_map(|r| r.beta_h).sum::<f64>() / gated.rows.len() as f64;
        let (agent, env) = &mut learners[1];
        let base = run_episode(agent, env)?;
        out.extend([gated.ret, beta, base.ret]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagnose_shapes_and_constant_series() {
        let out = diagnose_series(&[1.0; 20], 2.0, 2.0).unwrap();
        assert_eq!(out.len(), 20 * DIAGNOSE_COLS);
        // a flat loss never moves the diagnostics, so both gates stay open
        assert!(out.chunks(DIAGNOSE_COLS).all(|r| r[..5] == [0.0; 5] && r[5] == 1.0));
    }

    #[test]
    fn drift_raises_bias_ratio() {
        let losses: Vec<f64> = (0..200).map(|t| 10.0 - 0.01 * t as f64).collect();
        let out = diagnose_series(&losses, 2.0, 2.0).unwrap();
        let last = &out[out.len() - DIAGNOSE_COLS..];
        assert!(last[3] > 0.9 && last[5] < 0.5, "{last:?}");
    }

    #[test]
    fn optimize_is_deterministic_and_learns() {
        let a = optimize_run(0, 300, 0.1, 0.0, 0, 3).unwrap();
        assert_eq!(a, optimize_run(0, 300, 0.1, 0.0, 0, 3).unwrap());
        assert_eq!(a.len(), 300 * OPTIMIZE_COLS);
        assert!(a[a.len() - OPTIMIZE_COLS] < a[0]);
        let ablated = optimize_run(0, 300, 0.1, 0.0, 0b11, 3).unwrap();
        assert!(ablated.chunks(OPTIMIZE_COLS).all(|r| r[1] == 1.0 && r[2] == 1.0));
    }

    #[test]
    fn chain_baseline_columns() {
        let out = chain_run(30, 0.0, 0, 1).unwrap();
        assert_eq!(out.len(), 30 * CHAIN_COLS);
        assert!(out.chunks(CHAIN_COLS).all(|r| r.iter().all(|x| x.is_finite()) && r[1] > 0.0));
    }
}
