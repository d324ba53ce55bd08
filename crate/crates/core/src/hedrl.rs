//! Actor-critic with TD-error diagnostics.
//!
//! Per transition: TD error, diagnostics on the TD error, noise-gated critic
//! step, adaptive entropy weight, bias-gated policy step. The advantage is
//! the one-step TD error. With `baseline_mode` both gates are pinned to one
//! and the entropy weight to `beta0`; diagnostics are still tracked so the
//! two agents can be traced side by side.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diag::{DiagnosticConfig, DiagnosticSnapshot, DiagnosticState};
use crate::envs::{ChainEnv, Transition, NUM_ACTIONS};
use crate::error::{ensure_finite, Error, Result};
use crate::hsao::gate;
use crate::net::{Activation, DenseNet};
use crate::norm;
use crate::rng::{rng_from, Rng};
use crate::trace::{Ablation, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum HeadKind {
    /// One logit per (state, action) and one value per state.
    Tabular,
    /// One-hot state into a `hidden`-wide tanh layer.
    Dense { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma_discount: f64,
    pub alpha_v: f64,
    pub alpha_pi: f64,
    pub k_b: f64,
    pub k_n: f64,
    pub beta0: f64,
    pub lambda_b: f64,
    pub lambda_n: f64,
    pub diag: DiagnosticConfig,
    pub baseline_mode: bool,
    pub head: HeadKind,
    pub ablation: Ablation,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma_discount: 0.95,
            alpha_v: 0.1,
            alpha_pi: 0.1,
            k_b: 2.0,
            k_n: 2.0,
            beta0: 0.01,
            lambda_b: 1.0,
            lambda_n: 1.0,
            diag: DiagnosticConfig::default(),
            baseline_mode: false,
            head: HeadKind::Tabular,
            ablation: Ablation::NONE,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let checks = [
            (self.gamma_discount > 0.0 && self.gamma_discount < 1.0, "gamma_discount must lie in (0, 1)"),
            (pos(self.alpha_v), "alpha_v must be positive"),
            (pos(self.alpha_pi), "alpha_pi must be positive"),
            (pos(self.k_b), "k_b must be positive"),
            (pos(self.k_n), "k_n must be positive"),
            (pos(self.beta0), "beta0 must be positive"),
            (self.lambda_b >= 0.0 && self.lambda_b.is_finite(), "lambda_b must be nonnegative"),
            (self.lambda_n >= 0.0 && self.lambda_n.is_finite(), "lambda_n must be nonnegative"),
            (!matches!(self.head, HeadKind::Dense { hidden: 0 }), "dense head needs a hidden layer"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(format!("agent: {msg}")));
            }
        }
        self.diag.validate()
    }
}

/// `r + gamma V(s') (1 - done) - V(s)`.
pub fn td_error(r: f64, v_s: f64, v_s_next: f64, done: bool, gamma_discount: f64) -> f64 {
    let bootstrap = if done { 0.0 } else { gamma_discount * v_s_next };
    r + bootstrap - v_s
}

/// `beta0 (1 + lambda_b rho_bias) / (1 + lambda_n rho_noise)`, or `beta0` in
/// baseline mode.
pub fn entropy_coefficient(snap: &DiagnosticSnapshot, config: &AgentConfig) -> f64 {
    if config.baseline_mode {
        return config.beta0;
    }
    config.beta0 * (1.0 + config.lambda_b * snap.rho_bias) / (1.0 + config.lambda_n * snap.rho_noise)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
}

/// Gradient of the softmax entropy with respect to the logits:
/// `-p_k (ln p_k + H)`.
pub fn entropy_grad(p: &[f64]) -> Vec<f64> {
    let h = entropy(p);
    p.iter()
        .map(|&q| if q > 0.0 { -q * (q.ln() + h) } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Policy {
    Tabular(Vec<[f64; NUM_ACTIONS]>),
    Dense(DenseNet),
}

#[derive(Debug, Clone, PartialEq)]
enum Critic {
    Tabular(Vec<f64>),
    Dense(DenseNet),
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    x[i] = 1.0;
    x
}

/// Outcome of one policy update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStep {
    pub gate: f64,
    /// Norm of the advantage part of the parameter change.
    pub advantage_step_norm: f64,
    /// Norm of the gradient of `log pi(a|s)` with respect to the parameters.
    pub grad_log_pi_norm: f64,
    /// Norm of the whole parameter change, entropy part included.
    pub total_step_norm: f64,
}

/// Everything computed for one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    pub td_error: f64,
    pub snapshot: DiagnosticSnapshot,
    pub critic_gate: f64,
    pub beta_h: f64,
    pub policy: PolicyStep,
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    n_states: usize,
    policy: Policy,
    critic: Critic,
    td_diag: DiagnosticState,
    pub episode: u64,
    pub step: u64,
    rng: Rng,
}

impl Agent {
    pub fn new(config: AgentConfig, n_states: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_states == 0 {
            return Err(Error::config("agent needs at least one state"));
        }
        let (policy, critic) = match config.head {
            HeadKind::Tabular => (
                Policy::Tabular(vec![[0.0; NUM_ACTIONS]; n_states]),
                Critic::Tabular(vec![0.0; n_states]),
            ),
            HeadKind::Dense { hidden } => {
                let mut init = rng_from(&[seed, 0x1e4d]);
                let acts = [Activation::Tanh, Activation::Identity];
                (
                    Policy::Dense(DenseNet::new(&[n_states, hidden, NUM_ACTIONS], &acts, &mut init)?),
                    Critic::Dense(DenseNet::new(&[n_states, hidden, 1], &acts, &mut init)?),
                )
            }
        };
        Ok(Self {
            td_diag: DiagnosticState::new(config.diag)?,
            config,
            n_states,
            policy,
            critic,
            episode: 0,
            step: 0,
            rng: rng_from(&[seed, 0xac7]),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn diagnostics(&self) -> &DiagnosticState {
        &self.td_diag
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(Error::InvalidState(s))
        }
    }

    pub fn value(&self, s: usize) -> Result<f64> {
        self.check_state(s)?;
        Ok(match &self.critic {
            Critic::Tabular(v) => v[s],
            Critic::Dense(net) => net.forward(&one_hot(self.n_states, s))?[0],
        })
    }

    fn logits(&self, s: usize) -> Result<Vec<f64>> {
        self.check_state(s)?;
        Ok(match &self.policy {
            Policy::Tabular(t) => t[s].to_vec(),
            Policy::Dense(net) => net.forward(&one_hot(self.n_states, s))?,
        })
    }

    pub fn probs(&self, s: usize) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(s)?))
    }

    pub fn act(&mut self, s: usize) -> Result<usize> {
        let p = self.probs(s)?;
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (a, q) in p.iter().enumerate() {
            acc += q;
            if u < acc {
                return Ok(a);
            }
        }
        Ok(p.len() - 1)
    }

    fn critic_gate(&self, snap: &DiagnosticSnapshot) -> f64 {
        if self.config.baseline_mode || self.config.ablation.noise_gate {
            1.0
        } else {
            gate(self.config.k_n, snap.rho_noise)
        }
    }

    fn policy_gate(&self, snap: &DiagnosticSnapshot) -> f64 {
        if self.config.baseline_mode || self.config.ablation.bias_gate {
            1.0
        } else {
            gate(self.config.k_b, snap.rho_bias)
        }
    }

    /// Gated TD step on the critic; returns the gate. Expects the TD
    /// diagnostics to already include `td`.
    pub fn critic_update(&mut self, trans: &Transition, td: f64, snap: &DiagnosticSnapshot) -> Result<f64> {
        ensure_finite("TD error", &[td])?;
        self.check_state(trans.s)?;
        let g = self.critic_gate(snap);
        let rate = self.config.alpha_v * g;
        match &mut self.critic {
            Critic::Tabular(v) => v[trans.s] += rate * td,
            Critic::Dense(net) => {
                let (_, grad) = net.vjp(&one_hot(self.n_states, trans.s), &[1.0])?;
                let mut p = net.params().flat;
                for (pi, gi) in p.iter_mut().zip(&grad) {
                    *pi += rate * td * gi;
                }
                net.set_params(&p)?;
            }
        }
        Ok(g)
    }

    /// Gated policy-gradient step plus the entropy bonus gradient.
    pub fn policy_update(
        &mut self,
        trans: &Transition,
        advantage: f64,
        snap: &DiagnosticSnapshot,
        beta_h: f64,
    ) -> Result<PolicyStep> {
        ensure_finite("advantage", &[advantage])?;
        if trans.a >= NUM_ACTIONS {
            return Err(Error::InvalidAction(trans.a));
        }
        let p = self.probs(trans.s)?;
        let g = self.policy_gate(snap);
        let alpha = self.config.alpha_pi;
        // d log pi(a|s) / d logits = e_a - p
        let dlogp: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, q)| if k == trans.a { 1.0 } else { 0.0 } - q)
            .collect();
        let dent = entropy_grad(&p);
        let n_states = self.n_states;
        match &mut self.policy {
            Policy::Tabular(t) => {
                let row = &mut t[trans.s];
                let mut adv_step = [0.0; NUM_ACTIONS];
                let mut total = [0.0; NUM_ACTIONS];
                for k in 0..NUM_ACTIONS {
                    adv_step[k] = alpha * g * advantage * dlogp[k];
                    total[k] = adv_step[k] + alpha * beta_h * dent[k];
                    row[k] += total[k];
                }
                Ok(PolicyStep {
                    gate: g,
                    advantage_step_norm: norm(&adv_step),
                    grad_log_pi_norm: norm(&dlogp),
                    total_step_norm: norm(&total),
                })
            }
            Policy::Dense(net) => {
                let x = one_hot(n_states, trans.s);
                let (_, grad_logp) = net.vjp(&x, &dlogp)?;
                let (_, grad_ent) = net.vjp(&x, &dent)?;
                let adv_step: Vec<f64> = grad_logp.iter().map(|gl| alpha * g * advantage * gl).collect();
                let total: Vec<f64> = adv_step
                    .iter()
                    .zip(&grad_ent)
                    .map(|(a, ge)| a + alpha * beta_h * ge)
                    .collect();
                let mut params = net.params().flat;
                for (pi, d) in params.iter_mut().zip(&total) {
                    *pi += d;
                }
                net.set_params(&params)?;
                Ok(PolicyStep {
                    gate: g,
                    advantage_step_norm: norm(&adv_step),
                    grad_log_pi_norm: norm(&grad_logp),
                    total_step_norm: norm(&total),
                })
            }
        }
    }

    /// Full per-transition update: TD error, diagnostics, critic, entropy
    /// weight, policy. On error the agent is left unchanged.
    pub fn learn(&mut self, trans: &Transition) -> Result<AgentStep> {
        let td = td_error(
            trans.r,
            self.value(trans.s)?,
            self.value(trans.s_next)?,
            trans.done,
            self.config.gamma_discount,
        );
        ensure_finite("TD error", &[td])?;
        if trans.a >= NUM_ACTIONS {
            return Err(Error::InvalidAction(trans.a));
        }
        self.td_diag.observe_increment(td)?;
        let snapshot = self.td_diag.snapshot();
        let critic_gate = self.critic_update(trans, td, &snapshot)?;
        let beta_h = entropy_coefficient(&snapshot, &self.config);
        let policy = self.policy_update(trans, td, &snapshot, beta_h)?;
        self.step += 1;
        Ok(AgentStep {
            td_error: td,
            snapshot,
            critic_gate,
            beta_h,
            policy,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Undiscounted return.
    pub ret: f64,
    pub rows: Vec<TraceRecord>,
}

/// Plays one episode, learning from every transition.
pub fn run_episode(agent: &mut Agent, env: &mut ChainEnv) -> Result<Episode> {
    let mut s = env.reset();
    let episode = env.episode().unwrap_or(0);
    agent.episode = episode;
    let mut ret = 0.0;
    let mut rows = Vec::new();
    loop {
        let a = agent.act(s)?;
        let trans = env.step(s, a)?;
        let info = agent.learn(&trans)?;
        ret += trans.r;
        let mut row = TraceRecord::with_diagnostics(agent.step, info.td_error, &info.snapshot);
        row.episode = Some(episode);
        row.critic_gate = Some(info.critic_gate);
        row.policy_gate = Some(info.policy.gate);
        row.beta_h = Some(info.beta_h);
        row.reward = Some(trans.r);
        row.update_norm = info.policy.total_step_norm;
        rows.push(row);
        s = trans.s_next;
        if trans.done {
            break;
        }
    }
    Ok(Episode { ret, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ChainConfig, LEFT, RIGHT};

    fn snap(rho_bias: f64, rho_noise: f64) -> DiagnosticSnapshot {
        DiagnosticSnapshot {
            rho_bias,
            rho_noise,
            ..Default::default()
        }
    }

    fn trans(s: usize, a: usize, r: f64) -> Transition {
        Transition { s, a, r, s_next: s, done: false }
    }

    #[test]
    fn td_examples() {
        assert_eq!(td_error(1.0, 0.0, 0.0, false, 0.9), 1.0);
        assert!((td_error(0.0, 2.0, 2.0, false, 0.9) + 0.2).abs() < 1e-15);
        assert_eq!(td_error(0.5, 2.0, 100.0, true, 0.9), -1.5);
    }

    #[test]
    fn entropy_coefficient_examples() {
        let cfg = AgentConfig { beta0: 0.01, lambda_b: 1.0, lambda_n: 0.0, ..Default::default() };
        assert_eq!(entropy_coefficient(&snap(0.0, 0.0), &cfg), 0.01);
        assert_eq!(entropy_coefficient(&snap(1.0, 0.0), &cfg), 0.02);
        let cfg = AgentConfig { lambda_n: 1.0, ..cfg };
        let b = entropy_coefficient(&snap(0.0, 1e200), &cfg);
        assert!(b > 0.0 && b < 1e-200);
        let base = AgentConfig { baseline_mode: true, ..cfg };
        assert_eq!(entropy_coefficient(&snap(3.0, 0.2), &base), 0.01);
    }

    #[test]
    fn critic_gate_examples() {
        let cfg = AgentConfig { alpha_v: 0.5, k_n: 1.0, ..Default::default() };
        let mut agent = Agent::new(cfg, 3, 0).unwrap();
        let t = trans(1, LEFT, 0.0);
        assert_eq!(agent.critic_update(&t, 2.0, &snap(0.0, 0.0)).unwrap(), 1.0);
        assert_eq!(agent.value(1).unwrap(), 1.0);
        assert_eq!(agent.critic_update(&t, 2.0, &snap(0.0, 3.0)).unwrap(), 0.25);
        assert_eq!(agent.value(1).unwrap(), 1.25);
        let mut base = Agent::new(AgentConfig { baseline_mode: true, ..cfg }, 3, 0).unwrap();
        assert_eq!(base.critic_update(&t, 2.0, &snap(0.0, 3.0)).unwrap(), 1.0);
        assert!(agent.critic_update(&t, f64::NAN, &snap(0.0, 0.0)).is_err());
    }

    #[test]
    fn zero_advantage_moves_only_by_entropy() {
        let mut agent = Agent::new(AgentConfig::default(), 1, 0).unwrap();
        if let Policy::Tabular(t) = &mut agent.policy {
            t[0] = [1.0, -1.0];
        }
        let before = agent.probs(0).unwrap();
        let step = agent.policy_update(&trans(0, LEFT, 0.0), 0.0, &snap(0.0, 0.0), 0.05).unwrap();
        assert_eq!(step.advantage_step_norm, 0.0);
        assert!(step.total_step_norm > 0.0);
        let after = agent.probs(0).unwrap();
        // entropy ascent pulls the policy towards uniform
        assert!(after[0] < before[0]);
    }

    #[test]
    fn positive_advantage_raises_taken_logit() {
        let mut agent = Agent::new(AgentConfig::default(), 1, 0).unwrap();
        agent.policy_update(&trans(0, RIGHT, 0.0), 1.0, &snap(0.0, 0.0), 0.0).unwrap();
        let Policy::Tabular(t) = &agent.policy else { unreachable!() };
        assert!(t[0][RIGHT] > 0.0 && t[0][LEFT] < 0.0);
    }

    #[test]
    fn huge_bias_ratio_freezes_advantage_step() {
        let mut agent = Agent::new(AgentConfig::default(), 1, 0).unwrap();
        let step = agent.policy_update(&trans(0, RIGHT, 0.0), 5.0, &snap(1e12, 0.0), 0.0).unwrap();
        assert!(step.advantage_step_norm < 1e-11);
    }

    #[test]
    fn entropy_grad_matches_finite_differences() {
        let z = [0.3, -1.1];
        let g = entropy_grad(&softmax(&z));
        for k in 0..2 {
            let mut up = z;
            let mut dn = z;
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (entropy(&softmax(&up)) - entropy(&softmax(&dn))) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    fn train(cfg: AgentConfig, env_cfg: ChainConfig, episodes: usize, seed: u64) -> (Agent, Vec<Episode>) {
        let mut agent = Agent::new(cfg, env_cfg.n_states, seed).unwrap();
        let mut env = ChainEnv::new(env_cfg, seed).unwrap();
        let eps = (0..episodes).map(|_| run_episode(&mut agent, &mut env).unwrap()).collect();
        (agent, eps)
    }

    #[test]
    fn baseline_solves_the_chain() {
        let cfg = AgentConfig { baseline_mode: true, ..Default::default() };
        let (_, eps) = train(cfg, ChainConfig::default(), 500, 3);
        let tail: f64 = eps[450..].iter().map(|e| e.ret).sum::<f64>() / 50.0;
        assert!(tail >= 0.9, "mean return {tail}");
    }

    #[test]
    fn per_step_invariants_hold() {
        for head in [HeadKind::Tabular, HeadKind::Dense { hidden: 8 }] {
            let cfg = AgentConfig { head, ..Default::default() };
            let env_cfg = ChainConfig { reward_noise_std: 0.3, flip_episode: Some(40), ..Default::default() };
            let mut agent = Agent::new(cfg, env_cfg.n_states, 11).unwrap();
            let mut env = ChainEnv::new(env_cfg, 11).unwrap();
            for _ in 0..80 {
                let mut s = env.reset();
                loop {
                    let a = agent.act(s).unwrap();
                    let t = env.step(s, a).unwrap();
                    let info = agent.learn(&t).unwrap();
                    assert!(info.critic_gate > 0.0 && info.critic_gate <= 1.0);
                    assert!(info.policy.gate > 0.0 && info.policy.gate <= 1.0);
                    assert!(info.beta_h > 0.0);
                    let bound = cfg.alpha_pi * info.td_error.abs() * info.policy.grad_log_pi_norm;
                    assert!(info.policy.advantage_step_norm <= bound * (1.0 + 1e-12));
                    for st in 0..env_cfg.n_states {
                        let total: f64 = agent.probs(st).unwrap().iter().sum();
                        assert!((total - 1.0).abs() < 1e-10);
                    }
                    s = t.s_next;
                    if t.done {
                        break;
                    }
                }
            }
        }
    }

    #[test]
    fn zero_sensitivities_reproduce_baseline_entropy() {
        let cfg = AgentConfig { lambda_b: 0.0, lambda_n: 0.0, ..Default::default() };
        let (_, eps) = train(cfg, ChainConfig { reward_noise_std: 0.2, ..Default::default() }, 30, 5);
        assert!(eps.iter().flat_map(|e| &e.rows).all(|r| r.beta_h == Some(cfg.beta0)));
    }
}
