//! Diagnostic-gated Adam-style optimizer.
//!
//! One step, in order:
//!
//! 1. moments `m = gamma m + (1 - gamma) g`, `v = eta v + (1 - eta) g*g`
//! 2. loss fed to the bias/noise EMAs
//! 3. alignment EMA from `cos(g, m)`
//! 4. gated rate `alpha_eff = base_lr(t) * kappa * delta`
//! 5. directional correction of `g` along `m`
//! 6. `theta -= alpha_eff * g_corrected / (sqrt(v_hat) + eps)`
//!
//! Only `v` is bias corrected; the raw `m` drives both the alignment score
//! and the correction.

use serde::{Deserialize, Serialize};

use crate::diag::{DiagnosticConfig, DiagnosticSnapshot, DiagnosticState};
use crate::error::{ensure_finite, Error, Result};
use crate::trace::{Ablation, TraceRecord};
use crate::{check_dims, dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsaoConfig {
    pub alpha0: f64,
    /// Strength of the logarithmic base-rate decay.
    pub c: f64,
    /// First-moment decay.
    pub gamma: f64,
    /// Second-moment decay.
    pub eta: f64,
    pub k_b: f64,
    pub k_n: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub diag: DiagnosticConfig,
    pub ablation: Ablation,
}

impl Default for HsaoConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.01,
            c: 0.1,
            gamma: 0.9,
            eta: 0.999,
            k_b: 2.0,
            k_n: 2.0,
            tau: 0.25,
            epsilon: 1e-8,
            diag: DiagnosticConfig::default(),
            ablation: Ablation::NONE,
        }
    }
}

impl HsaoConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.alpha0 > 0.0 && self.alpha0.is_finite(), "alpha0 must be positive"),
            (self.c >= 0.0 && self.c.is_finite(), "c must be nonnegative"),
            (self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (self.eta > 0.0 && self.eta < 1.0, "eta must lie in (0, 1)"),
            (self.k_b > 0.0 && self.k_b.is_finite(), "k_b must be positive"),
            (self.k_n > 0.0 && self.k_n.is_finite(), "k_n must be positive"),
            (self.tau >= 0.0 && self.tau.is_finite(), "tau must be nonnegative"),
            (self.epsilon > 0.0 && self.epsilon.is_finite(), "epsilon must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(format!("hsao: {msg}")));
            }
        }
        self.diag.validate()
    }
}

/// `alpha0 / (1 + c ln(1 + t))`.
pub fn base_lr(t: u64, alpha0: f64, c: f64) -> f64 {
    alpha0 / (1.0 + c * (t as f64).ln_1p())
}

/// Bias gate `kappa = 1 / (1 + k_b rho_bias)` and noise gate
/// `delta = 1 / (1 + k_n rho_noise)`.
pub fn gates(snap: &DiagnosticSnapshot, k_b: f64, k_n: f64) -> (f64, f64) {
    (gate(k_b, snap.rho_bias), gate(k_n, snap.rho_noise))
}

pub(crate) fn gate(k: f64, rho: f64) -> f64 {
    1.0 / (1.0 + k * rho)
}

/// `g - tau s <g, m> / (|m|^2 + eps) m`.
///
/// The component of `g` along `m` is scaled by `1 - tau s |m|^2 / (|m|^2 + eps)`
/// and the orthogonal part is untouched, so for `0 <= tau s <= 1` the result
/// is never longer than `g`. For negative `s` the momentum component is
/// amplified instead.
pub fn directional_correction(g: &[f64], m: &[f64], s: f64, tau: f64, epsilon: f64) -> Result<Vec<f64>> {
    check_dims(g.len(), m.len())?;
    let coef = tau * s * dot(g, m) / (dot(m, m) + epsilon);
    Ok(g.iter().zip(m).map(|(gi, mi)| gi - coef * mi).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub diag: DiagnosticState,
}

/// What one step did, for tracing and assertions.
#[derive(Debug, Clone, PartialEq)]
pub struct HsaoStep {
    pub t: u64,
    pub loss: f64,
    pub base_lr: f64,
    pub kappa: f64,
    pub delta: f64,
    pub alpha_eff: f64,
    pub snapshot: DiagnosticSnapshot,
    pub update: Vec<f64>,
}

impl HsaoStep {
    pub fn update_norm(&self) -> f64 {
        norm(&self.update)
    }

    pub fn to_trace(&self, momentum: &[f64]) -> TraceRecord {
        let mut row = TraceRecord::with_diagnostics(self.t, self.loss, &self.snapshot);
        row.kappa = Some(self.kappa);
        row.delta_gate = Some(self.delta);
        row.alpha_eff = Some(self.alpha_eff);
        row.update_norm = self.update_norm();
        row.update_parallel = Some(dot(&self.update, momentum) / (norm(momentum) + 1e-12));
        row
    }
}

#[derive(Debug, Clone)]
pub struct Hsao {
    config: HsaoConfig,
    state: OptimizerState,
}

impl Hsao {
    pub fn new(config: HsaoConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            state: OptimizerState {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
                diag: DiagnosticState::new(config.diag)?,
            },
            config,
        })
    }

    pub fn config(&self) -> &HsaoConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Applies one update to `params` given the minibatch gradient and the
    /// pre-update minibatch loss. On error neither `params` nor the optimizer
    /// state is modified.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], loss: f64) -> Result<HsaoStep> {
        let dim = self.state.m.len();
        check_dims(dim, params.len())?;
        check_dims(dim, grad.len())?;
        ensure_finite("gradient", grad)?;
        ensure_finite("loss", &[loss])?;
        let cfg = &self.config;

        let t = self.state.t + 1;
        let m: Vec<f64> = self
            .state
            .m
            .iter()
            .zip(grad)
            .map(|(mi, gi)| cfg.gamma * mi + (1.0 - cfg.gamma) * gi)
            .collect();
        let v: Vec<f64> = self
            .state
            .v
            .iter()
            .zip(grad)
            .map(|(vi, gi)| cfg.eta * vi + (1.0 - cfg.eta) * gi * gi)
            .collect();

        let mut diag = self.state.diag.clone();
        diag.observe_loss(loss)?;
        diag.observe_direction(grad, &m)?;
        let snapshot = diag.snapshot();

        let base = base_lr(t, cfg.alpha0, cfg.c);
        let (mut kappa, mut delta) = gates(&snapshot, cfg.k_b, cfg.k_n);
        if cfg.ablation.bias_gate {
            kappa = 1.0;
        }
        if cfg.ablation.noise_gate {
            delta = 1.0;
        }
        let alpha_eff = base * kappa * delta;

        let tau = if cfg.ablation.alignment_correction { 0.0 } else { cfg.tau };
        let corrected = directional_correction(grad, &m, snapshot.s, tau, cfg.epsilon)?;
        let bias_fix = 1.0 - cfg.eta.powi(t.min(i32::MAX as u64) as i32);
        let update: Vec<f64> = corrected
            .iter()
            .zip(&v)
            .map(|(gc, vi)| -alpha_eff * gc / ((vi / bias_fix).sqrt() + cfg.epsilon))
            .collect();
        ensure_finite("parameter update", &update)?;

        for (p, u) in params.iter_mut().zip(&update) {
            *p += u;
        }
        self.state = OptimizerState { m, v, t, diag };
        Ok(HsaoStep {
            t,
            loss,
            base_lr: base,
            kappa,
            delta,
            alpha_eff,
            snapshot,
            update,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(rho_bias: f64, rho_noise: f64) -> DiagnosticSnapshot {
        DiagnosticSnapshot {
            rho_bias,
            rho_noise,
            ..Default::default()
        }
    }

    #[test]
    fn base_lr_examples() {
        assert_eq!(base_lr(0, 0.3, 5.0), 0.3);
        let t = std::f64::consts::E - 1.0;
        assert!((0.3 / (1.0 + 1.0 * t.ln_1p()) - 0.15).abs() < 1e-15);
        assert_eq!(base_lr(1_000_000, 0.3, 0.0), 0.3);
        assert!(base_lr(10, 0.3, 0.5) < base_lr(9, 0.3, 0.5));
    }

    #[test]
    fn gate_examples() {
        assert_eq!(gates(&snap(0.0, 0.0), 2.0, 2.0), (1.0, 1.0));
        assert!((gates(&snap(1.0, 0.0), 2.0, 2.0).0 - 1.0 / 3.0).abs() < 1e-15);
        let (_, d) = gates(&snap(0.0, 1e300), 2.0, 2.0);
        assert!((0.0..1e-299).contains(&d));
    }

    #[test]
    fn correction_examples() {
        let g = [0.4, -1.2, 2.0];
        let m = [1.0, 0.5, -0.1];
        assert_eq!(directional_correction(&g, &m, 0.7, 0.0, 1e-8).unwrap(), g.to_vec());
        let c = directional_correction(&[1.0, 0.0], &[1.0, 0.0], 1.0, 1.0, 1e-8).unwrap();
        assert!(c[0].abs() < 1e-7 && c[1] == 0.0);
        let c = directional_correction(&[0.0, 3.0], &[2.0, 0.0], 0.9, 0.5, 1e-8).unwrap();
        assert_eq!(c, vec![0.0, 3.0]);
        assert!(directional_correction(&[1.0], &[1.0, 2.0], 1.0, 1.0, 1e-8).is_err());
    }

    #[test]
    fn first_step_runs_at_base_rate() {
        let cfg = HsaoConfig { alpha0: 0.1, ..Default::default() };
        let mut opt = Hsao::new(cfg, 2).unwrap();
        let mut p = vec![1.0, -1.0];
        let info = opt.step(&mut p, &[1.0, -1.0], 1.0).unwrap();
        assert_eq!((info.kappa, info.delta), (1.0, 1.0));
        assert_eq!(info.alpha_eff, base_lr(1, 0.1, cfg.c));
    }

    #[test]
    fn non_finite_inputs_leave_state_unchanged() {
        let mut opt = Hsao::new(HsaoConfig::default(), 2).unwrap();
        let mut p = vec![1.0, 2.0];
        opt.step(&mut p, &[0.1, 0.2], 1.0).unwrap();
        let (before, pb) = (opt.state().clone(), p.clone());
        assert!(opt.step(&mut p, &[f64::NAN, 0.0], 1.0).is_err());
        assert!(opt.step(&mut p, &[0.0, 0.0], f64::INFINITY).is_err());
        assert!(opt.step(&mut p, &[0.0], 1.0).is_err());
        assert_eq!(opt.state(), &before);
        assert_eq!(p, pb);
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            HsaoConfig { alpha0: 0.0, ..Default::default() },
            HsaoConfig { gamma: 1.0, ..Default::default() },
            HsaoConfig { k_n: 0.0, ..Default::default() },
            HsaoConfig { tau: -0.1, ..Default::default() },
        ] {
            assert!(Hsao::new(cfg, 3).is_err());
        }
    }

    #[test]
    fn stationary_scalar_quadratic_converges() {
        let cfg = HsaoConfig { alpha0: 0.1, ..Default::default() };
        let mut opt = Hsao::new(cfg, 1).unwrap();
        let mut theta = vec![1.0];
        let mut reached = None;
        for t in 0..5000 {
            let loss = 0.5 * theta[0] * theta[0];
            if loss < 1e-6 {
                reached = Some(t);
                break;
            }
            let g = vec![theta[0]];
            let info = opt.step(&mut theta, &g, loss).unwrap();
            assert!(info.alpha_eff >= 0.0 && info.alpha_eff <= cfg.alpha0);
        }
        assert!(reached.is_some(), "final loss {}", 0.5 * theta[0] * theta[0]);
    }

    proptest! {
        #[test]
        fn gates_are_monotone(r1 in 0.0f64..1e6, dr in 1e-6f64..1e3, k in 0.5f64..5.0) {
            let lo = gate(k, r1);
            let hi = gate(k, r1 + dr);
            prop_assert!(hi < lo);
            prop_assert!(hi > 0.0 && lo <= 1.0);
        }

        #[test]
        fn correction_never_lengthens_for_nonnegative_alignment(
            g in prop::collection::vec(-10.0f64..10.0, 4),
            m in prop::collection::vec(-10.0f64..10.0, 4),
            s in 0.0f64..1.0,
            tau in 0.0f64..1.0,
        ) {
            // The parallel part is scaled by 1 - tau s |m|^2 / (|m|^2 + eps), whatever the sign of <g, m>.
            let c = directional_correction(&g, &m, s, tau, 1e-8).unwrap();
            prop_assert!(norm(&c) <= norm(&g) * (1.0 + 1e-12));
        }
    }
}
