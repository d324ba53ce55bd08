//! Online diagnostics of a scalar error stream.
//!
//! Three exponential moving averages are tracked over the increments
//! `x_t` of the stream (loss differences in supervised settings, TD errors
//! in actor-critic settings):
//!
//! ```text
//! b_t  = (1 - alpha)  b_{t-1}  + alpha  x_t             (trend)
//! nu_t = (1 - beta)   nu_{t-1} + beta   |x_t|           (volatility)
//! s2_t = (1 - zeta)   s2_{t-1} + zeta   (x_t - b_t)^2   (residual variance)
//! ```
//!
//! plus an alignment score `s`, the EMA (coefficient `lambda`) of the cosine
//! between the current gradient and the momentum. The normalized ratios are
//! `rho_bias = |b| / (eps + nu)` and `rho_noise = sqrt(s2) / (eps + |b|)`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::{check_dims, dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticConfig {
    /// Bias (trend) EMA coefficient.
    pub alpha: f64,
    /// Volatility EMA coefficient.
    pub beta: f64,
    /// Residual-variance EMA coefficient.
    pub zeta: f64,
    /// Alignment EMA coefficient.
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 0.02,
            zeta: 0.02,
            lambda: 0.05,
            epsilon: 1e-8,
        }
    }
}

impl DiagnosticConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("zeta", self.zeta),
            ("lambda", self.lambda),
        ] {
            if !(value > 0.0 && value < 1.0) {
                return Err(Error::config(format!(
                    "diagnostic coefficient {name} must lie in (0, 1), got {value}"
                )));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!(
                "diagnostic epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Running statistics for one error stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticState {
    pub b: f64,
    pub nu: f64,
    pub sigma2: f64,
    pub s: f64,
    /// Last observed loss; `None` until the first [`observe_loss`](Self::observe_loss).
    pub prev_loss: Option<f64>,
    /// Number of increments folded into the EMAs.
    pub step: u64,
    config: DiagnosticConfig,
}

/// Derived ratios plus copies of the raw EMAs at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticSnapshot {
    pub rho_bias: f64,
    pub rho_noise: f64,
    pub s: f64,
    pub b: f64,
    pub nu: f64,
    pub sigma2: f64,
}

impl DiagnosticState {
    pub fn new(config: DiagnosticConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            b: 0.0,
            nu: 0.0,
            sigma2: 0.0,
            s: 0.0,
            prev_loss: None,
            step: 0,
            config,
        })
    }

    pub fn config(&self) -> &DiagnosticConfig {
        &self.config
    }

    /// Feeds the next loss value. The first call only records the loss;
    /// later calls fold the difference to the previous loss into the EMAs.
    pub fn observe_loss(&mut self, loss: f64) -> Result<()> {
        ensure_finite("loss", &[loss])?;
        if let Some(prev) = self.prev_loss {
            self.advance(loss - prev);
        }
        self.prev_loss = Some(loss);
        Ok(())
    }

    /// Folds an increment directly into the EMAs. Actor-critic learners feed
    /// TD errors through this entry point.
    pub fn observe_increment(&mut self, increment: f64) -> Result<()> {
        ensure_finite("error increment", &[increment])?;
        self.advance(increment);
        Ok(())
    }

    fn advance(&mut self, x: f64) {
        let c = &self.config;
        self.b = (1.0 - c.alpha) * self.b + c.alpha * x;
        self.nu = (1.0 - c.beta) * self.nu + c.beta * x.abs();
        let r = x - self.b;
        self.sigma2 = (1.0 - c.zeta) * self.sigma2 + c.zeta * r * r;
        self.step += 1;
    }

    /// Advances the alignment EMA with the cosine between `gradient` and
    /// `momentum`. A zero momentum contributes a cosine of zero.
    pub fn observe_direction(&mut self, gradient: &[f64], momentum: &[f64]) -> Result<()> {
        check_dims(gradient.len(), momentum.len())?;
        let cos = cosine(gradient, momentum, self.config.epsilon);
        ensure_finite("alignment cosine", &[cos])?;
        let lambda = self.config.lambda;
        // Rounding can push a convex combination of values in [-1, 1] a hair outside.
        self.s = ((1.0 - lambda) * self.s + lambda * cos).clamp(-1.0, 1.0);
        Ok(())
    }

    pub fn snapshot(&self) -> DiagnosticSnapshot {
        let eps = self.config.epsilon;
        DiagnosticSnapshot {
            rho_bias: self.b.abs() / (eps + self.nu),
            rho_noise: self.sigma2.sqrt() / (eps + self.b.abs()),
            s: self.s,
            b: self.b,
            nu: self.nu,
            sigma2: self.sigma2,
        }
    }
}

/// `<g, m> / (|g| |m| + eps)`, clamped to [-1, 1].
pub fn cosine(g: &[f64], m: &[f64], eps: f64) -> f64 {
    (dot(g, m) / (norm(g) * norm(m) + eps)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(a: f64) -> DiagnosticConfig {
        DiagnosticConfig {
            alpha: a,
            beta: a,
            zeta: a,
            lambda: 0.1,
            epsilon: 1e-8,
        }
    }

    #[test]
    fn fresh_state_is_zero() {
        let st = DiagnosticState::new(cfg(0.05)).unwrap();
        assert_eq!((st.b, st.nu, st.sigma2, st.s), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(st.prev_loss, None);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(DiagnosticState::new(DiagnosticConfig { alpha: 1.2, ..cfg(0.05) }).is_err());
        assert!(DiagnosticState::new(DiagnosticConfig { lambda: 0.0, ..cfg(0.05) }).is_err());
        let err = DiagnosticState::new(DiagnosticConfig { epsilon: 0.0, ..cfg(0.05) }).unwrap_err();
        assert!(err.to_string().contains("epsilon"));
    }

    #[test]
    fn first_observation_only_seeds() {
        let mut st = DiagnosticState::new(cfg(0.05)).unwrap();
        st.observe_loss(123.0).unwrap();
        assert_eq!((st.b, st.nu, st.sigma2, st.step), (0.0, 0.0, 0.0, 0));
        assert_eq!(st.prev_loss, Some(123.0));
    }

    #[test]
    fn single_step_values() {
        let mut st = DiagnosticState::new(cfg(0.05)).unwrap();
        st.observe_loss(0.0).unwrap();
        st.observe_loss(1.0).unwrap();
        assert!((st.b - 0.05).abs() < 1e-15);
        assert!((st.nu - 0.05).abs() < 1e-15);
        assert!((st.sigma2 - 0.045125).abs() < 1e-15);
        let snap = st.snapshot();
        // |b| / (eps + nu) and sqrt(0.045125) / (eps + 0.05), by hand.
        assert!((snap.rho_bias - 0.05 / (0.05 + 1e-8)).abs() < 1e-12);
        assert!((snap.rho_noise - 4.248529157).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_leaves_state_untouched() {
        let mut st = DiagnosticState::new(cfg(0.05)).unwrap();
        st.observe_loss(1.0).unwrap();
        st.observe_loss(2.0).unwrap();
        let before = st.clone();
        assert!(matches!(st.observe_loss(f64::NAN), Err(Error::NonFinite { .. })));
        assert!(st.observe_loss(f64::INFINITY).is_err());
        assert_eq!(st, before);
    }

    #[test]
    fn constant_stream_stays_zero() {
        let mut st = DiagnosticState::new(cfg(0.05)).unwrap();
        for _ in 0..1000 {
            st.observe_loss(3.5).unwrap();
        }
        assert_eq!((st.b, st.nu, st.sigma2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_increment_fixed_point() {
        let c = 0.3;
        let mut st = DiagnosticState::new(cfg(0.05)).unwrap();
        for i in 0..=10_000 {
            st.observe_loss(c * i as f64).unwrap();
        }
        assert!((st.b - c).abs() < 1e-6);
        assert!((st.nu - c).abs() < 1e-6);
        assert!(st.sigma2 < 1e-10);
    }

    #[test]
    fn alignment_cases() {
        for (m, want) in [([1.0, 0.0], 0.1), ([0.0, 1.0], 0.0), ([-1.0, 0.0], -0.1)] {
            let mut st = DiagnosticState::new(cfg(0.05)).unwrap();
            st.observe_direction(&[1.0, 0.0], &m).unwrap();
            assert!((st.s - want).abs() < 1e-8, "{m:?}: {}", st.s);
        }
        let mut st = DiagnosticState::new(cfg(0.05)).unwrap();
        assert!(matches!(
            st.observe_direction(&[1.0, 0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        // Zero momentum: cosine collapses to zero through the epsilon guard.
        st.observe_direction(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(st.s, 0.0);
    }

    #[test]
    fn zero_state_snapshot_and_noise_dominated() {
        let st = DiagnosticState::new(cfg(0.05)).unwrap();
        let snap = st.snapshot();
        assert_eq!((snap.rho_bias, snap.rho_noise), (0.0, 0.0));

        let mut st = DiagnosticState::new(cfg(0.05)).unwrap();
        st.sigma2 = 0.01;
        let snap = st.snapshot();
        assert!(snap.rho_noise.is_finite());
        assert!((snap.rho_noise - 0.1 / 1e-8).abs() / (0.1 / 1e-8) < 1e-12);
    }

    proptest! {
        #[test]
        fn ema_contraction(c in -5.0f64..5.0, start in -5.0f64..5.0, a in 0.01f64..0.2) {
            let mut st = DiagnosticState::new(cfg(a)).unwrap();
            st.b = start;
            let gap0 = (st.b - c).abs();
            for k in 1..200 {
                st.observe_increment(c).unwrap();
                let bound = (1.0 - a).powi(k) * gap0;
                prop_assert!((st.b - c).abs() <= bound * (1.0 + 1e-9) + 1e-12);
            }
        }

        #[test]
        fn cosine_bounded(g in prop::collection::vec(-1e6f64..1e6, 3), m in prop::collection::vec(-1e6f64..1e6, 3)) {
            let c = cosine(&g, &m, 1e-8);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
