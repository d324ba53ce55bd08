//! Per-step trace rows and the ablation mask shared by every learner.

use serde::{Deserialize, Serialize};

use crate::diag::DiagnosticSnapshot;

/// Version of the trace row layout. Bump whenever a field changes meaning.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Diagnostic components that can be switched off. `true` means removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub bias_gate: bool,
    pub noise_gate: bool,
    pub alignment_correction: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation {
        bias_gate: false,
        noise_gate: false,
        alignment_correction: false,
    };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }

    /// Short label such as `full` or `no_bias_gate+no_noise_gate`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.bias_gate {
            parts.push("no_bias_gate");
        }
        if self.noise_gate {
            parts.push("no_noise_gate");
        }
        if self.alignment_correction {
            parts.push("no_alignment");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// One row of a trace file. Fields that do not apply to a learner are `None`
/// and omitted from the serialized row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<u64>,
    /// Loss (supervised, meta) or TD error (actor-critic) fed to the diagnostics.
    pub signal: f64,
    pub b: f64,
    pub nu: f64,
    pub sigma2: f64,
    pub s: f64,
    pub rho_bias: f64,
    pub rho_noise: f64,
    pub update_norm: f64,

    // supervised optimizer
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_gate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_eff: Option<f64>,
    /// Signed component of the update along the momentum direction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_parallel: Option<f64>,

    // actor-critic
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_gate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_gate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,

    // learned optimizer
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_meta_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_meta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_meta_max: Option<f64>,
}

impl TraceRecord {
    /// Row with the diagnostic columns filled from `snap` and everything
    /// learner-specific left empty.
    pub fn with_diagnostics(step: u64, signal: f64, snap: &DiagnosticSnapshot) -> Self {
        TraceRecord {
            step,
            signal,
            b: snap.b,
            nu: snap.nu,
            sigma2: snap.sigma2,
            s: snap.s,
            rho_bias: snap.rho_bias,
            rho_noise: snap.rho_noise,
            ..Default::default()
        }
    }

    /// Whether every present numeric field is finite.
    pub fn is_finite(&self) -> bool {
        let required = [
            self.signal,
            self.b,
            self.nu,
            self.sigma2,
            self.s,
            self.rho_bias,
            self.rho_noise,
            self.update_norm,
        ];
        let optional = [
            self.true_loss,
            self.kappa,
            self.delta_gate,
            self.alpha_eff,
            self.update_parallel,
            self.critic_gate,
            self.policy_gate,
            self.beta_h,
            self.reward,
            self.alpha_meta_mean,
            self.alpha_meta_min,
            self.alpha_meta_max,
        ];
        required.iter().all(|v| v.is_finite())
            && optional.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_labels() {
        assert_eq!(Ablation::NONE.label(), "full");
        let a = Ablation {
            bias_gate: true,
            alignment_correction: true,
            ..Ablation::NONE
        };
        assert_eq!(a.label(), "no_bias_gate+no_alignment");
        assert!(!a.is_empty());
    }

    #[test]
    fn finiteness_covers_optional_columns() {
        let mut row = TraceRecord::default();
        assert!(row.is_finite());
        row.beta_h = Some(f64::NAN);
        assert!(!row.is_finite());
    }
}
