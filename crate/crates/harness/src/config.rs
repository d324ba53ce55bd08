//! Experiment configuration, read from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use errdiag::envs::ChainConfig;
use errdiag::hedrl::AgentConfig;
use errdiag::hsao::HsaoConfig;
use errdiag::mllp::{EsConfig, InnerConfig, TaskDistribution};
use errdiag::tasks::SupervisedTask;
use errdiag::Ablation;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Hsao,
    Hedrl,
    Mllp,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Hsao => "hsao",
            ExperimentKind::Hedrl => "hedrl",
            ExperimentKind::Mllp => "mllp",
        }
    }
}

/// Supervised optimizer run: the optimizer, the task, and how losses are fed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsaoSettings {
    pub optimizer: HsaoConfig,
    pub task: SupervisedTask,
    pub batch_size: usize,
    /// Std of zero-mean Gaussian noise added to the loss seen by the
    /// diagnostics (gradients are unaffected).
    pub loss_noise_std: f64,
}

impl Default for HsaoSettings {
    fn default() -> Self {
        Self {
            optimizer: HsaoConfig::default(),
            task: SupervisedTask::default(),
            batch_size: 8,
            loss_noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HedrlSettings {
    pub agent: AgentConfig,
    pub env: ChainConfig,
    /// Also run the fixed-gate baseline for every seed.
    pub with_baseline: bool,
}

impl Default for HedrlSettings {
    fn default() -> Self {
        Self {
            agent: AgentConfig::default(),
            env: ChainConfig::default(),
            with_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MllpSettings {
    pub hidden: Vec<usize>,
    pub alpha_max: f64,
    pub epsilon: f64,
    pub inner: InnerConfig,
    /// Meta-training settings; `iterations` and `seed` come from the run's
    /// budget and seed.
    pub es: EsConfig,
    pub tasks: TaskDistribution,
    /// Held-out tasks used to evaluate the trained meta-optimizer.
    pub eval_tasks: usize,
    pub eval_seed: u64,
    /// Fixed SGD rates compared against on the held-out tasks.
    pub sgd_rates: Vec<f64>,
}

impl Default for MllpSettings {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            alpha_max: 0.5,
            epsilon: 1e-8,
            inner: InnerConfig::default(),
            es: EsConfig::default(),
            tasks: TaskDistribution::default(),
            eval_tasks: 20,
            eval_seed: 0x5eed,
            sgd_rates: vec![0.01, 0.03, 0.1, 0.15, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Steps (hsao), episodes (hedrl) or meta-iterations (mllp).
    pub budget: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Components removed in every run of this config.
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub hsao: HsaoSettings,
    #[serde(default)]
    pub hedrl: HedrlSettings,
    #[serde(default)]
    pub mllp: MllpSettings,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Input {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.budget == 0 {
            return Err(HarnessError::Config("budget must be positive".into()));
        }
        match self.kind {
            ExperimentKind::Hsao => {
                self.hsao.optimizer.validate()?;
                self.hsao.task.validate()?;
                if self.hsao.batch_size == 0 {
                    return Err(HarnessError::Config("hsao.batch_size must be positive".into()));
                }
                if !(self.hsao.loss_noise_std >= 0.0 && self.hsao.loss_noise_std.is_finite()) {
                    return Err(HarnessError::Config("hsao.loss_noise_std must be nonnegative".into()));
                }
            }
            ExperimentKind::Hedrl => {
                self.hedrl.agent.validate()?;
                self.hedrl.env.validate()?;
            }
            ExperimentKind::Mllp => {
                let m = &self.mllp;
                m.inner.validate()?;
                m.tasks.validate()?;
                EsConfig { iterations: self.budget as usize, ..m.es }.validate()?;
                if m.hidden.contains(&0) {
                    return Err(HarnessError::Config("mllp.hidden widths must be positive".into()));
                }
                if m.eval_tasks == 0 {
                    return Err(HarnessError::Config("mllp.eval_tasks must be positive".into()));
                }
                if m.sgd_rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return Err(HarnessError::Config("mllp.sgd_rates must be positive".into()));
                }
                if !(m.alpha_max > 0.0 && m.epsilon > 0.0) {
                    return Err(HarnessError::Config("mllp.alpha_max and mllp.epsilon must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Mask applied to every run: the top-level mask merged with any mask set
    /// on the component config.
    pub fn effective_ablation(&self) -> Ablation {
        let inner = match self.kind {
            ExperimentKind::Hsao => self.hsao.optimizer.ablation,
            ExperimentKind::Hedrl => self.hedrl.agent.ablation,
            ExperimentKind::Mllp => Ablation::NONE,
        };
        Ablation {
            bias_gate: self.ablation.bias_gate || inner.bias_gate,
            noise_gate: self.ablation.noise_gate || inner.noise_gate,
            alignment_correction: self.ablation.alignment_correction || inner.alignment_correction,
        }
    }

    /// SHA-256 of the canonical JSON form of every semantic field (defaults
    /// filled in, `out_dir` excluded).
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.out_dir = None;
        let canonical = serde_json::to_string(&serde_json::to_value(&semantic).expect("config serializes"))
            .expect("json value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "kind = \"hsao\"\nbudget = 100\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.hsao.optimizer, HsaoConfig::default());
        assert!(cfg.effective_ablation().is_empty());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("kind = \"hsao\"\nbudget = 1\n[hsao.optimizer]\nalpah0 = 0.1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("alpah0"), "{err}");
        let err = RunConfig::from_toml("kind = \"hsao\"\nbudget = 1\nbudgte = 2\n").unwrap_err();
        assert!(err.to_string().contains("budgte"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "kind = \"hsao\"\nbudget = 0\n",
            "kind = \"hsao\"\nbudget = 5\nseeds = []\n",
            "kind = \"hsao\"\nbudget = 5\n[hsao.optimizer]\ngamma = 1.5\n",
            "kind = \"hedrl\"\nbudget = 5\n[hedrl.env]\nn_states = 1\n",
            "kind = \"spam\"\nbudget = 5\n",
        ] {
            assert_eq!(RunConfig::from_toml(text).unwrap_err().exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let explicit = RunConfig::from_toml("kind = \"hsao\"\nbudget = 100\nseeds = [0]\n[hsao.optimizer]\ntau = 0.25\n").unwrap();
        assert_eq!(a.hash(), explicit.hash());
        let moved = RunConfig { out_dir: Some("elsewhere".into()), ..a.clone() };
        assert_eq!(a.hash(), moved.hash());
        let mut changed = a.clone();
        changed.hsao.optimizer.k_b = 2.5;
        assert_ne!(a.hash(), changed.hash());
        let mut reseeded = a.clone();
        reseeded.seeds = vec![1];
        assert_ne!(a.hash(), reseeded.hash());
    }

    #[test]
    fn ablation_masks_merge() {
        let cfg = RunConfig::from_toml(
            "kind = \"hsao\"\nbudget = 5\n[ablation]\nbias_gate = true\n[hsao.optimizer.ablation]\nnoise_gate = true\n",
        )
        .unwrap();
        assert_eq!(cfg.effective_ablation().label(), "no_bias_gate+no_noise_gate");
    }
}
