//! Diagnostic-conditioned learned optimizer.
//!
//! A small network is applied to every parameter coordinate independently.
//! For coordinate `i` it sees `[g_i, v_i, b, nu, s]` (each squashed through
//! `2 atan(x) / pi`) and emits raw values mapped to `omega_i = tanh(.)`,
//! `zeta_i = tanh(.)` and `alpha_i = alpha_max sigmoid(.)`. The update is
//!
//! ```text
//! dtheta_i = -alpha_i (omega_i g_i + zeta_i gc_i) / (sqrt(v_i) + eps)
//! ```
//!
//! with `gc` the alignment-corrected gradient (see
//! [`directional_correction`]). The squashing of the inputs is an addition for
//! scale robustness; the momentum only enters through the alignment score
//! and the correction.
//!
//! The network weights are meta-trained with antithetic evolution strategies
//! on the mean post-adaptation loss over a batch of tasks.

use std::fmt::Write as _;

use log::warn;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diag::{DiagnosticConfig, DiagnosticSnapshot, DiagnosticState};
use crate::error::{ensure_finite, Error, Result};
use crate::hsao::directional_correction;
use crate::net::{sigmoid, Activation, DenseNet};
use crate::rng::{mix, rng_from};
use crate::trace::TraceRecord;
use crate::{check_dims, norm};

pub const NUM_FEATURES: usize = 5;
const FORMAT_MAGIC: &str = "errdiag-meta-optimizer";
const FORMAT_VERSION: u32 = 1;

fn squash(x: f64) -> f64 {
    x.atan() * std::f64::consts::FRAC_2_PI
}

/// Per-coordinate network input. The diagnostics are shared by every coordinate.
pub fn features(g_i: f64, v_i: f64, snap: &DiagnosticSnapshot) -> [f64; NUM_FEATURES] {
    [g_i, v_i, snap.b, snap.nu, snap.s].map(squash)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOptimizer {
    pub net: DenseNet,
    pub alpha_max: f64,
    pub epsilon: f64,
}

/// Gates and step size for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordOutput {
    pub omega: f64,
    pub zeta: f64,
    pub alpha: f64,
}

impl MetaOptimizer {
    /// Randomly initialized network `5 -> hidden.. -> 3` with tanh hidden layers.
    pub fn new(hidden: &[usize], alpha_max: f64, epsilon: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        let (dims, acts) = Self::architecture(hidden);
        Self::from_net(DenseNet::new(&dims, &acts, rng)?, alpha_max, epsilon)
    }

    /// All-zero network: `omega = zeta = 0`, `alpha = alpha_max / 2`.
    pub fn zeros(hidden: &[usize], alpha_max: f64, epsilon: f64) -> Result<Self> {
        let (dims, acts) = Self::architecture(hidden);
        Self::from_net(DenseNet::zeros(&dims, &acts)?, alpha_max, epsilon)
    }

    fn architecture(hidden: &[usize]) -> (Vec<usize>, Vec<Activation>) {
        let dims: Vec<usize> = std::iter::once(NUM_FEATURES)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(3))
            .collect();
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        (dims, acts)
    }

    pub fn from_net(net: DenseNet, alpha_max: f64, epsilon: f64) -> Result<Self> {
        if net.input_dim() != NUM_FEATURES || net.output_dim() != 3 {
            return Err(Error::config(format!(
                "meta-optimizer network must map {NUM_FEATURES} features to 3 outputs, got {:?}",
                net.dims()
            )));
        }
        if !(alpha_max > 0.0 && alpha_max.is_finite()) {
            return Err(Error::config("alpha_max must be positive"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config("meta-optimizer epsilon must be positive"));
        }
        Ok(Self { net, alpha_max, epsilon })
    }

    pub fn params(&self) -> Vec<f64> {
        self.net.params().flat
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        Ok(Self {
            net: self.net.with_params(flat)?,
            ..self.clone()
        })
    }

    pub fn output(&self, feat: &[f64; NUM_FEATURES]) -> Result<CoordOutput> {
        let raw = self.net.forward(feat)?;
        ensure_finite("meta-optimizer output", &raw)?;
        // sigmoid can underflow to zero for very negative inputs
        let alpha = (self.alpha_max * sigmoid(raw[2])).max(f64::MIN_POSITIVE);
        Ok(CoordOutput {
            omega: raw[0].tanh(),
            zeta: raw[1].tanh(),
            alpha,
        })
    }

    /// Plain-text serialization: a header with format version, layer widths,
    /// activation tags, `alpha_max` and `epsilon`, followed by the flat
    /// parameter vector, one value per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let dims: Vec<String> = self.net.dims().iter().map(|d| d.to_string()).collect();
        let acts: Vec<&str> = self.net.activations().iter().map(|a| a.tag()).collect();
        let params = self.params();
        let _ = writeln!(out, "{FORMAT_MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(out, "dims {}", dims.join(" "));
        let _ = writeln!(out, "activations {}", acts.join(" "));
        let _ = writeln!(out, "alpha_max {:?}", self.alpha_max);
        let _ = writeln!(out, "epsilon {:?}", self.epsilon);
        let _ = writeln!(out, "params {}", params.len());
        for p in params {
            let _ = writeln!(out, "{p:?}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format(msg.to_string());
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing {key} line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected `{key}` line, got `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let version = header(FORMAT_MAGIC)?;
        if version != [FORMAT_VERSION.to_string()] {
            return Err(bad(&format!("unsupported format version {version:?}")));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("not a number: {s}")));
        let dims = header("dims")?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| bad(&format!("bad width {s}"))))
            .collect::<Result<Vec<_>>>()?;
        let acts = header("activations")?
            .iter()
            .map(|s| Activation::from_tag(s).ok_or_else(|| bad(&format!("unknown activation {s}"))))
            .collect::<Result<Vec<_>>>()?;
        let alpha_max = parse_f(header("alpha_max")?.first().map_or("", |s| s.as_str()))?;
        let epsilon = parse_f(header("epsilon")?.first().map_or("", |s| s.as_str()))?;
        let count: usize = header("params")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad params count"))?;
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_f(l.trim()))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != count {
            return Err(bad(&format!("expected {count} parameters, found {}", values.len())));
        }
        let mut net = DenseNet::zeros(&dims, &acts)?;
        net.set_params(&values).map_err(|e| bad(&e.to_string()))?;
        Self::from_net(net, alpha_max, epsilon)
    }
}

/// Inner-loop settings shared by every task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerConfig {
    pub steps: usize,
    /// First-moment decay.
    pub gamma: f64,
    /// Second-moment decay.
    pub eta: f64,
    /// Strength of the alignment correction producing `gc`.
    pub tau: f64,
    pub diag: DiagnosticConfig,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            gamma: 0.9,
            eta: 0.9,
            tau: 0.25,
            diag: DiagnosticConfig::default(),
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("inner horizon K must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0 && self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::config("inner moment decays must lie in (0, 1)"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::config("inner tau must be nonnegative"));
        }
        self.diag.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopState {
    pub theta: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub diag: DiagnosticState,
    pub t: usize,
    pub horizon: usize,
    config: InnerConfig,
}

/// One inner update with the per-coordinate quantities behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerUpdate {
    pub delta: Vec<f64>,
    pub outputs: Vec<CoordOutput>,
    /// `g / (sqrt(v) + eps)` and `gc / (sqrt(v) + eps)`.
    pub normalized_grad: Vec<f64>,
    pub normalized_corrected: Vec<f64>,
    pub snapshot: DiagnosticSnapshot,
}

impl InnerUpdate {
    /// Per-coordinate bound `alpha_max (|omega_i| + |zeta_i|) max(|gn_i|, |gcn_i|)`.
    pub fn coordinate_bounds(&self, alpha_max: f64) -> Vec<f64> {
        self.outputs
            .iter()
            .zip(self.normalized_grad.iter().zip(&self.normalized_corrected))
            .map(|(o, (gn, gc))| {
                let mag = gn.abs().max(gc.abs());
                alpha_max * (o.omega.abs() * mag + o.zeta.abs() * mag)
            })
            .collect()
    }

    /// `|dtheta| <= alpha_max |(|omega| + |zeta|) * max(|gn|, |gcn|)|`, checked
    /// without tolerance.
    pub fn satisfies_bound(&self, alpha_max: f64) -> bool {
        norm(&self.delta) <= norm(&self.coordinate_bounds(alpha_max))
    }

    pub fn alpha_stats(&self) -> (f64, f64, f64) {
        let n = self.outputs.len() as f64;
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for o in &self.outputs {
            lo = lo.min(o.alpha);
            hi = hi.max(o.alpha);
            sum += o.alpha;
        }
        (sum / n, lo, hi)
    }
}

impl InnerLoopState {
    pub fn new(theta: Vec<f64>, config: InnerConfig) -> Result<Self> {
        config.validate()?;
        let d = theta.len();
        Ok(Self {
            theta,
            m: vec![0.0; d],
            v: vec![0.0; d],
            diag: DiagnosticState::new(config.diag)?,
            t: 0,
            horizon: config.steps,
            config,
        })
    }

    pub fn config(&self) -> &InnerConfig {
        &self.config
    }

    /// Updates moments and diagnostics with `(g, loss)`, then applies the
    /// learned update. On error the state is unchanged.
    pub fn step(&mut self, g: &[f64], loss: f64, meta: &MetaOptimizer) -> Result<InnerUpdate> {
        let d = self.theta.len();
        check_dims(d, g.len())?;
        ensure_finite("gradient", g)?;
        if self.t >= self.horizon {
            return Err(Error::config(format!("inner loop already ran its {} steps", self.horizon)));
        }
        let cfg = self.config;
        let m: Vec<f64> = self.m.iter().zip(g).map(|(mi, gi)| cfg.gamma * mi + (1.0 - cfg.gamma) * gi).collect();
        let v: Vec<f64> = self.v.iter().zip(g).map(|(vi, gi)| cfg.eta * vi + (1.0 - cfg.eta) * gi * gi).collect();
        let mut diag = self.diag.clone();
        diag.observe_loss(loss)?;
        diag.observe_direction(g, &m)?;
        let snapshot = diag.snapshot();
        let corrected = directional_correction(g, &m, snapshot.s, cfg.tau, meta.epsilon)?;

        let mut update = InnerUpdate {
            delta: Vec::with_capacity(d),
            outputs: Vec::with_capacity(d),
            normalized_grad: Vec::with_capacity(d),
            normalized_corrected: Vec::with_capacity(d),
            snapshot,
        };
        for i in 0..d {
            let out = meta.output(&features(g[i], v[i], &snapshot))?;
            let scale = v[i].sqrt() + meta.epsilon;
            let gn = g[i] / scale;
            let gcn = corrected[i] / scale;
            update.delta.push(-(out.alpha * (out.omega * gn + out.zeta * gcn)));
            update.outputs.push(out);
            update.normalized_grad.push(gn);
            update.normalized_corrected.push(gcn);
        }
        ensure_finite("inner update", &update.delta)?;

        for (p, dp) in self.theta.iter_mut().zip(&update.delta) {
            *p += dp;
        }
        self.m = m;
        self.v = v;
        self.diag = diag;
        self.t += 1;
        Ok(update)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaTaskKind {
    /// `1/2 sum_i h_i (theta_i - opt_i)^2` with additive Gaussian gradient noise.
    NoisyQuadratic,
    /// Least squares on a fixed design whose column scales are `sqrt(h_i)`;
    /// gradients come from random minibatches of the design.
    Regression,
}

/// One sampled task. Gradient noise is a deterministic function of
/// `(seed, step)`, so repeated evaluations of a task see the same noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: MetaTaskKind,
    pub dimension: usize,
    pub curvature: Vec<f64>,
    pub optimum: Vec<f64>,
    pub grad_noise_std: f64,
    pub seed: u64,
    design: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

const REGRESSION_ROWS: usize = 32;
const REGRESSION_BATCH: usize = 8;

impl TaskSpec {
    pub fn new(
        kind: MetaTaskKind,
        curvature: Vec<f64>,
        optimum: Vec<f64>,
        grad_noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        check_dims(curvature.len(), optimum.len())?;
        if curvature.is_empty() || curvature.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::config("task curvature entries must be positive"));
        }
        if !(grad_noise_std >= 0.0 && grad_noise_std.is_finite()) {
            return Err(Error::config("gradient noise std must be nonnegative"));
        }
        ensure_finite("task optimum", &optimum)?;
        let dimension = curvature.len();
        let (design, targets) = match kind {
            MetaTaskKind::NoisyQuadratic => (Vec::new(), Vec::new()),
            MetaTaskKind::Regression => {
                let mut rng = rng_from(&[seed, 0xde5]);
                let design: Vec<Vec<f64>> = (0..REGRESSION_ROWS)
                    .map(|_| {
                        curvature
                            .iter()
                            .map(|h| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                h.sqrt() * z
                            })
                            .collect()
                    })
                    .collect();
                let targets = design
                    .iter()
                    .map(|x| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        crate::dot(x, &optimum) + grad_noise_std * noise
                    })
                    .collect();
                (design, targets)
            }
        };
        Ok(Self {
            kind,
            dimension,
            curvature,
            optimum,
            grad_noise_std,
            seed,
            design,
            targets,
        })
    }

    pub fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.dimension]
    }

    /// Exact task loss (full design for regression).
    pub fn loss(&self, theta: &[f64]) -> f64 {
        match self.kind {
            MetaTaskKind::NoisyQuadratic => {
                0.5 * self
                    .curvature
                    .iter()
                    .zip(theta.iter().zip(&self.optimum))
                    .map(|(h, (t, o))| h * (t - o) * (t - o))
                    .sum::<f64>()
            }
            MetaTaskKind::Regression => {
                let n = self.design.len() as f64;
                self.design
                    .iter()
                    .zip(&self.targets)
                    .map(|(x, y)| 0.5 * (crate::dot(x, theta) - y).powi(2))
                    .sum::<f64>()
                    / n
            }
        }
    }

    /// Stochastic loss and gradient at inner step `step`.
    pub fn sample(&self, theta: &[f64], step: usize) -> Result<(f64, Vec<f64>)> {
        check_dims(self.dimension, theta.len())?;
        let mut rng = rng_from(&[self.seed, step as u64, 0x9a7]);
        match self.kind {
            MetaTaskKind::NoisyQuadratic => {
                let mut loss = self.loss(theta);
                let mut grad = Vec::with_capacity(self.dimension);
                for ((h, t), o) in self.curvature.iter().zip(theta).zip(&self.optimum) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let xi = self.grad_noise_std * z;
                    loss += xi * (t - o);
                    grad.push(h * (t - o) + xi);
                }
                Ok((loss, grad))
            }
            MetaTaskKind::Regression => {
                let mut loss = 0.0;
                let mut grad = vec![0.0; self.dimension];
                for _ in 0..REGRESSION_BATCH {
                    let row = rand::Rng::random_range(&mut rng, 0..self.design.len());
                    let x = &self.design[row];
                    let r = crate::dot(x, theta) - self.targets[row];
                    loss += 0.5 * r * r / REGRESSION_BATCH as f64;
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g += r * xi / REGRESSION_BATCH as f64;
                    }
                }
                Ok((loss, grad))
            }
        }
    }
}

/// Distribution over tasks: curvatures log-uniform in
/// `[curvature_min, curvature_max]`, optimum entries `N(0, optimum_std^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskDistribution {
    pub kind: MetaTaskKind,
    pub dimension: usize,
    pub curvature_min: f64,
    pub curvature_max: f64,
    pub optimum_std: f64,
    pub grad_noise_std: f64,
}

impl Default for TaskDistribution {
    fn default() -> Self {
        Self {
            kind: MetaTaskKind::NoisyQuadratic,
            dimension: 10,
            curvature_min: 0.1,
            curvature_max: 10.0,
            optimum_std: 1.0,
            grad_noise_std: 0.1,
        }
    }
}

impl TaskDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::config("task dimension must be at least 1"));
        }
        if !(self.curvature_min > 0.0 && self.curvature_max >= self.curvature_min && self.curvature_max.is_finite()) {
            return Err(Error::config("curvature range must satisfy 0 < min <= max"));
        }
        if !(self.optimum_std >= 0.0 && self.grad_noise_std >= 0.0) {
            return Err(Error::config("task standard deviations must be nonnegative"));
        }
        Ok(())
    }

    pub fn sample(&self, seed: u64) -> Result<TaskSpec> {
        self.validate()?;
        let mut rng = rng_from(&[seed, 0x7a5c]);
        let (lo, hi) = (self.curvature_min.ln(), self.curvature_max.ln());
        let curvature = (0..self.dimension)
            .map(|_| {
                let u: f64 = rand::Rng::random(&mut rng);
                (lo + u * (hi - lo)).exp()
            })
            .collect();
        let optimum = (0..self.dimension)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.optimum_std * z
            })
            .collect();
        TaskSpec::new(self.kind, curvature, optimum, self.grad_noise_std, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub theta: Vec<f64>,
    pub rows: Vec<TraceRecord>,
}

/// Runs the inner loop for `config.steps` steps from the task's initial
/// parameters and reports the exact post-adaptation loss.
pub fn adapt(task: &TaskSpec, meta: &MetaOptimizer, config: &InnerConfig) -> Result<Adaptation> {
    adapt_with(task, meta, config, true)
}

fn adapt_with(task: &TaskSpec, meta: &MetaOptimizer, config: &InnerConfig, trace: bool) -> Result<Adaptation> {
    let mut state = InnerLoopState::new(task.initial_params(), *config)?;
    let initial_loss = task.loss(&state.theta);
    let mut rows = Vec::new();
    for t in 0..config.steps {
        let (loss, g) = task.sample(&state.theta, t)?;
        let upd = state.step(&g, loss, meta)?;
        if trace {
            let (mean, lo, hi) = upd.alpha_stats();
            let mut row = TraceRecord::with_diagnostics(t as u64, loss, &upd.snapshot);
            row.true_loss = Some(task.loss(&state.theta));
            row.update_norm = norm(&upd.delta);
            row.alpha_meta_mean = Some(mean);
            row.alpha_meta_min = Some(lo);
            row.alpha_meta_max = Some(hi);
            rows.push(row);
        }
    }
    let final_loss = task.loss(&state.theta);
    ensure_finite("post-adaptation loss", &[final_loss])?;
    Ok(Adaptation {
        initial_loss,
        final_loss,
        theta: state.theta,
        rows,
    })
}

/// Plain SGD with a fixed rate on the same task and noise stream.
pub fn adapt_sgd(task: &TaskSpec, lr: f64, steps: usize) -> Result<f64> {
    let mut theta = task.initial_params();
    for t in 0..steps {
        let (_, g) = task.sample(&theta, t)?;
        for (p, gi) in theta.iter_mut().zip(&g) {
            *p -= lr * gi;
        }
    }
    let loss = task.loss(&theta);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Ok(f64::INFINITY)
    }
}

/// Mean post-adaptation loss over `tasks`.
pub fn meta_loss(tasks: &[TaskSpec], meta: &MetaOptimizer, config: &InnerConfig) -> Result<f64> {
    let mut total = 0.0;
    for task in tasks {
        total += adapt_with(task, meta, config, false)?.final_loss;
    }
    Ok(total / tasks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsConfig {
    /// Meta-iterations.
    pub iterations: usize,
    /// Antithetic pairs per iteration (population is twice this).
    pub pairs: usize,
    pub sigma: f64,
    pub learning_rate: f64,
    /// ES gradient estimates longer than this are rescaled to it.
    pub max_grad_norm: f64,
    pub tasks_per_iteration: usize,
    pub validation_tasks: usize,
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            pairs: 8,
            sigma: 0.05,
            learning_rate: 0.02,
            max_grad_norm: 10.0,
            tasks_per_iteration: 16,
            validation_tasks: 32,
            validate_every: 10,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.pairs == 0 || self.tasks_per_iteration == 0 || self.validation_tasks == 0 {
            return Err(Error::config("ES budget, pairs and task counts must be positive"));
        }
        if self.validate_every == 0 {
            return Err(Error::config("validate_every must be positive"));
        }
        if !(self.sigma >= 0.0 && self.learning_rate >= 0.0 && self.max_grad_norm > 0.0) {
            return Err(Error::config("ES sigma and learning rate must be nonnegative"));
        }
        Ok(())
    }
}

/// Statistics of one meta-iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaIteration {
    pub iteration: usize,
    /// Mean of the perturbed training losses.
    pub train_loss: f64,
    /// Validation meta-loss, when evaluated this iteration.
    pub validation_loss: Option<f64>,
    pub grad_norm: f64,
    pub skipped_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct MetaTraining {
    /// Meta-optimizer with the lowest validation loss seen (the initial one included).
    pub best: MetaOptimizer,
    pub best_validation_loss: f64,
    pub initial_validation_loss: f64,
    pub history: Vec<MetaIteration>,
}

/// Seeds of the fixed validation tasks used by [`meta_train`].
pub fn validation_seeds(config: &EsConfig) -> Vec<u64> {
    (0..config.validation_tasks as u64)
        .map(|j| mix(&[config.seed, 0x7a1d, j]))
        .collect()
}

fn antithetic_direction(config: &EsConfig, iteration: usize, pair: usize, dim: usize) -> Vec<f64> {
    let mut rng = rng_from(&[config.seed, iteration as u64, pair as u64, 0xe5]);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Evaluates each item, in parallel when the `parallel` feature is on;
/// results keep the input order either way.
fn map_ordered<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Antithetic-ES meta-training of `initial` on tasks drawn from `tasks`.
pub fn meta_train(
    initial: &MetaOptimizer,
    tasks: &TaskDistribution,
    inner: &InnerConfig,
    config: &EsConfig,
) -> Result<MetaTraining> {
    config.validate()?;
    inner.validate()?;
    let validation: Vec<TaskSpec> = validation_seeds(config)
        .into_iter()
        .map(|s| tasks.sample(s))
        .collect::<Result<_>>()?;

    let mut phi = initial.params();
    let initial_validation_loss = meta_loss(&validation, initial, inner)?;
    let mut best = (initial.clone(), initial_validation_loss);
    let mut history = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let batch: Vec<TaskSpec> = (0..config.tasks_per_iteration as u64)
            .map(|j| tasks.sample(mix(&[config.seed, it as u64, j, 0x7b])))
            .collect::<Result<_>>()?;
        let directions: Vec<Vec<f64>> = (0..config.pairs)
            .map(|p| antithetic_direction(config, it, p, phi.len()))
            .collect();

        let mut grad = vec![0.0; phi.len()];
        let mut used = 0usize;
        let mut train_total = 0.0;
        if config.sigma > 0.0 {
            let evals = map_ordered(&directions, |u| -> Result<(f64, f64)> {
                let shifted = |sign: f64| -> Result<f64> {
                    let p: Vec<f64> = phi.iter().zip(u).map(|(x, ui)| x + sign * config.sigma * ui).collect();
                    let loss = meta_loss(&batch, &initial.with_params(&p)?, inner)?;
                    ensure_finite("meta-loss", &[loss])?;
                    Ok(loss)
                };
                Ok((shifted(1.0)?, shifted(-1.0)?))
            });
            for (pair, (u, eval)) in directions.iter().zip(evals).enumerate() {
                match eval {
                    Ok((plus, minus)) => {
                        let w = (plus - minus) / (2.0 * config.sigma);
                        for (g, ui) in grad.iter_mut().zip(u) {
                            *g += w * ui;
                        }
                        train_total += 0.5 * (plus + minus);
                        used += 1;
                    }
                    Err(e) => warn!("meta-iteration {it}: skipping perturbation pair {pair}: {e}"),
                }
            }
        }
        if used > 0 {
            for g in &mut grad {
                *g /= used as f64;
            }
        }
        let mut grad_norm = norm(&grad);
        if grad_norm > config.max_grad_norm {
            let scale = config.max_grad_norm / grad_norm;
            grad.iter_mut().for_each(|g| *g *= scale);
            grad_norm = config.max_grad_norm;
        }
        for (p, g) in phi.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }

        let mut validation_loss = None;
        if (it + 1) % config.validate_every == 0 || it + 1 == config.iterations {
            let candidate = initial.with_params(&phi)?;
            match meta_loss(&validation, &candidate, inner) {
                Ok(loss) if loss.is_finite() => {
                    validation_loss = Some(loss);
                    if loss < best.1 {
                        best = (candidate, loss);
                    }
                }
                Ok(_) | Err(_) => warn!("meta-iteration {it}: validation failed"),
            }
        }
        history.push(MetaIteration {
            iteration: it,
            train_loss: if used > 0 { train_total / used as f64 } else { f64::NAN },
            validation_loss,
            grad_norm,
            skipped_pairs: config.pairs - used,
        });
    }

    Ok(MetaTraining {
        best: best.0,
        best_validation_loss: best.1,
        initial_validation_loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layer;
    use proptest::prelude::*;

    fn zero_meta() -> MetaOptimizer {
        MetaOptimizer::zeros(&[16, 16], 0.4, 1e-8).unwrap()
    }

    /// Single linear layer with fixed output biases: constant omega, zeta, alpha.
    fn constant_meta(omega_raw: f64, zeta_raw: f64, alpha_raw: f64, alpha_max: f64) -> MetaOptimizer {
        let net = DenseNet::from_layers(vec![Layer {
            inputs: NUM_FEATURES,
            outputs: 3,
            weights: vec![0.0; 3 * NUM_FEATURES],
            bias: vec![omega_raw, zeta_raw, alpha_raw],
            activation: Activation::Identity,
        }])
        .unwrap();
        MetaOptimizer::from_net(net, alpha_max, 1e-8).unwrap()
    }

    #[test]
    fn feature_examples() {
        let zero = DiagnosticSnapshot::default();
        assert_eq!(features(0.0, 0.0, &zero), [0.0; 5]);
        let snap = DiagnosticSnapshot { b: 0.3, nu: 0.5, s: -0.2, ..Default::default() };
        let a = features(1.5, 2.0, &snap);
        let b = features(1.5, 2.0, &snap);
        let c = features(-7.0, 0.1, &snap);
        assert_eq!(a, b);
        assert_eq!(a[2..], c[2..]);
        assert!(a.iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn zero_network_does_not_move() {
        let meta = zero_meta();
        let out = meta.output(&[0.3; 5]).unwrap();
        assert_eq!((out.omega, out.zeta, out.alpha), (0.0, 0.0, 0.2));
        let task = TaskDistribution::default().sample(4).unwrap();
        let res = adapt(&task, &meta, &InnerConfig::default()).unwrap();
        assert_eq!(res.final_loss, res.initial_loss);
        assert_eq!(res.rows.len(), 10);
    }

    #[test]
    fn horizon_must_be_positive() {
        let task = TaskDistribution::default().sample(4).unwrap();
        let cfg = InnerConfig { steps: 0, ..Default::default() };
        assert!(adapt(&task, &zero_meta(), &cfg).is_err());
    }

    #[test]
    fn omega_only_is_normalized_gradient_descent() {
        // omega = tanh(20) (1 to double precision), zeta = 0.
        let meta = constant_meta(20.0, 0.0, 0.0, 0.2);
        let mut st = InnerLoopState::new(vec![1.0, -2.0], InnerConfig::default()).unwrap();
        let g = [0.5, -4.0];
        let upd = st.step(&g, 1.0, &meta).unwrap();
        for (&gi, &di) in g.iter().zip(&upd.delta) {
            let v = 0.1 * gi * gi;
            let want = -0.1 * gi / (v.sqrt() + 1e-8);
            assert!((di - want).abs() < 1e-12);
        }
        // sign-consistent: every coordinate moves against its gradient
        assert!(upd.delta.iter().zip(&g).all(|(d, gi)| d * gi < 0.0));
    }

    #[test]
    fn fixed_step_matches_closed_form_on_noiseless_quadratic() {
        // 1-D quadratic h/2 (x - 1)^2 from x = 0 with a constant normalized step:
        // dx = a |g| / (sqrt(v) + eps) sign(-g). Oracle: iterate the closed-form
        // recurrences for v and x independently of the inner-loop machinery.
        let h = 0.5;
        let task = TaskSpec::new(MetaTaskKind::NoisyQuadratic, vec![h], vec![1.0], 0.0, 0).unwrap();
        let meta = constant_meta(20.0, 0.0, -1.0, 0.3);
        let alpha = 0.3 * sigmoid(-1.0);
        let cfg = InnerConfig::default();
        let res = adapt(&task, &meta, &cfg).unwrap();
        let (mut x, mut v) = (0.0f64, 0.0f64);
        for row in &res.rows {
            let g = h * (x - 1.0);
            v = cfg.eta * v + (1.0 - cfg.eta) * g * g;
            x -= alpha * 20f64.tanh() * g / (v.sqrt() + 1e-8);
            let want = 0.5 * h * (x - 1.0) * (x - 1.0);
            assert!((row.true_loss.unwrap() - want).abs() < 1e-12);
        }
        assert!(res.final_loss < res.initial_loss);
    }

    #[test]
    fn serialization_roundtrip_and_errors() {
        let mut rng = rng_from(&[3]);
        let meta = MetaOptimizer::new(&[16, 16], 0.5, 1e-8, &mut rng).unwrap();
        let text = meta.to_text();
        assert!(text.starts_with("errdiag-meta-optimizer 1\ndims 5 16 16 3\nactivations tanh tanh identity\n"));
        assert_eq!(MetaOptimizer::from_text(&text).unwrap(), meta);
        let wrong_version = text.replacen("errdiag-meta-optimizer 1", "errdiag-meta-optimizer 2", 1);
        assert!(matches!(MetaOptimizer::from_text(&wrong_version), Err(Error::Format(_))));
        let truncated: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(MetaOptimizer::from_text(&truncated).is_err());
    }

    #[test]
    fn zero_sigma_leaves_phi_unchanged() {
        let mut rng = rng_from(&[8]);
        let meta = MetaOptimizer::new(&[4], 0.3, 1e-8, &mut rng).unwrap();
        let es = EsConfig { iterations: 2, sigma: 0.0, tasks_per_iteration: 2, validation_tasks: 2, ..Default::default() };
        let out = meta_train(&meta, &TaskDistribution::default(), &InnerConfig::default(), &es).unwrap();
        assert_eq!(out.best.params(), meta.params());
        assert!(out.history.iter().all(|h| h.grad_norm == 0.0));
    }

    #[test]
    fn meta_training_is_deterministic() {
        let mut rng = rng_from(&[8]);
        let meta = MetaOptimizer::new(&[6], 0.3, 1e-8, &mut rng).unwrap();
        let es = EsConfig { iterations: 4, pairs: 3, tasks_per_iteration: 3, validation_tasks: 3, validate_every: 2, ..Default::default() };
        let a = meta_train(&meta, &TaskDistribution::default(), &InnerConfig::default(), &es).unwrap();
        let b = meta_train(&meta, &TaskDistribution::default(), &InnerConfig::default(), &es).unwrap();
        let bits = |m: &MetaOptimizer| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.best), bits(&b.best));
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn coordinate_permutation_equivariance() {
        let mut rng = rng_from(&[21]);
        let meta = MetaOptimizer::new(&[8, 8], 0.5, 1e-8, &mut rng).unwrap();
        let theta = vec![0.1, -0.5, 2.0, 0.7];
        let g = vec![1.0, -0.3, 0.05, 2.5];
        let perm = [2, 0, 3, 1];
        let permute = |x: &[f64]| perm.iter().map(|&i| x[i]).collect::<Vec<f64>>();
        let mut a = InnerLoopState::new(theta.clone(), InnerConfig::default()).unwrap();
        let mut b = InnerLoopState::new(permute(&theta), InnerConfig::default()).unwrap();
        let ua = a.step(&g, 1.0, &meta).unwrap();
        let ub = b.step(&permute(&g), 1.0, &meta).unwrap();
        for (x, y) in permute(&ua.delta).iter().zip(&ub.delta) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn regression_tasks_adapt() {
        let dist = TaskDistribution { kind: MetaTaskKind::Regression, ..Default::default() };
        let task = dist.sample(2).unwrap();
        assert!(adapt_sgd(&task, 0.05, 50).unwrap() < task.loss(&task.initial_params()));
    }

    proptest! {
        #[test]
        fn inner_updates_respect_the_bound(seed in 0u64..200, gscale in -3.0f64..3.0) {
            let mut rng = rng_from(&[seed]);
            let meta = MetaOptimizer::new(&[16, 16], 0.5, 1e-8, &mut rng).unwrap();
            let task = TaskDistribution { grad_noise_std: 10f64.powf(gscale), ..Default::default() }.sample(seed).unwrap();
            let mut st = InnerLoopState::new(task.initial_params(), InnerConfig::default()).unwrap();
            for t in 0..10 {
                let (loss, g) = task.sample(&st.theta, t).unwrap();
                let upd = st.step(&g, loss, &meta).unwrap();
                prop_assert!(upd.satisfies_bound(meta.alpha_max));
                prop_assert!(upd.outputs.iter().all(|o| o.alpha > 0.0 && o.alpha <= meta.alpha_max && o.omega.abs() <= 1.0 && o.zeta.abs() <= 1.0));
            }
        }
    }
}
