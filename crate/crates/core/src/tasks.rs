//! Synthetic supervised problems with drift, regime shifts and bad
//! conditioning.
//!
//! Quadratic kinds have population loss `1/2 (theta - opt)^T H (theta - opt)`.
//! A minibatch draws noise vectors `xi_j ~ N(0, noise_std^2 I)` and its loss is
//! the population loss plus `mean(xi)^T (theta - opt)`, so sampled losses and
//! gradients are unbiased and vanish at the optimum. The regression kind
//! draws `x ~ N(0, I)` and `y = w^T x + N(0, noise_std^2)`, with `w` flipping
//! sign at `shift_step`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::{check_dims, dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedKind {
    /// Identity curvature; the optimum moves `drift_rate` per step along a
    /// fixed unit direction.
    DriftingQuadratic,
    /// Linear regression whose true weights change sign at `shift_step`.
    RegimeShiftRegression,
    /// Rotated quadratic with eigenvalues log-spaced in `[1, condition_number]`.
    IllConditionedValley,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedTask {
    pub kind: SupervisedKind,
    pub dimension: usize,
    pub drift_rate: f64,
    pub shift_step: u64,
    pub noise_std: f64,
    pub condition_number: f64,
    pub seed: u64,
}

impl Default for SupervisedTask {
    fn default() -> Self {
        Self {
            kind: SupervisedKind::DriftingQuadratic,
            dimension: 10,
            drift_rate: 0.0,
            shift_step: 1000,
            noise_std: 0.0,
            condition_number: 100.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    /// Regression targets; empty for the quadratic kinds.
    pub targets: Vec<f64>,
}

/// A task with its seeded geometry materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    def: SupervisedTask,
    /// Optimum at step 0 (regression: pre-shift weights).
    base: Vec<f64>,
    /// Unit drift direction.
    direction: Vec<f64>,
    /// Valley eigenvalues and the rows of its rotation (eigenvectors).
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<Vec<f64>>,
}

impl SupervisedTask {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::config("task dimension must be at least 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("task noise_std must be nonnegative"));
        }
        if !(self.condition_number >= 1.0 && self.condition_number.is_finite()) {
            return Err(Error::config("task condition_number must be at least 1"));
        }
        if !self.drift_rate.is_finite() {
            return Err(Error::config("task drift_rate must be finite"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Problem> {
        self.validate()?;
        let d = self.dimension;
        let mut rng = rng_from(&[self.seed, 0x9e0]);
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let base = gauss(d);
        let direction = unit(gauss(d));
        let (eigenvalues, eigenvectors) = match self.kind {
            SupervisedKind::IllConditionedValley => {
                let eig = (0..d)
                    .map(|i| {
                        let frac = if d == 1 { 0.0 } else { i as f64 / (d - 1) as f64 };
                        self.condition_number.powf(frac)
                    })
                    .collect();
                (eig, orthonormal_basis(d, &mut gauss))
            }
            _ => (vec![1.0; d], Vec::new()),
        };
        Ok(Problem {
            def: *self,
            base,
            direction,
            eigenvalues,
            eigenvectors,
        })
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn orthonormal_basis(d: usize, gauss: &mut impl FnMut(usize) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gauss(d);
        for b in &basis {
            let p = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        if norm(&v) > 1e-6 {
            basis.push(unit(v));
        }
    }
    basis
}

impl Problem {
    pub fn definition(&self) -> &SupervisedTask {
        &self.def
    }

    pub fn dimension(&self) -> usize {
        self.def.dimension
    }

    /// Starting parameters: the origin.
    pub fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.def.dimension]
    }

    /// Minimizer of the population loss at `step`.
    pub fn optimum(&self, step: u64) -> Vec<f64> {
        match self.def.kind {
            SupervisedKind::DriftingQuadratic => {
                let shift = self.def.drift_rate * step as f64;
                self.base.iter().zip(&self.direction).map(|(b, u)| b + shift * u).collect()
            }
            SupervisedKind::RegimeShiftRegression => {
                if step >= self.def.shift_step {
                    self.base.iter().map(|w| -w).collect()
                } else {
                    self.base.clone()
                }
            }
            SupervisedKind::IllConditionedValley => self.base.clone(),
        }
    }

    /// `H (theta - opt)` together with `1/2 (theta - opt)^T H (theta - opt)`.
    fn quadratic(&self, theta: &[f64], step: u64) -> (f64, Vec<f64>, Vec<f64>) {
        let diff: Vec<f64> = theta.iter().zip(self.optimum(step)).map(|(t, o)| t - o).collect();
        match self.def.kind {
            SupervisedKind::IllConditionedValley => {
                let proj: Vec<f64> = self.eigenvectors.iter().map(|q| dot(q, &diff)).collect();
                let loss = 0.5 * proj.iter().zip(&self.eigenvalues).map(|(p, l)| l * p * p).sum::<f64>();
                let mut grad = vec![0.0; diff.len()];
                for ((q, l), p) in self.eigenvectors.iter().zip(&self.eigenvalues).zip(&proj) {
                    for (g, qi) in grad.iter_mut().zip(q) {
                        *g += l * p * qi;
                    }
                }
                (loss, grad, diff)
            }
            _ => (0.5 * dot(&diff, &diff), diff.clone(), diff),
        }
    }

    /// Draws a minibatch for `step`. Batches are keyed by (task seed, `seed`,
    /// `step`) and independent of call order.
    pub fn sample_batch(&self, step: u64, batch_size: usize, seed: u64) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        let d = self.def.dimension;
        let mut rng = rng_from(&[self.def.seed, seed, step, 0xba7c]);
        let noise = Normal::new(0.0, self.def.noise_std).expect("validated std");
        match self.def.kind {
            SupervisedKind::RegimeShiftRegression => {
                let w = self.optimum(step);
                let mut batch = Batch::default();
                for _ in 0..batch_size {
                    let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let eps = if self.def.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    batch.targets.push(dot(&w, &x) + eps);
                    batch.inputs.push(x);
                }
                Ok(batch)
            }
            _ => {
                let inputs = (0..batch_size)
                    .map(|_| {
                        (0..d)
                            .map(|_| if self.def.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                            .collect()
                    })
                    .collect();
                Ok(Batch { inputs, targets: Vec::new() })
            }
        }
    }

    /// Minibatch loss and gradient at `theta`.
    pub fn batch_loss_grad(&self, theta: &[f64], step: u64, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        check_dims(self.def.dimension, theta.len())?;
        if batch.inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = batch.inputs.len() as f64;
        match self.def.kind {
            SupervisedKind::RegimeShiftRegression => {
                check_dims(batch.inputs.len(), batch.targets.len())?;
                let mut loss = 0.0;
                let mut grad = vec![0.0; theta.len()];
                for (x, y) in batch.inputs.iter().zip(&batch.targets) {
                    check_dims(theta.len(), x.len())?;
                    let r = dot(theta, x) - y;
                    loss += 0.5 * r * r;
                    for (g, xi) in grad.iter_mut().zip(x) {
                        *g += r * xi / n;
                    }
                }
                Ok((loss / n, grad))
            }
            _ => {
                let (mut loss, mut grad, diff) = self.quadratic(theta, step);
                for xi in &batch.inputs {
                    check_dims(theta.len(), xi.len())?;
                    loss += dot(xi, &diff) / n;
                    for (g, x) in grad.iter_mut().zip(xi) {
                        *g += x / n;
                    }
                }
                Ok((loss, grad))
            }
        }
    }

    /// Exact population loss at `step`.
    pub fn loss_oracle(&self, theta: &[f64], step: u64) -> Result<f64> {
        check_dims(self.def.dimension, theta.len())?;
        Ok(match self.def.kind {
            SupervisedKind::RegimeShiftRegression => {
                let w = self.optimum(step);
                let d2: f64 = theta.iter().zip(&w).map(|(t, wi)| (t - wi).powi(2)).sum();
                0.5 * d2 + 0.5 * self.def.noise_std.powi(2)
            }
            _ => self.quadratic(theta, step).0,
        })
    }

    /// Random point at distance `radius` from the step-0 optimum.
    pub fn perturbed_start(&self, radius: f64, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(&[self.def.seed, seed, 0x57a]);
        let dir = unit((0..self.def.dimension).map(|_| rng.sample(StandardNormal)).collect());
        self.optimum(0).iter().zip(&dir).map(|(o, u)| o + radius * u).collect()
    }
}
