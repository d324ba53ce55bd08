//! Small fully connected networks with hand-written backward passes.
//!
//! Everything is `f64`. Parameters flatten layer by layer, weights (row-major,
//! `outputs x inputs`) before biases.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::check_dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softplus,
    Sigmoid,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and the activation value `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "identity" => Activation::Identity,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "softplus" => Activation::Softplus,
            "sigmoid" => Activation::Sigmoid,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(1/B) sum_j 1/2 |f(x_j) - y_j|^2`; no stray factor 2 in the gradient.
    Mse,
    /// Binary cross-entropy on logits: `(1/B) sum_j sum_k softplus(z) - y z`.
    /// The network's last layer should be linear; the sigmoid lives in the loss.
    Logistic,
}

/// Location of one layer's parameters inside a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlot {
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// All parameters of a network as one contiguous vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub layout: Vec<LayerSlot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl DenseNet {
    /// Randomly initialized network; weights and biases are drawn uniformly
    /// from `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut impl rand::Rng) -> Result<Self> {
        let mut net = Self::zeros(dims, activations)?;
        for layer in &mut net.layers {
            let bound = (1.0 / layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::config(format!(
                "network needs at least two widths and one activation per layer (dims {dims:?}, {} activations)",
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::config("network widths must be positive"));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::config(format!("layer {i} has inconsistent shapes")));
            }
            ensure_finite("network parameter", &l.weights)?;
            ensure_finite("network parameter", &l.bias)?;
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::config(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].outputs,
                    i + 1,
                    pair[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|l| {
                let weights = offset..offset + l.weights.len();
                let bias = weights.end..weights.end + l.bias.len();
                offset = bias.end;
                LayerSlot { weights, bias }
            })
            .collect()
    }

    pub fn params(&self) -> ParamVector {
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        ParamVector {
            flat,
            layout: self.layout(),
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dims(self.num_params(), flat.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// Same architecture, parameters taken from `flat`.
    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(flat)?;
        Ok(net)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.input_dim(), input.len())?;
        let mut x = input.to_vec();
        for l in &self.layers {
            x = layer_forward(l, &x).1;
        }
        Ok(x)
    }

    /// Forward pass followed by the vector-Jacobian product: returns the
    /// output and the gradient of `<out_grad, f(input)>` with respect to the
    /// flat parameters.
    pub fn vjp(&self, input: &[f64], out_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.num_params()];
        let out = self.accumulate_vjp(input, |_| Ok(out_grad.to_vec()), &mut grad, 1.0)?;
        Ok((out, grad))
    }

    /// Runs the forward pass, asks `seed` for the output gradient, and adds
    /// `scale` times the parameter gradient into `grad`.
    fn accumulate_vjp(
        &self,
        input: &[f64],
        seed: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
        grad: &mut [f64],
        scale: f64,
    ) -> Result<Vec<f64>> {
        check_dims(self.input_dim(), input.len())?;
        // (input, pre-activation, post-activation) per layer.
        let mut cache: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for l in &self.layers {
            let (pre, post) = layer_forward(l, &x);
            cache.push((x, pre, post.clone()));
            x = post;
        }
        let out = x;
        let mut upstream = seed(&out)?;
        check_dims(self.output_dim(), upstream.len())?;

        let layout = self.layout();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (inp, pre, post) = &cache[li];
            let delta: Vec<f64> = (0..l.outputs)
                .map(|o| upstream[o] * l.activation.derivative(pre[o], post[o]))
                .collect();
            let slot = &layout[li];
            let gw = &mut grad[slot.weights.clone()];
            for o in 0..l.outputs {
                let row = &mut gw[o * l.inputs..(o + 1) * l.inputs];
                for (g, &xi) in row.iter_mut().zip(inp) {
                    *g += scale * delta[o] * xi;
                }
            }
            for (g, d) in grad[slot.bias.clone()].iter_mut().zip(&delta) {
                *g += scale * d;
            }
            if li > 0 {
                let mut next = vec![0.0; l.inputs];
                for (row, &d) in l.weights.chunks_exact(l.inputs).zip(&delta) {
                    for (n, &w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                upstream = next;
            }
        }
        Ok(out)
    }

    /// Mean batch loss and its exact gradient with respect to all parameters.
    pub fn loss_and_grad(
        &self,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        kind: LossKind,
    ) -> Result<(f64, Vec<f64>)> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_dims(inputs.len(), targets.len())?;
        let n = inputs.len() as f64;
        let mut grad = vec![0.0; self.num_params()];
        let mut total = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            check_dims(self.output_dim(), y.len())?;
            self.accumulate_vjp(
                x,
                |out| {
                    let (loss, g) = sample_loss(out, y, kind);
                    total += loss;
                    Ok(g)
                },
                &mut grad,
                1.0 / n,
            )?;
        }
        Ok((total / n, grad))
    }

    pub fn loss(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>], kind: LossKind) -> Result<f64> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_dims(inputs.len(), targets.len())?;
        let mut total = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            check_dims(self.output_dim(), y.len())?;
            total += sample_loss(&self.forward(x)?, y, kind).0;
        }
        Ok(total / inputs.len() as f64)
    }
}

fn layer_forward(l: &Layer, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pre: Vec<f64> = (0..l.outputs)
        .map(|o| {
            let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
            l.bias[o] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        })
        .collect();
    let post = pre.iter().map(|&z| l.activation.apply(z)).collect();
    (pre, post)
}

fn sample_loss(out: &[f64], y: &[f64], kind: LossKind) -> (f64, Vec<f64>) {
    match kind {
        LossKind::Mse => {
            let diff: Vec<f64> = out.iter().zip(y).map(|(o, t)| o - t).collect();
            (0.5 * diff.iter().map(|d| d * d).sum::<f64>(), diff)
        }
        LossKind::Logistic => {
            let loss = out.iter().zip(y).map(|(&z, &t)| softplus(z) - t * z).sum();
            let grad = out.iter().zip(y).map(|(&z, &t)| sigmoid(z) - t).collect();
            (loss, grad)
        }
    }
}

/// Worst coordinate-wise disagreement between the analytic gradient and
/// central differences with step `h`. The error of each coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`: relative for
/// large entries, absolute for entries below one.
pub fn fd_check(
    net: &DenseNet,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    kind: LossKind,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = net.loss_and_grad(inputs, targets, kind)?;
    let base = net.params().flat;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_params(&p)?;
        let up = probe.loss(inputs, targets, kind)?;
        p[i] = base[i] - h;
        probe.set_params(&p)?;
        let down = probe.loss(inputs, targets, kind)?;
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;
    use proptest::prelude::*;

    fn affine(w: f64, b: f64, act: Activation) -> DenseNet {
        DenseNet::from_layers(vec![Layer {
            inputs: 1,
            outputs: 1,
            weights: vec![w],
            bias: vec![b],
            activation: act,
        }])
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let id = DenseNet::from_layers(vec![Layer {
            inputs: 2,
            outputs: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        assert_eq!(id.forward(&[0.3, -2.0]).unwrap(), vec![0.3, -2.0]);
        assert_eq!(affine(2.0, 1.0, Activation::Identity).forward(&[3.0]).unwrap(), vec![7.0]);
        let zero = DenseNet::zeros(&[3, 2], &[Activation::Tanh]).unwrap();
        assert_eq!(zero.forward(&[5.0, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(zero.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn scalar_mse_gradient() {
        let net = affine(3.0, 0.0, Activation::Identity);
        let (loss, grad) = net
            .loss_and_grad(&[vec![1.0]], &[vec![0.0]], LossKind::Mse)
            .unwrap();
        assert_eq!(loss, 4.5);
        assert_eq!(grad, vec![3.0, 3.0]); // d/dw and d/db
        let err = fd_check(&net, &[vec![1.0]], &[vec![0.0]], LossKind::Mse, 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let net = affine(2.0, 1.0, Activation::Identity);
        let (loss, grad) = net
            .loss_and_grad(&[vec![1.0], vec![-2.0]], &[vec![3.0], vec![-3.0]], LossKind::Mse)
            .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn batch_errors() {
        let net = affine(1.0, 0.0, Activation::Identity);
        assert_eq!(net.loss_and_grad(&[], &[], LossKind::Mse), Err(Error::EmptyBatch));
        assert!(net
            .loss_and_grad(&[vec![1.0]], &[vec![1.0, 2.0]], LossKind::Mse)
            .is_err());
        assert!(fd_check(&net, &[vec![1.0]], &[vec![1.0]], LossKind::Mse, 0.0).is_err());
    }

    #[test]
    fn mismatched_layers_rejected() {
        let l = |i, o| Layer {
            inputs: i,
            outputs: o,
            weights: vec![0.0; i * o],
            bias: vec![0.0; o],
            activation: Activation::Relu,
        };
        assert!(DenseNet::from_layers(vec![l(2, 3), l(4, 1)]).is_err());
        assert!(DenseNet::from_layers(vec![l(2, 3), l(3, 1)]).is_ok());
    }

    #[test]
    fn two_layer_tanh_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = rng_from(&[seed, 17]);
            let net = DenseNet::new(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], &mut rng).unwrap();
            let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ys: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let err = fd_check(&net, &xs, &ys, LossKind::Mse, 1e-6).unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn logistic_gradient() {
        let mut rng = rng_from(&[99]);
        let net = DenseNet::new(&[2, 4, 1], &[Activation::Softplus, Activation::Identity], &mut rng).unwrap();
        let xs = vec![vec![0.5, -1.0], vec![2.0, 0.1]];
        let ys = vec![vec![1.0], vec![0.0]];
        assert!(fd_check(&net, &xs, &ys, LossKind::Logistic, 1e-6).unwrap() < 1e-6);
    }

    #[test]
    fn deterministic_given_seed() {
        let build = || {
            let mut rng = rng_from(&[5]);
            DenseNet::new(&[4, 8, 3], &[Activation::Sigmoid, Activation::Tanh], &mut rng).unwrap()
        };
        let (a, b) = (build(), build());
        let x = [0.1, 0.2, -0.3, 0.4];
        let ga = a.vjp(&x, &[1.0, -1.0, 0.5]).unwrap();
        let gb = b.vjp(&x, &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(ga.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(ga.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(seed in 0u64..1000, hidden in 1usize..6) {
            let mut rng = rng_from(&[seed]);
            let net = DenseNet::new(&[2, hidden, 3], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
            let p = net.params();
            prop_assert_eq!(p.flat.len(), net.num_params());
            prop_assert_eq!(p.layout.last().unwrap().bias.end, p.flat.len());
            let rebuilt = DenseNet::zeros(&net.dims(), &net.activations()).unwrap().with_params(&p.flat).unwrap();
            prop_assert_eq!(rebuilt, net);
        }
    }
}
