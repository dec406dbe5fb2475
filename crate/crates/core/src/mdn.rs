//! Mixture density network mapping `[state, one-hot action]` to a return mixture.
//!
//! The weight vector is laid out layer by layer; each layer stores its
//! `out x in` matrix row-major followed by its `out` biases. The final layer
//! emits `3L` values: mixture logits, means, and pre-softplus scales.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::belief::softmax;
use crate::error::{Error, Result};
use crate::gmm::{overlap_unchecked, GmmReturn, SCALE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub state_dim: usize,
    pub n_actions: usize,
    pub hidden: Vec<usize>,
    /// Mixture components `L`.
    pub components: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

impl LayerLayout {
    pub fn span(&self) -> Range<usize> {
        self.weights.start..self.biases.end
    }
}

impl NetworkSpec {
    pub fn new(
        state_dim: usize,
        n_actions: usize,
        hidden: Vec<usize>,
        components: usize,
    ) -> Result<Self> {
        if state_dim + n_actions == 0 || n_actions == 0 {
            return Err(Error::invalid("network needs at least one action input"));
        }
        if components == 0 {
            return Err(Error::invalid(
                "network needs at least one mixture component",
            ));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(Self {
            state_dim,
            n_actions,
            hidden,
            components,
            activation: Activation::Tanh,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.n_actions
    }

    pub fn output_dim(&self) -> usize {
        3 * self.components
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.output_dim());
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let biases = weights.end..weights.end + fan_out;
                offset = biases.end;
                LayerLayout {
                    fan_in,
                    fan_out,
                    weights,
                    biases,
                }
            })
            .collect()
    }

    pub fn n_weights(&self) -> usize {
        self.layers().last().map(|l| l.biases.end).unwrap_or(0)
    }

    /// Fan-in of the layer that owns weight `index`; indices past the end map to the last layer.
    pub fn fan_in_of(&self, index: usize) -> usize {
        let layers = self.layers();
        layers
            .iter()
            .find(|l| l.span().contains(&index))
            .unwrap_or_else(|| layers.last().expect("at least one layer"))
            .fan_in
    }

    pub fn encode(&self, state: &[f64], action: usize) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                what: "state features",
                expected: self.state_dim,
                actual: state.len(),
            });
        }
        if action >= self.n_actions {
            return Err(Error::invalid(format!(
                "action {action} out of range for {} actions",
                self.n_actions
            )));
        }
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(state);
        input.extend((0..self.n_actions).map(|a| if a == action { 1.0 } else { 0.0 }));
        Ok(input)
    }

    fn check_weights(&self, weights: &[f64]) -> Result<()> {
        let expected = self.n_weights();
        // Trailing moment features that do not map onto a weight are ignored.
        if weights.len() < expected {
            return Err(Error::DimensionMismatch {
                what: "network weights",
                expected,
                actual: weights.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer; index 0 is the input, the last is the raw head.
    fn activations(&self, weights: &[f64], input: Vec<f64>) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut acts = vec![input];
        for (li, layer) in layers.iter().enumerate() {
            let x = acts.last().expect("input present");
            let w = &weights[layer.weights.clone()];
            let b = &weights[layer.biases.clone()];
            let y: Vec<f64> = (0..layer.fan_out)
                .map(|o| {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let z = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    if li == last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
            acts.push(y);
        }
        acts
    }

    pub fn forward(&self, weights: &[f64], state: &[f64], action: usize) -> Result<GmmReturn> {
        self.check_weights(weights)?;
        let input = self.encode(state, action)?;
        let acts = self.activations(weights, input);
        Ok(self.head(acts.last().expect("head present")))
    }

    fn head(&self, raw: &[f64]) -> GmmReturn {
        let l = self.components;
        let w = softmax(&raw[..l]);
        let u = raw[l..2 * l].to_vec();
        let s = raw[2 * l..]
            .iter()
            .map(|r| softplus(*r) + SCALE_FLOOR)
            .collect();
        GmmReturn::new(w, u, s).expect("head output is a valid mixture")
    }

    /// Reverse-mode gradient of a scalar loss with respect to the weights, given
    /// its gradient with respect to the head's raw outputs.
    pub fn backward(
        &self,
        weights: &[f64],
        state: &[f64],
        action: usize,
        upstream: &HeadGradient,
    ) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        if upstream.len() != self.components {
            return Err(Error::DimensionMismatch {
                what: "head gradient components",
                expected: self.components,
                actual: upstream.len(),
            });
        }
        let input = self.encode(state, action)?;
        let acts = self.activations(weights, input);
        let layers = self.layers();
        let mut grad = vec![0.0; self.n_weights()];
        let mut delta: Vec<f64> = upstream.flat();
        for li in (0..layers.len()).rev() {
            let layer = &layers[li];
            let x = &acts[li];
            for o in 0..layer.fan_out {
                let d = delta[o];
                grad[layer.biases.start + o] += d;
                let row = layer.weights.start + o * layer.fan_in;
                for (i, xi) in x.iter().enumerate() {
                    grad[row + i] += d * xi;
                }
            }
            if li == 0 {
                break;
            }
            let w = &weights[layer.weights.clone()];
            delta = (0..layer.fan_in)
                .map(|i| {
                    let back: f64 = (0..layer.fan_out)
                        .map(|o| w[o * layer.fan_in + i] * delta[o])
                        .sum();
                    back * self.activation.slope(x[i])
                })
                .collect();
        }
        Ok(grad)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Gradient with respect to the head's raw outputs: mixture logits, means, and
/// pre-softplus scales.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub raw_scales: Vec<f64>,
}

impl HeadGradient {
    pub fn zeros(components: usize) -> Self {
        Self {
            logits: vec![0.0; components],
            means: vec![0.0; components],
            raw_scales: vec![0.0; components],
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let f = |v: &Vec<f64>| v.iter().map(|x| x * factor).collect();
        Self {
            logits: f(&self.logits),
            means: f(&self.means),
            raw_scales: f(&self.raw_scales),
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.logits
            .iter()
            .chain(&self.means)
            .chain(&self.raw_scales)
            .cloned()
            .collect()
    }
}

/// Partials of the closed-form JTD with respect to `p`'s weights, means and scales.
/// The target is held constant.
pub fn jtd_partials(p: &GmmReturn, target: &GmmReturn) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let l = p.len();
    let (mut dw, mut du, mut ds) = (vec![0.0; l], vec![0.0; l], vec![0.0; l]);
    // ∂J/∂θ_i = ½ (Σ_j w_j ∂₁[w_i O(θ_i, θ_j)] - Σ_k q_k ∂₁[w_i O(θ_i, φ_k)]).
    let mut accumulate = |other: &GmmReturn, sign: f64| {
        for i in 0..l {
            let (wi, ui, si) = (p.weights()[i], p.means()[i], p.scales()[i]);
            for k in 0..other.len() {
                let (wk, uk, sk) = (other.weights()[k], other.means()[k], other.scales()[k]);
                let var = si * si + sk * sk;
                let delta = ui - uk;
                let o = overlap_unchecked(ui, si, uk, sk);
                let c = 0.5 * sign * wk;
                dw[i] += c * o;
                du[i] += c * wi * o * (-delta / var);
                ds[i] += c * wi * o * (delta * delta / (var * var) - 1.0 / var) * si;
            }
        }
    };
    accumulate(p, 1.0);
    accumulate(target, -1.0);
    (dw, du, ds)
}

/// Gradient of `jtd(p, target)` with respect to the head parameterization of `p`
/// (softmax logits, means, pre-softplus scales).
pub fn jtd_gradient(p: &GmmReturn, target: &GmmReturn) -> HeadGradient {
    let (dw, du, ds) = jtd_partials(p, target);
    let w = p.weights();
    let avg: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
    let logits = w.iter().zip(&dw).map(|(wi, gi)| wi * (gi - avg)).collect();
    // σ = softplus(r) + floor, so dσ/dr = 1 - exp(-(σ - floor)).
    let raw_scales = p
        .scales()
        .iter()
        .zip(&ds)
        .map(|(s, g)| g * -(-(s - SCALE_FLOOR)).exp_m1())
        .collect();
    HeadGradient {
        logits,
        means: du,
        raw_scales,
    }
}
