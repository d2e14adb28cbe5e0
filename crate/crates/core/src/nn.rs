//! Fully-connected conditioner networks and the moment-adaptive optimizer.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// How the last linear layer of an [`Mlp`] is initialized.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputInit {
    /// Zero weights, zero bias.
    Zero,
    /// Zero weights with the given bias.
    Bias(Vec<f64>),
    /// Kaiming-uniform weights scaled by the factor, uniform bias of the
    /// same bound.
    Random(f64),
}

/// A stack of linear layers with a hidden activation. `layers` counts
/// linear layers, so `layers = 3` is `in -> units -> units -> out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    pub fn new(
        prefix: impl Into<String>,
        input: usize,
        units: usize,
        layers: usize,
        output: usize,
        activation: Activation,
    ) -> Result<Self> {
        if layers == 0 || input == 0 || output == 0 || (layers > 1 && units == 0) {
            return Err(Error::invalid(format!(
                "mlp needs positive sizes (in {input}, units {units}, layers {layers}, out {output})"
            )));
        }
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(units, layers - 1));
        sizes.push(output);
        Ok(Mlp {
            prefix: prefix.into(),
            sizes,
            activation,
        })
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    /// Hidden layers use Kaiming-uniform weights (bound `sqrt(6 / fan_in)`)
    /// and uniform biases in `±1/sqrt(fan_in)`.
    pub fn register(&self, store: &mut ParameterStore, rng: &mut Rng, last: &OutputInit) -> Result<()> {
        let n = self.num_layers();
        for l in 0..n {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w_bound = (6.0 / fan_in as f64).sqrt();
            let b_bound = 1.0 / (fan_in as f64).sqrt();
            let (w, b) = if l + 1 < n {
                (
                    uniform(rng, fan_in * fan_out, w_bound),
                    uniform(rng, fan_out, b_bound),
                )
            } else {
                match last {
                    OutputInit::Zero => (vec![0.0; fan_in * fan_out], vec![0.0; fan_out]),
                    OutputInit::Bias(bias) => {
                        if bias.len() != fan_out {
                            return Err(Error::shape(
                                "mlp bias init",
                                format!("expected {fan_out} entries, got {}", bias.len()),
                            ));
                        }
                        (vec![0.0; fan_in * fan_out], bias.clone())
                    }
                    OutputInit::Random(scale) => (
                        uniform(rng, fan_in * fan_out, w_bound * scale),
                        uniform(rng, fan_out, b_bound * scale),
                    ),
                }
            };
            store.insert(self.weight_name(l), Tensor::matrix(fan_in, fan_out, w)?, true)?;
            store.insert(self.bias_name(l), Tensor::vector(b), true)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = self.num_layers();
        let mut h = x;
        for l in 0..n {
            let w = g.param(&self.weight_name(l))?;
            let b = g.param(&self.bias_name(l))?;
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if l + 1 < n {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        Ok(h)
    }
}

fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Adam with bias correction. The learning rate is passed per step so an
/// external schedule can drive it.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: store.slots().iter().map(|s| vec![0.0; s.value.len()]).collect(),
            second: store.slots().iter().map(|s| vec![0.0; s.value.len()]).collect(),
            steps: 0,
        }
    }

    /// Descends along `grads` (gradients of the quantity being minimized).
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, slot) in store.slots_mut().iter_mut().enumerate() {
            if !slot.trainable {
                continue;
            }
            let g = grads.by_slot(i).data();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in slot.value.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}
