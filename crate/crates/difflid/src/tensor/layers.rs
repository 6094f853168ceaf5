//! Named parameters and small layer building blocks.

use std::sync::Arc;

use crate::error::Result;
use crate::Real;

use super::core::Tensor;
use super::graph::{Graph, Var};
use super::rng::Rng;

/// A named, trainable tensor. Freezing keeps it in the forward pass but
/// excludes it from gradients and optimizer updates.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut value: Tensor) -> Self {
        value.requires_grad = true;
        Parameter { name: name.into(), value, frozen: false }
    }

    /// Identity of the current value buffer; used to dedup registration.
    pub(crate) fn buffer_id(&self) -> usize {
        let arc: &Arc<Vec<Real>> = self.value.buffer();
        Arc::as_ptr(arc) as usize
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Uniform init with bound sqrt(1/fan_in).
pub fn init_conv_weight(c_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let bound = (1.0 / fan_in).sqrt();
    Tensor::rand_uniform(&[c_out, c_in, k, k], -bound, bound, rng)
}

/// Linear weights are stored `[in, out]` so the forward pass is a plain
/// row-major matmul.
pub fn init_linear_weight(n_in: usize, n_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (1.0 / n_in as f64).sqrt();
    Tensor::rand_uniform(&[n_in, n_out], -bound, bound, rng)
}

#[derive(Debug)]
pub struct Conv2dLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        Conv2dLayer {
            weight: Parameter::new(format!("{name}.weight"), init_conv_weight(c_out, c_in, k, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    /// Zero-initialized variant, used where a block should start as an
    /// identity contribution.
    pub fn new_zero(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2dLayer {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in, k, k])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), init_linear_weight(n_in, n_out, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[n_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias1d(y, b)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug)]
pub struct GroupNormLayer {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        GroupNormLayer {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gam = g.param(&self.gamma);
        let bet = g.param(&self.beta);
        g.group_norm(x, gam, bet, self.groups)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Freeze every parameter in a collection.
pub fn freeze_all(params: &mut [&mut Parameter]) {
    for p in params {
        p.frozen = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::Graph;

    #[test]
    fn registering_a_parameter_twice_reuses_the_node() {
        let mut rng = Rng::new(3);
        let p = Parameter::new("w", Tensor::randn(&[2, 2], &mut rng));
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut rng = Rng::new(4);
        let mut p = Parameter::new("w", Tensor::randn(&[3], &mut rng));
        p.frozen = true;
        let mut g = Graph::new();
        let v = g.param(&p);
        let loss = g.mean_squared(v).unwrap();
        // Loss does not depend on any tracked value, so backward still runs
        // but the frozen leaf gets nothing.
        let grads = g.backward(loss).unwrap();
        assert!(grads.slice(v).is_none());
    }

    #[test]
    fn linear_layer_applies_bias() {
        let mut rng = Rng::new(5);
        let mut lin = Linear::new("l", 3, 2, &mut rng);
        lin.bias.value = {
            let mut t = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
            t.requires_grad = true;
            t
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[1.0, -1.0]);
    }
}
