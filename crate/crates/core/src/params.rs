//! Named parameter groups and their binding into a graph.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Enumerates named tensors in a stable order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Records every parameter inserted into a graph so gradients can be read
/// back by name after `backward`.
#[derive(Debug, Default)]
pub struct Binder {
    trainable: bool,
    bound: Vec<(String, Var)>,
}

impl Binder {
    pub fn trainable() -> Self {
        Self {
            trainable: true,
            bound: Vec::new(),
        }
    }

    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, g: &mut Graph, name: String, t: &Tensor) -> Var {
        let v = g.leaf(t, self.trainable);
        self.bound.push((name, v));
        v
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// `(name, gradient)` for every bound parameter; zeros when the loss did
    /// not depend on it.
    pub fn gradients(&self, g: &Graph) -> Vec<(String, Vec<f64>)> {
        self.bound
            .iter()
            .map(|(name, v)| {
                let grad = g
                    .grad(*v)
                    .map_or_else(|| vec![0.0; g.value(*v).len()], <[f64]>::to_vec);
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Affine map `x W + b` over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[fan_in, fan_out], bound, rng),
            bias: Tensor::uniform(&[fan_out], bound, rng),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let w = binder.bind(g, join(prefix, "weight"), &self.weight);
        let b = binder.bind(g, join(prefix, "bias"), &self.bias);
        g.linear(x, w, b)
    }
}

impl Parameterized for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
