//! Named parameter groups shared by the model components.

use rand::Rng;

use crate::diff::{DualArray, Tape};

/// A fixed, ordered collection of named arrays.
pub trait ParamSet: Sized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &DualArray));
    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &DualArray) -> DualArray) -> Self;

    fn named(&self) -> Vec<(String, DualArray)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, a| out.push((n, a.clone())));
        out
    }

    /// Copy whose arrays are leaves on `tape`.
    fn bind(&self, tape: &Tape) -> Self {
        self.map("", &mut |_, a| tape.leaf(a.detach()))
    }

    /// Copy with no tape attachment.
    fn detached(&self) -> Self {
        self.map("", &mut |_, a| a.detach())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> DualArray {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    DualArray::from_parts(vec![fan_in, fan_out], data)
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: DualArray,
    pub bias: DualArray,
}

impl Linear {
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: glorot(rng, fan_in, fan_out),
            bias: DualArray::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &DualArray) -> crate::Result<DualArray> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &DualArray)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn map(&self, prefix: &str, f: &mut dyn FnMut(&str, &DualArray) -> DualArray) -> Self {
        Self {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}
