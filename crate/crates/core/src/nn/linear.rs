use alloc::format;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{impl_module, Param};
use crate::tensor::INIT_STD;

/// Affine map over the last axis: `x · W + b`, with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl_module!(Linear => weight, bias);

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, seed: u64) -> Result<Self> {
        Ok(Linear {
            weight: Param::normal(format!("{name}.weight"), &[input, output], seed, INIT_STD)?,
            bias: Some(Param::zeros(format!("{name}.bias"), &[output])?),
        })
    }

    /// `x · W` only.
    pub fn without_bias(name: &str, input: usize, output: usize, seed: u64) -> Result<Self> {
        Ok(Linear {
            bias: None,
            ..Linear::new(name, input, output, seed)?
        })
    }

    /// Square identity map with zero bias.
    pub fn identity(name: &str, width: usize) -> Result<Self> {
        Linear::new(name, width, width, 0).map(Linear::into_identity)
    }

    pub(crate) fn into_identity(mut self) -> Self {
        let width = self.input_width();
        let w = self.weight.value_mut().data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..width {
            w[i * width + i] = 1.0;
        }
        self
    }

    pub fn input_width(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(tape.param(&self.weight)?)?;
        match &self.bias {
            Some(b) => y.add(tape.param(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl_module!(LayerNorm => gamma, beta);

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: Param::ones(format!("{name}.gamma"), &[width])?,
            beta: Param::zeros(format!("{name}.beta"), &[width])?,
            eps: Self::EPS,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(tape.param(&self.gamma)?, tape.param(&self.beta)?, self.eps)
    }
}

/// Two-layer MLP `width → hidden → width` with exact GELU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_module!(FeedForward => fc1, fc2);

impl FeedForward {
    pub fn new(name: &str, width: usize, hidden: usize, seed: u64) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(&format!("{name}.fc1"), width, hidden, seed)?,
            fc2: Linear::new(&format!("{name}.fc2"), hidden, width, seed)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let width = self.fc1.input_width();
        if x.shape().last() != Some(&width) {
            return Err(Error::shape("feed_forward", &x.shape(), &[width]));
        }
        let h = self.fc1.forward(tape, x)?.gelu()?;
        self.fc2.forward(tape, h)
    }
}
